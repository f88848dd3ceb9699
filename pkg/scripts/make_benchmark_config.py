#!/usr/bin/env python3
"""Recompute the power-consistent mechanical torque for a benchmark config.

The two-machine model has no slack machine: at a symmetric equilibrium the
mechanical torque is fully determined by the excitation and the network,
so T_m_Nm must match e_f0_V to full precision.  Run this after editing any
electrical parameter, paste the printed torque into the config, and the
equilibrium solver will converge again.

Usage: python scripts/make_benchmark_config.py configs/benchmark.cfg
"""

import sys

import numpy as np

from wadc.config import build_generators, build_network, load_config
from wadc.grid_model import solve_algebraic


def consistent_torque(cfg, delta=0.0):
    gens = build_generators(cfg)
    net = build_network(cfg)
    g = gens[0]
    target = g.e_f0
    # the field equation is linear in the flux: two probes give the root
    x = np.array([delta, net.omega0, 0.0] * 2)
    probes = []
    for psi in (1000.0, 5000.0):
        x[2::3] = psi
        sol = solve_algebraic(gens, net, x)
        probes.append(g.R_f * sol.i_f[0])
    slope = (probes[1] - probes[0]) / 4000.0
    psi_star = 1000.0 + (target - probes[0]) / slope
    x[2::3] = psi_star
    sol = solve_algebraic(gens, net, x)
    assert abs(g.R_f * sol.i_f[0] - target) < 1e-9 * max(1.0, abs(target))
    return float(sol.T_e[0] + g.B_fric * net.omega0), psi_star, sol


def main():
    if len(sys.argv) != 2:
        print(__doc__)
        return 2
    cfg = load_config(sys.argv[1])
    t_m, psi_star, sol = consistent_torque(cfg)
    vmag = float(np.hypot(sol.e_d[0], sol.e_q[0]))
    p_mw = 1.5 * (sol.e_d[0] * sol.i_d[0] + sol.e_q[0] * sol.i_q[0]) / 1e6
    print(f"consistent torque  : T_m_Nm = {t_m:.17g}")
    print(f"field flux         : {psi_star:.6f} Wb")
    print(f"terminal voltage   : {vmag:.2f} V")
    print(f"electrical power   : {p_mw:.3f} MW per machine")
    current = cfg["generators"]["T_m_Nm"]
    if abs(current - t_m) > 1e-9 * max(1.0, abs(t_m)):
        print(f"config currently has T_m_Nm = {current:.17g}; update it.")
        return 1
    print("config torque is already consistent.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
