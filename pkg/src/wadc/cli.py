"""Command-line pipeline: linearize -> decompose -> design -> evaluate.

Subcommands
    linearize   write the small-signal matrices and operating point
    design      write per-mode sampled gains and certificates at one delay
    sweep       write the measure-vs-delay CSV with reference bounds
    simulate    write a closed-loop time trace and the measured cost

All numeric file output uses 17 significant digits, so reruns of the same
configuration are byte-identical (timings live only in the JSON report).
"""

import argparse
import hashlib
import json
import sys
import time

import numpy as np

from . import __version__
from .config import (
    BenchmarkConfig,
    build_cost,
    build_generators,
    build_network,
    build_output,
    load_config,
    local_gain_row,
)
from .dncs import (
    DelaySchedule,
    LocalGains,
    design_mode,
    modal_objectives,
    modal_subsystem,
    symmetric_modes,
)
from .errors import WadcError
from .grid_model import linearize, solve_equilibrium
from .sim_eval import (
    Scenario,
    refine_step,
    simulate_closed_loop,
    sweep_delays,
)

FMT = "%.17g"


def write_matrix(path, M):
    """Plain text: 'rows cols' then row-major values, 17 significant digits."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    for row in M:
        lines.append(" ".join(FMT % v for v in row))
    data = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(data)
    return data


def read_matrix(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        rows, cols = int(header[0]), int(header[1])
        out = np.array([[float(v) for v in fh.readline().split()]
                        for _ in range(rows)])
    if out.shape != (rows, cols):
        raise ValueError(f"{path}: malformed matrix file")
    return out


def _digest(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RunReport:
    """Reproduction record: resolved config, versions, timings, warnings."""

    def __init__(self, cfg: BenchmarkConfig, args):
        self.data = {
            "tool": {"name": "wadc", "version": __version__,
                     "numpy": np.__version__,
                     "scipy": __import__("scipy").__version__},
            "config_source": cfg.source,
            "resolved_config": cfg.resolved(),
            "command": args,
            "timings_s": {},
            "warnings": [],
            "notes": [],
            "outputs": {},
        }
        self._t0 = time.time()
        self._last = self._t0

    def stage(self, name):
        now = time.time()
        self.data["timings_s"][name] = round(now - self._last, 6)
        self._last = now

    def warn(self, msg):
        self.data["warnings"].append(msg)

    def note(self, msg):
        self.data["notes"].append(msg)

    def output(self, path, payload):
        self.data["outputs"][str(path)] = {"sha256": _digest(payload)}

    def write(self, path):
        self.data["timings_s"]["total"] = round(time.time() - self._t0, 6)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


class Pipeline:
    """Shared model assembly for every subcommand."""

    def __init__(self, cfg: BenchmarkConfig, report: RunReport):
        self.cfg = cfg
        self.gens = build_generators(cfg)
        self.net = build_network(cfg)
        eq = cfg["equilibrium"]
        self.op = solve_equilibrium(self.gens, self.net,
                                    v_target=eq["v_target_V"],
                                    tol=cfg["tolerances"]["equilibrium"],
                                    max_iters=eq["max_iters"])
        report.stage("equilibrium")
        self.plant = linearize(self.gens, self.net, self.op)
        report.stage("linearize")
        self.Q, self.R = build_cost(cfg)
        self.C, self.D_u, self.D_w = build_output(cfg)
        self._gain_cache = {}

    def gains(self, measure):
        if measure not in self._gain_cache:
            row = local_gain_row(self.cfg, measure)
            gains = LocalGains.from_blocks(self.plant, [row, row])
            dec = symmetric_modes(self.plant, gains,
                                  tol=1e-7)
            self._gain_cache[measure] = (gains, dec)
        return self._gain_cache[measure]

    def objectives(self, measure, mode):
        gains, dec = self.gains(measure)
        return modal_objectives(self.Q, self.R, self.C, self.D_u, self.D_w,
                                gains, dec, mode)


def _eig_string(M):
    eigs = sorted(np.linalg.eigvals(M), key=lambda z: (z.real, z.imag))
    return ", ".join(f"{z.real:+.6g}{z.imag:+.6g}j" for z in eigs)


def cmd_linearize(cfg, args, report):
    pipe = Pipeline(cfg, report)
    out = args.out
    paths = {}
    for name, M in (("A", pipe.plant.A), ("B_u", pipe.plant.B_u),
                    ("B_w", pipe.plant.B_w)):
        path = f"{out}/{name}.txt"
        report.output(path, write_matrix(path, M))
        paths[name] = path
    op_vec = np.concatenate([pipe.op.x, pipe.op.u])
    path = f"{out}/operating_point.txt"
    report.output(path, write_matrix(path, op_vec.reshape(-1, 1)))
    print(f"eig(A): {_eig_string(pipe.plant.A)}")
    for measure in ("lqr", "hinf"):
        gains, _ = pipe.gains(measure)
        eigs = np.linalg.eigvals(gains.A_bar)
        print(f"eig(A + B_u K[{measure}]): {_eig_string(gains.A_bar)}")
        if eigs.real.max() >= 0:
            raise WadcError("local loop not Hurwitz")  # unreachable; LocalGains checks
    report.stage("write")
    return 0


def _mode_list(dec, mode_arg):
    if mode_arg == "all":
        return list(range(dec.n_modes))
    return [dec.mode_index(mode_arg)]


def cmd_design(cfg, args, report):
    pipe = Pipeline(cfg, report)
    gains, dec = pipe.gains(args.measure)
    m = pipe.plant.m
    d = args.delay * (np.ones((m, m)) - np.eye(m))
    sched = DelaySchedule.from_links(dec, d, cfg["sampling"]["h_s"])
    gamma_tol = cfg["tolerances"]["gamma_rel"]
    summary = {}
    for i in _mode_list(dec, args.mode):
        sub = modal_subsystem(pipe.plant, gains, dec, i)
        obj = pipe.objectives(args.measure, i)
        md = design_mode(sub, obj, cfg["sampling"]["h_s"],
                         float(sched.d_hat[i]),
                         method=args.measure, gamma_tol=gamma_tol,
                         mode=i, label=dec.labels[i])
        path = f"{args.out}/F_{dec.labels[i]}.txt"
        report.output(path, write_matrix(path, md.F))
        entry = {"lifted_dim": md.disc.n_z, "q": md.disc.q, "r": md.disc.r,
                 "wait_s": float(sched.d_hat[i])}
        if args.measure == "lqr":
            z0 = md.disc.lift_state(
                np.asarray(cfg["scenario"]["initial_state"], dtype=float))
            entry["cost_certificate"] = md.result.J_star(z0)
        else:
            entry["gamma"] = md.result.gamma
            entry["certified_norm"] = md.result.norm
        summary[dec.labels[i]] = entry
        print(f"{dec.labels[i]}: {entry}")
    report.data["designs"] = summary
    report.stage("design")
    return 0


def cmd_sweep(cfg, args, report):
    pipe = Pipeline(cfg, report)
    gains, dec = pipe.gains(args.measure)
    grid = cfg["sampling"]["delay_grid_s"]
    h = cfg["sampling"]["h_s"]
    gamma_tol = cfg["tolerances"]["gamma_rel"]
    z0 = np.asarray(cfg["scenario"]["initial_state"], dtype=float)
    lines = ["delay_s,mode,measure,value,lower_bound,upper_bound,status"]
    ok = True
    for i in _mode_list(dec, args.mode):
        obj = pipe.objectives(args.measure, i)
        res = sweep_delays(pipe.plant, gains, dec, i, args.measure, grid, h,
                           obj, z0=z0 if args.measure == "lqr" else None,
                           gamma_tol=gamma_tol, threads=args.threads)
        for w in res.warnings:
            report.warn(f"{dec.labels[i]}: {w}")
        for r in res.rows:
            lines.append(",".join([
                FMT % r.delay, r.mode, r.measure, FMT % r.value,
                FMT % r.lower, FMT % r.upper, r.status]))
            ok = ok and r.status == "ok"
        report.stage(f"sweep:{dec.labels[i]}")
    payload = "\n".join(lines) + "\n"
    with open(args.out_file, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)
    report.output(args.out_file, payload)
    print(f"wrote {args.out_file} ({len(lines) - 1} rows); "
          f"bounds {'satisfied' if ok else 'VIOLATED'}")
    return 0 if ok else 1


def cmd_simulate(cfg, args, report):
    pipe = Pipeline(cfg, report)
    gains, dec = pipe.gains(args.measure)
    m = pipe.plant.m
    h = cfg["sampling"]["h_s"]
    d = args.delay * (np.ones((m, m)) - np.eye(m))
    sched = DelaySchedule.from_links(dec, d, h)
    gamma_tol = cfg["tolerances"]["gamma_rel"]
    designs = []
    for i in range(dec.n_modes):
        sub = modal_subsystem(pipe.plant, gains, dec, i)
        obj = pipe.objectives(args.measure, i)
        designs.append(design_mode(sub, obj, h, float(sched.d_hat[i]),
                                   method=args.measure, gamma_tol=gamma_tol,
                                   mode=i, label=dec.labels[i]))
    from .dncs import assemble_controller
    ctrl = assemble_controller(gains, dec, sched, designs)
    report.stage("design")

    scn_cfg = cfg["scenario"]
    mode_i = dec.mode_index(scn_cfg["initial_mode"])
    x_hat0 = np.zeros(pipe.plant.n_x)
    init = np.asarray(scn_cfg["initial_state"], dtype=float)
    x_hat0[dec.x_slice(mode_i)] = init
    disturbance = None
    if scn_cfg["disturbance"] == "impulse":
        disturbance = np.zeros((1, pipe.plant.n_w))
        disturbance[0, 0] = scn_cfg["impulse_amp_A"]
    elif scn_cfg["disturbance"] == "random":
        rng = np.random.default_rng(args.seed)
        disturbance = scn_cfg["impulse_amp_A"] * rng.standard_normal(
            (scn_cfg["random_samples"], pipe.plant.n_w))
        report.note(f"random disturbance with seed {args.seed}")

    step_req = scn_cfg["integrator_step_s"]
    fastest = float(np.abs(np.linalg.eigvals(gains.A_bar)).max())
    step = refine_step(step_req, h, [float(v) for v in sched.d_rho],
                       fastest_rate=fastest)
    if step != step_req:
        report.note(f"integrator step refined from {step_req} to {step} "
                    "to hit every sampling/switching instant and stay "
                    "inside the integrator's stability region")
    scn = Scenario(initial_state=x_hat0, schedule=sched,
                   disturbance=disturbance, integrator_step=step,
                   horizon=scn_cfg["horizon_s"])
    out = simulate_closed_loop(pipe.plant, ctrl, scn, pipe.Q, pipe.R,
                               C=pipe.C, D_u=pipe.D_u, D_w=pipe.D_w)
    report.stage("simulate")

    header = (["t_s"]
              + [f"{n}_{i + 1}" for i in range(m)
                 for n in ("d_delta", "d_omega", "d_psi_f")]
              + [f"u_ef_{i + 1}" for i in range(m)]
              + [f"ubar_ef_{i + 1}" for i in range(m)]
              + [f"y_{j + 1}" for j in range(out.y.shape[1])])
    cols = np.column_stack([out.t, out.x, out.u, out.u_bar, out.y])
    import io
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    np.savetxt(buf, cols, fmt=FMT, delimiter=",", newline="\n")
    payload = buf.getvalue()
    with open(args.out_file, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)
    report.output(args.out_file, payload)

    summary = {"J_measured": out.J, "horizon_s": out.horizon,
               "integrator_step_s": out.step}
    if args.measure == "lqr" and disturbance is None:
        md = designs[mode_i]
        z0 = md.disc.lift_state(init)
        cert = md.result.J_star(z0)
        summary["cost_certificate"] = cert
        summary["relative_gap"] = abs(out.J - cert) / max(cert, 1e-300)
    elif args.measure == "hinf":
        summary["gamma"] = {md.label: md.result.gamma for md in designs}
    report.data["summary"] = summary
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="wadc",
        description="Delay-aware distributed damping control of a "
                    "two-machine grid: modeling, design and evaluation.")
    parser.add_argument("--config", required=True, help="configuration file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for randomized scenarios only")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent sweep rows")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("linearize", help="write A, B_u, B_w and the "
                                     "operating point")

    p_design = sub.add_parser("design", help="per-mode gains at one delay")
    p_design.add_argument("--measure", choices=("lqr", "hinf"),
                          default="lqr")
    p_design.add_argument("--mode",
                          choices=("oscillation", "common", "all"),
                          default="all")
    p_design.add_argument("--delay", type=float, default=0.0,
                          help="link delay [s]")

    p_sweep = sub.add_parser("sweep", help="measure vs delay CSV")
    p_sweep.add_argument("--measure", choices=("lqr", "hinf"),
                         default="lqr")
    p_sweep.add_argument("--mode",
                         choices=("oscillation", "common", "all"),
                         default="oscillation")

    p_sim = sub.add_parser("simulate", help="closed-loop trace and cost")
    p_sim.add_argument("--measure", choices=("lqr", "hinf"), default="lqr")
    p_sim.add_argument("--delay", type=float, default=0.0,
                       help="link delay [s]")

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (WadcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    import os
    os.makedirs(args.out, exist_ok=True)
    if args.command in ("sweep", "simulate"):
        args.out_file = os.path.join(
            args.out, "sweep.csv" if args.command == "sweep" else "trace.csv")
    report = RunReport(cfg, vars(args).copy())
    handlers = {"linearize": cmd_linearize, "design": cmd_design,
                "sweep": cmd_sweep, "simulate": cmd_simulate}
    try:
        code = handlers[args.command](cfg, args, report)
    except WadcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        report.warn(str(exc))
        report.write(os.path.join(args.out, "report.json"))
        return 3
    report.write(os.path.join(args.out, "report.json"))
    return code


if __name__ == "__main__":
    sys.exit(main())
