import numpy as np
import pytest
import scipy.linalg

from conftest import C_OUT, DU_OUT, DW_OUT, Q_COST, R_COST
from test_dncs import synthetic_symmetric_plant
from wadc.dncs import (
    DelaySchedule,
    LocalGains,
    assemble_controller,
    design_mode,
    modal_objectives,
    modal_subsystem,
    symmetric_modes,
)
from wadc.errors import EventGridMismatch
from wadc.sim_eval import (
    Scenario,
    attenuation_of_mode,
    compute_bounds,
    refine_step,
    simulate_closed_loop,
    sweep_delays,
)
from wadc.synthesis import hinf_norm


def build_controller(plant, gains, dec, tau, h=0.02, method="lqr",
                     zero_gains=False):
    d = tau * (np.ones((2, 2)) - np.eye(2))
    sched = DelaySchedule.from_links(dec, d, h)
    designs = []
    for i in range(2):
        sub = modal_subsystem(plant, gains, dec, i)
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains, dec, i)
        md = design_mode(sub, obj, h, float(sched.d_hat[i]), method=method,
                         mode=i, label=dec.labels[i])
        if zero_gains:
            from dataclasses import replace
            md = replace(md, F=np.zeros_like(md.F))
        designs.append(md)
    return assemble_controller(gains, dec, sched, designs), designs


class TestRefineStep:
    def test_halved_gcd(self):
        # 13 ms offset against a 20 ms period: events align on a 0.5 ms grid
        assert refine_step(0.002, 0.02, [0.013]) == 0.0005

    def test_simple_divisor(self):
        assert refine_step(0.001, 0.02, [0.1]) == 0.000625

    def test_no_offsets(self):
        assert refine_step(0.01, 0.02, []) == 0.01


class TestSimulate:
    def test_zero_initial_state(self, bench_plant, gains_k1, dec_k1):
        ctrl, _ = build_controller(bench_plant, gains_k1, dec_k1, 0.04)
        scn = Scenario(initial_state=np.zeros(6), schedule=ctrl.schedule,
                       integrator_step=0.01, horizon=5.0)
        out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)
        assert out.J == 0.0
        np.testing.assert_array_equal(out.x, 0.0)
        np.testing.assert_array_equal(out.u, 0.0)

    def test_event_grid_mismatch(self, bench_plant, gains_k1, dec_k1):
        ctrl, _ = build_controller(bench_plant, gains_k1, dec_k1, 0.03)
        scn = Scenario(initial_state=np.zeros(6), schedule=ctrl.schedule,
                       integrator_step=0.02, horizon=1.0)
        with pytest.raises(EventGridMismatch):
            simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)

    def test_decentralized_lyapunov_oracle(self, bench_plant, gains_k1,
                                           dec_k1):
        # remote commands zeroed: the cost over [0, T] equals the Lyapunov
        # quadratic-form difference for the oscillation-mode block
        ctrl, designs = build_controller(bench_plant, gains_k1, dec_k1, 0.0,
                                         zero_gains=True)
        x_hat0 = np.array([1.0, 0, 0, 0, 0, 0])
        T_end = 50.0
        scn = Scenario(initial_state=x_hat0, schedule=ctrl.schedule,
                       integrator_step=0.005, horizon=T_end)
        out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)
        sub = modal_subsystem(bench_plant, gains_k1, dec_k1, 0)
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k1, dec_k1, 0)
        P = scipy.linalg.solve_continuous_lyapunov(sub.A.T, -obj.Q)
        x_hat_T = (dec_k1.M_x_inv @ out.x[-1])[:3]
        expected = x_hat0[:3] @ P @ x_hat0[:3] - x_hat_T @ P @ x_hat_T
        assert abs(out.J - expected) <= 1e-5 * abs(expected)

    def test_decentralized_embedding(self, bench_plant, gains_k1, dec_k1):
        # zero remote gains reproduce the plain pre-stabilized flow
        ctrl, _ = build_controller(bench_plant, gains_k1, dec_k1, 0.04,
                                   zero_gains=True)
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=6) * 0.1
        scn = Scenario(initial_state=x0, initial_coords="physical",
                       schedule=ctrl.schedule, integrator_step=0.01,
                       horizon=2.0)
        out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)
        # independent stage-form RK4 on d/dt x = A_bar x
        A = gains_k1.A_bar
        x = x0.copy()
        dt = 0.01
        for k in range(1, len(out.t)):
            k1 = A @ x
            k2 = A @ (x + 0.5 * dt * k1)
            k3 = A @ (x + 0.5 * dt * k2)
            k4 = A @ (x + dt * k3)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            assert np.abs(out.x[k] - x).max() <= 1e-10 * max(
                1.0, np.abs(x).max())
            np.testing.assert_array_equal(out.u_bar[k], 0.0)

    def test_lifted_model_matches_simulation(self, bench_plant, gains_k1,
                                             dec_k1):
        # closed-loop samples x_hat(kh) must follow the designed lifted
        # recursion exactly (up to integrator error)
        tau, h = 0.06, 0.02
        ctrl, designs = build_controller(bench_plant, gains_k1, dec_k1, tau)
        md = designs[0]
        x_hat0 = np.array([0.7, 0.1, -0.2, 0, 0, 0])
        scn = Scenario(initial_state=x_hat0, schedule=ctrl.schedule,
                       integrator_step=0.00125, horizon=4.0)
        out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)
        n_h = round(h / scn.integrator_step)
        z = md.disc.lift_state(x_hat0[:3])
        A_cl = md.disc.A2 + md.disc.B2u @ md.F
        worst, scale = 0.0, 1.0
        for k in range(int(4.0 / h)):
            x_hat_k = (dec_k1.M_x_inv @ out.x[k * n_h])[:3]
            worst = max(worst, np.abs(x_hat_k - z[:3]).max())
            scale = max(scale, np.abs(z[:3]).max())
            z = A_cl @ z
        assert worst <= 1e-8 * scale

    def test_certificate_against_simulation(self, bench_plant, gains_k1,
                                            dec_k1):
        tau = 0.06
        ctrl, designs = build_controller(bench_plant, gains_k1, dec_k1, tau)
        md = designs[0]
        x_hat0 = np.array([1.0, 0, 0, 0, 0, 0])
        scn = Scenario(initial_state=x_hat0, schedule=ctrl.schedule,
                       integrator_step=0.01, horizon=800.0)
        out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)
        J_cert = md.result.J_star(md.disc.lift_state(x_hat0[:3]))
        assert abs(out.J - J_cert) <= 5e-3 * J_cert

    def test_integrator_step_halving(self, bench_plant, gains_k1, dec_k1):
        ctrl, _ = build_controller(bench_plant, gains_k1, dec_k1, 0.04)
        x_hat0 = np.array([1.0, 0, 0, 0, 0, 0])
        Js = []
        for dt in (0.01, 0.005):
            scn = Scenario(initial_state=x_hat0, schedule=ctrl.schedule,
                           integrator_step=dt, horizon=100.0)
            out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST)
            Js.append(out.J)
        assert abs(Js[0] - Js[1]) <= 1e-4 * abs(Js[1])

    def test_disturbance_and_outputs(self, bench_plant, gains_k1, dec_k1):
        ctrl, _ = build_controller(bench_plant, gains_k1, dec_k1, 0.02)
        w = np.zeros((1, 4))
        w[0, 0] = 50.0  # one-sample pulse at load bus 1
        scn = Scenario(initial_state=np.zeros(6), schedule=ctrl.schedule,
                       disturbance=w, integrator_step=0.01, horizon=20.0)
        out = simulate_closed_loop(bench_plant, ctrl, scn, Q_COST, R_COST,
                                   C=C_OUT, D_u=DU_OUT, D_w=DW_OUT)
        assert np.abs(out.x).max() > 0  # the pulse excites the grid
        assert out.y.shape == (len(out.t), 2)
        assert np.isfinite(out.J)


class TestAttenuation:
    def test_gamma_increases_with_delay(self, bench_plant, gains_k2, dec_k2):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k2, dec_k2, 0)
        g0, _ = attenuation_of_mode(bench_plant, gains_k2, dec_k2, 0, obj,
                                    0.02, 0.0)
        g2, _ = attenuation_of_mode(bench_plant, gains_k2, dec_k2, 0, obj,
                                    0.02, 0.2)
        assert g0 <= g2

    def test_input_weight_raises_gamma(self, bench_plant, gains_k2, dec_k2):
        from dataclasses import replace
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k2, dec_k2, 0)
        heavy = replace(obj, D_u=2.0 * obj.D_u)
        g1, _ = attenuation_of_mode(bench_plant, gains_k2, dec_k2, 0, obj,
                                    0.02, 0.06)
        g2, _ = attenuation_of_mode(bench_plant, gains_k2, dec_k2, 0, heavy,
                                    0.02, 0.06)
        assert g2 > g1


class TestBounds:
    def test_lqr_bounds_sandwich_zero_delay(self, bench_plant, gains_k1,
                                            dec_k1):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k1, dec_k1, 0)
        z0 = np.array([1.0, 0, 0])
        upper, lower = compute_bounds(bench_plant, gains_k1, dec_k1, 0, obj,
                                      0.02, "lqr", z0=z0)
        assert lower <= upper
        sub = modal_subsystem(bench_plant, gains_k1, dec_k1, 0)
        md = design_mode(sub, obj, 0.02, 0.0, method="lqr")
        value = md.result.J_star(md.disc.lift_state(z0))
        assert lower - 1e-9 * abs(lower) <= value <= upper * (1 + 1e-9)

    def test_hinf_upper_is_open_loop_norm(self, bench_plant, gains_k2,
                                          dec_k2):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k2, dec_k2, 0)
        upper, lower = compute_bounds(bench_plant, gains_k2, dec_k2, 0, obj,
                                      0.02, "hinf")
        sub = modal_subsystem(bench_plant, gains_k2, dec_k2, 0)
        md = design_mode(sub, obj, 0.02, 0.0, method="lqr", mode=0)
        ref = hinf_norm(md.disc.A2, md.disc.B2w, md.disc.C2, md.disc.D2w)
        assert abs(upper - ref) <= 1e-9 * ref
        assert lower <= upper

    def test_priced_out_remote_control(self):
        # with zero local gains and a huge input weight both bounds collapse
        # to the uncontrolled cost
        rng = np.random.default_rng(1)
        plant, _, _ = synthetic_symmetric_plant(rng)
        gains = LocalGains.from_blocks(plant, [np.zeros((1, 3))] * 2)
        dec = symmetric_modes(plant, gains)
        Q = np.eye(6)
        R_huge = 1e8 * np.eye(2)
        obj = modal_objectives(Q, R_huge, C_OUT, DU_OUT, DW_OUT, gains,
                               dec, 0)
        z0 = np.array([1.0, 0.5, -0.2])
        upper, lower = compute_bounds(plant, gains, dec, 0, obj, 0.02,
                                      "lqr", z0=z0)
        assert abs(upper - lower) <= 1e-4 * upper


class TestSweep:
    def test_lqr_sweep_rows(self, bench_plant, gains_k1, dec_k1):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k1, dec_k1, 0)
        grid = [0.0, 0.1, 0.3, 0.5]
        res = sweep_delays(bench_plant, gains_k1, dec_k1, 0, "lqr", grid,
                           0.02, obj)
        assert res.all_ok()
        vals = [r.value for r in res.rows]
        assert all(r.lower <= r.value <= r.upper * (1 + 1e-9)
                   for r in res.rows)
        assert vals == sorted(vals)  # nondecreasing on the benchmark
        assert not res.warnings

    def test_common_mode_sweep(self, bench_plant, gains_k1, dec_k1):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k1, dec_k1, 1)
        res = sweep_delays(bench_plant, gains_k1, dec_k1, "common", "lqr",
                           [0.0, 0.2], 0.02, obj)
        assert res.all_ok()

    def test_hinf_sweep_rows(self, bench_plant, gains_k2, dec_k2):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k2, dec_k2, 0)
        res = sweep_delays(bench_plant, gains_k2, dec_k2, 0, "hinf",
                           [0.0, 0.2, 0.4], 0.02, obj)
        assert res.all_ok()

    def test_bad_grid_rejected(self, bench_plant, gains_k1, dec_k1):
        obj = modal_objectives(Q_COST, R_COST, C_OUT, DU_OUT, DW_OUT,
                               gains_k1, dec_k1, 0)
        with pytest.raises(ValueError):
            sweep_delays(bench_plant, gains_k1, dec_k1, 0, "lqr",
                         [0.2, 0.1], 0.02, obj)
