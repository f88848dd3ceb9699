"""Discrete-time gain synthesis on a lifted sampled system.

LQR gains come from the algebraic Riccati equation solved by a
structure-preserving doubling iteration, with policy/value iteration
fallbacks for the singular input-weight case that arises whenever the
delay reaches a full sampling period (the new input sample then carries no
within-interval cost).  H-infinity state feedback solves the indefinite
game Riccati equation; every accepted design is certified independently by
positivity pivots, closed-loop stability and a unit-circle norm sweep, so
the Riccati backend cannot silently return a wrong answer.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    GammaInfeasible,
    IndefiniteCost,
    NoFeasibleGamma,
    NotStabilizable,
    UnstableSystem,
)
from .sampled import DiscretizedSystem

__all__ = [
    "LqrResult",
    "HinfResult",
    "stein_solve",
    "dare_solve",
    "dare_residual",
    "lqr_design",
    "hinf_design",
    "gamma_min",
    "hinf_norm",
]

log = logging.getLogger(__name__)

_RESIDUAL_TOL = 1e-9


def spectral_radius(A):
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(A)).max())


def stein_solve(A, Q, max_doublings=120):
    """Solve P = A' P A + Q for Schur-stable A by doubling."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if spectral_radius(A) >= 1.0:
        raise UnstableSystem("Stein equation needs a Schur-stable matrix")
    S = 0.5 * (Q + Q.T)
    T = A.copy()
    scale = 1.0 + np.abs(S).max()
    for _ in range(max_doublings):
        S = S + T.T @ S @ T
        T = T @ T
        if np.abs(T).max() ** 2 * np.abs(S).max() <= 1e-18 * scale:
            break
    return 0.5 * (S + S.T)


def _pinv_solve(H, rhs):
    """Solve H x = rhs, falling back to least squares when H is singular."""
    try:
        x = np.linalg.solve(H, rhs)
        if np.isfinite(x).all():
            return x
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(H, rhs, rcond=None)[0]


def dare_residual(A, B, Q, N, R, P):
    """Relative residual of the Riccati equation at P."""
    H = R + B.T @ P @ B
    G = A.T @ P @ B + N
    res = A.T @ P @ A - P - G @ _pinv_solve(H, G.T) + Q
    return np.abs(res).max() / (1.0 + np.abs(P).max())


def _gain_from(A, B, N, R, P):
    H = R + B.T @ P @ B
    return -_pinv_solve(H, B.T @ P @ A + N.T)


def _sda(A, G, H, max_iters=120):
    """Doubling iteration for P = A' P (I + G P)^{-1} A + H."""
    n = A.shape[0]
    Ak, Gk, Hk = A.copy(), G.copy(), H.copy()
    for _ in range(max_iters):
        W = np.eye(n) + Gk @ Hk
        try:
            Wia = np.linalg.solve(W, Ak)
            WiG = np.linalg.solve(W, Gk)
        except np.linalg.LinAlgError:
            raise NotStabilizable("doubling iteration pivot breakdown")
        H_new = Hk + Ak.T @ Hk @ Wia
        G_new = Gk + Ak @ WiG @ Ak.T
        A_new = Ak @ Wia
        step = np.abs(H_new - Hk).max()
        Ak, Gk, Hk = A_new, 0.5 * (G_new + G_new.T), 0.5 * (H_new + H_new.T)
        if not np.isfinite(Hk).all():
            raise NotStabilizable("doubling iteration diverged")
        if step <= 1e-16 * (1.0 + np.abs(Hk).max()) and np.abs(Ak).max() < 1e-8:
            break
    return Hk


def _policy_iteration(A, B, Q, N, R, max_iters=200):
    """Newton (policy) iteration from the zero gain; needs stable A."""
    n, m = A.shape[0], B.shape[1]
    F = np.zeros((m, n))
    P = None
    for _ in range(max_iters):
        A_cl = A + B @ F
        if spectral_radius(A_cl) >= 1.0:
            raise NotStabilizable("policy iteration lost stability")
        Q_cl = Q + N @ F + F.T @ N.T + F.T @ R @ F
        P = stein_solve(A_cl, Q_cl)
        if dare_residual(A, B, Q, N, R, P) <= _RESIDUAL_TOL:
            return P
        F = _gain_from(A, B, N, R, P)
    raise NotStabilizable("policy iteration did not converge")


def _value_iteration(A, B, Q, N, R, max_iters=200_000):
    P = Q.copy()
    scale = 1.0 + np.abs(Q).max()
    check_every = 50
    for it in range(max_iters):
        H = R + B.T @ P @ B
        G = A.T @ P @ B + N
        P_new = A.T @ P @ A - G @ _pinv_solve(H, G.T) + Q
        P_new = 0.5 * (P_new + P_new.T)
        if not np.isfinite(P_new).all() or np.abs(P_new).max() > 1e14 * scale:
            raise NotStabilizable("value iteration diverged")
        step = np.abs(P_new - P).max()
        P = P_new
        if step <= 1e-13 * (1.0 + np.abs(P).max()) or (
                it % check_every == check_every - 1
                and dare_residual(A, B, Q, N, R, P) <= _RESIDUAL_TOL):
            if dare_residual(A, B, Q, N, R, P) <= _RESIDUAL_TOL:
                return P
    raise NotStabilizable("value iteration did not converge")


def dare_solve(A, B, Q, N=None, R=None):
    """Stabilizing solution of
    A'PA - P - (A'PB + N)(B'PB + R)^{-1}(B'PA + N') + Q = 0.

    Doubling on the cross-term-reduced form when R is positive definite;
    otherwise policy iteration from the zero gain (valid because the lifted
    plant here is always pre-stabilized), with plain value iteration as the
    last resort.  Convergence is declared on the equation residual.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    n, m = A.shape[0], B.shape[1]
    Q = 0.5 * (np.asarray(Q, dtype=float).reshape(n, n)
               + np.asarray(Q, dtype=float).reshape(n, n).T)
    N = (np.zeros((n, m)) if N is None
         else np.asarray(N, dtype=float).reshape(n, m))
    R = (np.zeros((m, m)) if R is None
         else np.asarray(R, dtype=float).reshape(m, m))
    R = 0.5 * (R + R.T)

    r_eigs = np.linalg.eigvalsh(R)
    r_scale = 1.0 + np.abs(r_eigs).max()
    if r_eigs.min() < -1e-10 * r_scale:
        raise IndefiniteCost("input-weight block has a negative eigenvalue")

    P = None
    if r_eigs.min() > 1e-12 * r_scale:
        # complete the square to remove the cross term, then double
        Rinv_Nt = np.linalg.solve(R, N.T)
        A_red = A - B @ Rinv_Nt
        Q_red = Q - N @ Rinv_Nt
        Q_red = 0.5 * (Q_red + Q_red.T)
        G = B @ np.linalg.solve(R, B.T)
        try:
            P = _sda(A_red, 0.5 * (G + G.T), Q_red)
            if dare_residual(A, B, Q, N, R, P) > _RESIDUAL_TOL:
                P = None
        except NotStabilizable:
            P = None
    if P is None and spectral_radius(A) < 1.0:
        try:
            P = _policy_iteration(A, B, Q, N, R)
        except NotStabilizable:
            P = None
    if P is None:
        P = _value_iteration(A, B, Q, N, R)

    P = 0.5 * (P + P.T)
    H = R + B.T @ P @ B
    piv = np.linalg.eigvalsh(0.5 * (H + H.T))
    if piv.min() < -1e-9 * (1.0 + np.abs(piv).max()):
        raise IndefiniteCost("R + B'PB pivot is indefinite at the solution")
    F = _gain_from(A, B, N, R, P)
    if m and spectral_radius(A + B @ F) >= 1.0:
        raise NotStabilizable("closed loop is not Schur stable")
    if not m and spectral_radius(A) >= 1.0:
        raise NotStabilizable("no input and A is not Schur stable")
    return P


@dataclass(frozen=True)
class LqrResult:
    """Optimal sampled state feedback u_k = F z_k with value z0' P z0."""

    F: np.ndarray
    P: np.ndarray

    def J_star(self, z0):
        z0 = np.asarray(z0, dtype=float).reshape(-1)
        return float(z0 @ self.P @ z0)


def lqr_design(disc: DiscretizedSystem) -> LqrResult:
    """Design the cost-minimizing feedback for the lifted discrete system."""
    stacked = np.block([[disc.Q2, disc.N2], [disc.N2.T, disc.R2]])
    w = np.linalg.eigvalsh(0.5 * (stacked + stacked.T))
    if w.min() < -1e-9 * (1.0 + np.abs(w).max()):
        raise IndefiniteCost("lifted cost matrix is not positive semidefinite")
    P = dare_solve(disc.A2, disc.B2u, disc.Q2, disc.N2, disc.R2)
    F = _gain_from(disc.A2, disc.B2u, disc.N2, disc.R2, P)
    return LqrResult(F=F, P=P)


def hinf_norm(A, B, C, D, n_grid=4096, refine_iters=60):
    """Peak of sigma_max(C (e^{j theta} I - A)^{-1} B + D) on the unit circle.

    Dense grid on [0, pi] (real systems are conjugate-symmetric), augmented
    with clusters around every eigenvalue frequency (lightly damped
    resonances are far narrower than the grid spacing), then golden-section
    refinement around the best candidates.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n = A.shape[0]
    if n == 0 or B.size == 0 or C.size == 0:
        return float(np.linalg.svd(D, compute_uv=False).max()) if D.size else 0.0
    eig_A = np.linalg.eigvals(A)
    if np.abs(eig_A).max() >= 1.0:
        raise UnstableSystem(f"spectral radius {np.abs(eig_A).max():.6f} >= 1")

    lam, V = np.linalg.eig(A)
    use_eig = np.isfinite(np.linalg.cond(V)) and np.linalg.cond(V) < 1e9
    if use_eig:
        CV = C.astype(complex) @ V
        VB = np.linalg.solve(V, B.astype(complex))

        def sigma_many(thetas):
            zs = np.exp(1j * np.asarray(thetas, dtype=float))
            W = 1.0 / (zs[:, None] - lam[None, :])        # (F, n)
            T = np.einsum("ak,fk,kb->fab", CV, W, VB) + D
            return np.linalg.svd(T, compute_uv=False)[..., 0].real
    else:
        def sigma_many(thetas):
            zs = np.exp(1j * np.asarray(thetas, dtype=float))
            M = zs[:, None, None] * np.eye(n) - A
            X = np.linalg.solve(M, np.broadcast_to(
                B.astype(complex), (len(zs), *B.shape)).copy())
            T = C @ X + D
            return np.linalg.svd(T, compute_uv=False)[..., 0].real

    thetas = [np.linspace(0.0, np.pi, n_grid)]
    spacing = np.pi / (n_grid - 1)
    for ev in eig_A:
        th0 = abs(np.angle(ev))
        width = max(1e-12, 1.0 - abs(ev))
        local = th0 + width * np.linspace(-4.0, 4.0, 33)
        thetas.append(np.clip(local, 0.0, np.pi))
    thetas = np.unique(np.concatenate(thetas))
    vals = sigma_many(thetas)
    i = int(vals.argmax())
    lo = thetas[max(i - 1, 0)]
    hi = thetas[min(i + 1, len(thetas) - 1)]
    lo, hi = max(0.0, lo - 0.25 * spacing), min(np.pi, hi + 0.25 * spacing)

    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d_ = a + inv_phi * (b - a)
    fc = sigma_many([c])[0]
    fd = sigma_many([d_])[0]
    for _ in range(refine_iters):
        if fc > fd:
            b, d_, fd = d_, c, fc
            c = b - inv_phi * (b - a)
            fc = sigma_many([c])[0]
        else:
            a, c, fc = c, d_, fd
            d_ = a + inv_phi * (b - a)
            fd = sigma_many([d_])[0]
        if b - a < 1e-12:
            break
    return float(max(vals[i], fc, fd))


@dataclass(frozen=True)
class HinfResult:
    """Certified attenuation design: u_k = F z_k keeps the closed-loop
    disturbance-to-output norm below gamma."""

    F: np.ndarray
    P: np.ndarray
    gamma: float
    norm: float


def _game_h6_solve(disc, P, gamma, H3, rhs_u, rhs_w):
    """Solve H6 [x; y] = [rhs_u; rhs_w] by block elimination through the
    positive definite disturbance pivot H3.

    The two diagonal blocks of H6 differ by a factor of gamma^2, so a joint
    factorization loses the control block; the Schur-complement route stays
    well scaled at any gamma and reproduces the published gain formula.
    """
    H2 = disc.B2u.T @ P @ disc.B2w + disc.D2u.T @ disc.D2w
    H1 = disc.B2u.T @ P @ disc.B2u + disc.D2u.T @ disc.D2u \
        + H2 @ np.linalg.solve(H3, H2.T)
    x = _pinv_solve(0.5 * (H1 + H1.T), rhs_u + H2 @ np.linalg.solve(H3, rhs_w))
    y = np.linalg.solve(H3, H2.T @ x - rhs_w)
    return x, y


def _game_step(disc, P, gamma):
    """One application of the game Riccati map, None if H3 loses positivity."""
    Q = disc.C2.T @ disc.C2
    H3 = gamma ** 2 * np.eye(disc.n_w) - disc.D2w.T @ disc.D2w \
        - disc.B2w.T @ P @ disc.B2w
    if np.linalg.eigvalsh(0.5 * (H3 + H3.T)).min() <= 0.0:
        return None
    H5u = disc.B2u.T @ P @ disc.A2 + disc.D2u.T @ disc.C2
    H5w = disc.B2w.T @ P @ disc.A2 + disc.D2w.T @ disc.C2
    x, y = _game_h6_solve(disc, P, gamma, H3, H5u, H5w)
    P_new = disc.A2.T @ P @ disc.A2 + Q - H5u.T @ x - H5w.T @ y
    return 0.5 * (P_new + P_new.T)


def _game_residual(disc, P, gamma):
    P_next = _game_step(disc, P, gamma)
    if P_next is None:
        return np.inf
    return np.abs(P_next - P).max() / (1.0 + np.abs(P).max())


def _game_riccati_value_iteration(disc, gamma, max_iters=30_000):
    P = np.zeros((disc.n_z, disc.n_z))
    scale = 1.0 + np.abs(disc.C2).max() ** 2
    for _ in range(max_iters):
        P_new = _game_step(disc, P, gamma)
        if P_new is None:
            raise GammaInfeasible("H3", "lost positivity along the iteration")
        if not np.isfinite(P_new).all() or np.abs(P_new).max() > 1e13 * scale:
            raise GammaInfeasible("riccati_diverged")
        step = np.abs(P_new - P).max()
        P = P_new
        if step <= 1e-12 * (1.0 + np.abs(P).max()):
            return P
    raise GammaInfeasible("riccati_no_convergence")


def _game_riccati_candidates(disc, gamma):
    """Yield candidate solutions of the attenuation Riccati equation:
    the direct pencil solve first, then the monotone value iteration."""
    B2 = np.hstack([disc.B2u, disc.B2w])
    D2 = np.hstack([disc.D2u, disc.D2w])
    Q = disc.C2.T @ disc.C2
    R = D2.T @ D2
    R[disc.n_u:, disc.n_u:] -= gamma ** 2 * np.eye(disc.n_w)
    S = disc.C2.T @ D2
    try:
        P = scipy.linalg.solve_discrete_are(disc.A2, B2, Q, R, s=S)
        P = 0.5 * (P + P.T)
        if np.isfinite(P).all() and _game_residual(disc, P, gamma) <= 1e-8:
            yield P
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        pass
    yield _game_riccati_value_iteration(disc, gamma)


def _certify(disc, F_applied, gamma):
    A_cl = disc.A2 + disc.B2u @ F_applied
    if spectral_radius(A_cl) >= 1.0:
        return None, "closed_loop_unstable"
    norm = hinf_norm(A_cl, disc.B2w, disc.C2 + disc.D2u @ F_applied, disc.D2w)
    if norm >= gamma:
        return None, "norm_not_below_gamma"
    return norm, None


def hinf_design(disc: DiscretizedSystem, gamma) -> HinfResult:
    """State-feedback design guaranteeing closed-loop norm below gamma.

    Solves the game Riccati equation and checks, in order: equation
    residual, P positive semidefinite, disturbance pivot H3 positive
    definite, control pivot H1 positive definite, closed-loop Schur
    stability, and the certified unit-circle norm.  The formula leaves the
    feedback sign ambiguous; u = -F z is applied because the opposite sign
    fails these checks (tried once and logged if it ever certifies).
    """
    gamma = float(gamma)
    if gamma <= 0.0:
        raise GammaInfeasible("gamma_nonpositive")
    w0 = np.linalg.eigvalsh(
        gamma ** 2 * np.eye(disc.n_w) - disc.D2w.T @ disc.D2w)
    if w0.min() <= 0.0:
        raise GammaInfeasible("H3", "gamma below the static gain of D2w")

    no_control = (np.abs(disc.B2u).max() == 0.0 if disc.B2u.size else True) \
        and (np.abs(disc.D2u).max() == 0.0 if disc.D2u.size else True)
    if no_control:
        F = np.zeros((disc.n_u, disc.n_z))
        norm, why = _certify(disc, F, gamma)
        if why:
            raise GammaInfeasible(why, "system has no control authority")
        if spectral_radius(disc.A2) < 1.0 and np.abs(disc.B2w).max() > 0.0:
            try:
                P = next(iter(_game_riccati_candidates(disc, gamma)))
            except GammaInfeasible:
                P = stein_solve(disc.A2, disc.C2.T @ disc.C2)
        else:
            P = np.zeros((disc.n_z, disc.n_z))
        return HinfResult(F=F, P=P, gamma=gamma, norm=norm)

    failure = GammaInfeasible("riccati_no_convergence")
    try:
        for P in _game_riccati_candidates(disc, gamma):
            try:
                return _design_from_solution(disc, gamma, P)
            except GammaInfeasible as exc:
                failure = exc
    except GammaInfeasible as exc:
        failure = exc
    raise failure


def _design_from_solution(disc, gamma, P):
    """Build and certify the gain from a candidate Riccati solution."""
    scale = max(1.0, np.abs(P).max())
    if np.linalg.eigvalsh(P).min() < -1e-6 * scale:
        raise GammaInfeasible("P_not_psd")
    H2 = disc.B2u.T @ P @ disc.B2w + disc.D2u.T @ disc.D2w
    H3 = gamma ** 2 * np.eye(disc.n_w) - disc.D2w.T @ disc.D2w \
        - disc.B2w.T @ P @ disc.B2w
    h3_eigs = np.linalg.eigvalsh(0.5 * (H3 + H3.T))
    if h3_eigs.min() <= 0.0:
        raise GammaInfeasible("H3", f"min eigenvalue {h3_eigs.min():.3e}")
    H4 = disc.B2w.T @ P @ disc.A2 + disc.D2w.T @ disc.C2
    H1 = disc.B2u.T @ P @ disc.B2u + disc.D2u.T @ disc.D2u \
        + H2 @ np.linalg.solve(H3, H2.T)
    h1_eigs = np.linalg.eigvalsh(0.5 * (H1 + H1.T))
    if h1_eigs.min() <= 0.0:
        raise GammaInfeasible("H1", f"min eigenvalue {h1_eigs.min():.3e}")
    rhs = disc.B2u.T @ P @ disc.A2 + disc.D2u.T @ disc.C2 \
        + H2 @ np.linalg.solve(H3, H4)
    F_formula = np.linalg.solve(0.5 * (H1 + H1.T), rhs)

    norm, why = _certify(disc, -F_formula, gamma)
    if norm is not None:
        return HinfResult(F=-F_formula, P=P, gamma=gamma, norm=norm)
    norm_alt, _ = _certify(disc, F_formula, gamma)
    if norm_alt is not None:
        log.warning("attenuation design certified with the opposite "
                    "feedback sign; check the model conventions")
        return HinfResult(F=F_formula, P=P, gamma=gamma, norm=norm_alt)
    raise GammaInfeasible(why)


def gamma_min(disc: DiscretizedSystem, tol=1e-3):
    """Smallest certifiable attenuation level by bisection.

    Starts from twice the closed-loop norm of the cost-based design and
    doubles until feasible; bisects down against the largest known
    infeasible level until the bracket ratio falls below 1 + tol.  Returns
    the last certified design.
    """
    tol = float(tol)
    if tol <= 0:
        raise ValueError("tol must be positive")
    try:
        lqr = lqr_design(disc)
        base = hinf_norm(disc.A2 + disc.B2u @ lqr.F, disc.B2w,
                         disc.C2 + disc.D2u @ lqr.F, disc.D2w)
    except (NotStabilizable, IndefiniteCost):
        base = hinf_norm(disc.A2, disc.B2w, disc.C2, disc.D2w)
    hi = max(2.0 * base, 1e-12)
    best = None
    for _ in range(60):
        try:
            best = hinf_design(disc, hi)
            break
        except GammaInfeasible:
            hi *= 2.0
    if best is None:
        raise NoFeasibleGamma(
            "no feasible attenuation level within 60 doublings")
    lo = 0.0
    floor = 1e-12 * hi
    for _ in range(200):
        if (lo > 0.0 and hi / lo <= 1.0 + tol) or hi <= floor:
            break
        mid = 0.5 * (lo + hi)
        try:
            best = hinf_design(disc, mid)
            hi = mid
        except GammaInfeasible:
            lo = mid
    return hi, best
