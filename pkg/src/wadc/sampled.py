"""Exact discretization of a linear system and quadratic cost under a
zero-order-hold input with a constant delay d = q*h + r.

The control input is held over sampling intervals, ``u(t) = u_k`` for
``t in (kh, kh+h]``, and acts on the plant delayed by d seconds.  Over one
sampling interval the delayed input is piecewise constant with a single
switch at ``kh + r``, so both the state propagation and the running
quadratic cost have closed forms built from the matrix exponential.  The
lifted discrete state stacks the plant state with the q+1 input samples
still "in flight".
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.linalg import expm, solve_sylvester

from .errors import IllPosedLyapunov, InvalidSampling

__all__ = [
    "CtsSystem",
    "CtsCost",
    "PMU",
    "DiscretizedSystem",
    "phi_gamma",
    "solve_pmu",
    "psi_blocks",
    "split_delay",
    "discretize",
    "quadrature_cost_oracle",
]


def _as_matrix(a, rows=None, cols=None, name="matrix"):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and a.shape[0] != rows:
        raise ValueError(f"{name}: expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"{name}: expected {cols} cols, got {a.shape[1]}")
    return a


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True)
class CtsSystem:
    """Continuous-time plant with a delayed held control input."""

    A1: np.ndarray
    B1u: np.ndarray
    B1w: np.ndarray
    C1: np.ndarray
    D1u: np.ndarray
    D1w: np.ndarray

    def __post_init__(self):
        A1 = _as_matrix(self.A1, name="A1")
        n = A1.shape[0]
        if A1.shape[1] != n:
            raise ValueError("A1 must be square")
        B1u = _as_matrix(self.B1u, rows=n, name="B1u")
        B1w = _as_matrix(self.B1w, rows=n, name="B1w")
        C1 = _as_matrix(self.C1, cols=n, name="C1")
        D1u = _as_matrix(self.D1u, rows=C1.shape[0], cols=B1u.shape[1], name="D1u")
        D1w = _as_matrix(self.D1w, rows=C1.shape[0], cols=B1w.shape[1], name="D1w")
        for nm, val in (("A1", A1), ("B1u", B1u), ("B1w", B1w),
                        ("C1", C1), ("D1u", D1u), ("D1w", D1w)):
            object.__setattr__(self, nm, val)
        _freeze(A1, B1u, B1w, C1, D1u, D1w)

    @property
    def n_x(self):
        return self.A1.shape[0]

    @property
    def n_u(self):
        return self.B1u.shape[1]

    @property
    def n_w(self):
        return self.B1w.shape[1]

    @property
    def n_y(self):
        return self.C1.shape[0]


@dataclass(frozen=True)
class CtsCost:
    """Quadratic running cost on state and (delayed) input."""

    Q1: np.ndarray
    N1: np.ndarray
    R1: np.ndarray

    def __post_init__(self):
        Q1 = _as_matrix(self.Q1, name="Q1")
        n = Q1.shape[0]
        N1 = _as_matrix(self.N1, rows=n, name="N1")
        R1 = _as_matrix(self.R1, rows=N1.shape[1], cols=N1.shape[1], name="R1")
        if not np.allclose(Q1, Q1.T, rtol=0, atol=1e-12 * (1 + np.abs(Q1).max())):
            raise ValueError("Q1 must be symmetric")
        if not np.allclose(R1, R1.T, rtol=0, atol=1e-12 * (1 + np.abs(R1).max())):
            raise ValueError("R1 must be symmetric")
        Q1 = 0.5 * (Q1 + Q1.T)
        R1 = 0.5 * (R1 + R1.T)
        object.__setattr__(self, "Q1", Q1)
        object.__setattr__(self, "N1", N1)
        object.__setattr__(self, "R1", R1)
        _freeze(Q1, N1, R1)

    def stacked(self):
        return np.block([[self.Q1, self.N1], [self.N1.T, self.R1]])


@dataclass(frozen=True)
class PMU:
    """Factorization (P, M, U) of the running cost against the dynamics.

    P solves P A1 + A1' P = Q1, M = A1^{-T} (N1 - P B1u) and
    U = R1 - B1u' M - M' B1u, which turns the cost integral over an interval
    with held input into boundary terms plus b * u' U u.
    """

    P: np.ndarray
    M: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        _freeze(self.P, self.M, self.U)


@dataclass(frozen=True)
class DiscretizedSystem:
    """Lifted discrete-time system, output map and summed quadratic cost.

    The lifted state is ``z_k = [x_k; u_{k-q-1}; u_{k-q}; ...; u_{k-1}]``
    (just ``x_k`` when d = 0).  One step advances the plant state with the
    two in-flight input samples and shifts the memory registers by one slot.
    """

    A2: np.ndarray
    B2u: np.ndarray
    B2w: np.ndarray
    C2: np.ndarray
    D2u: np.ndarray
    D2w: np.ndarray
    Q2: np.ndarray
    N2: np.ndarray
    R2: np.ndarray
    h: float
    d: float
    q: int
    r: float
    n_x: int
    n_u: int
    n_w: int

    def __post_init__(self):
        _freeze(self.A2, self.B2u, self.B2w, self.C2, self.D2u, self.D2w,
                self.Q2, self.N2, self.R2)

    @property
    def n_z(self):
        return self.A2.shape[0]

    @property
    def n_memory(self):
        """Number of stored past-input samples (q+1 for d > 0, else 0)."""
        return 0 if self.d == 0.0 else self.q + 1

    def lift_state(self, x0, u_history=None):
        """Assemble z_0 from a plant state and an optional input history.

        ``u_history`` lists the stored samples oldest first
        (u_{-q-1}, ..., u_{-1}); missing entries default to zero.
        """
        x0 = np.asarray(x0, dtype=float).reshape(self.n_x)
        mem = np.zeros(self.n_memory * self.n_u)
        if u_history is not None:
            hist = [np.asarray(u, dtype=float).reshape(self.n_u) for u in u_history]
            if len(hist) != self.n_memory:
                raise ValueError(
                    f"expected {self.n_memory} history entries, got {len(hist)}")
            if hist:
                mem = np.concatenate(hist)
        return np.concatenate([x0, mem])

    def cost_of_sequence(self, z0, u_seq):
        """Accumulate the summed cost (and final state) along an input sequence."""
        z = np.asarray(z0, dtype=float).copy()
        total = 0.0
        for u in u_seq:
            u = np.asarray(u, dtype=float).reshape(self.n_u)
            total += (z @ self.Q2 @ z + 2.0 * (z @ self.N2 @ u)
                      + u @ self.R2 @ u)
            z = self.A2 @ z + self.B2u @ u
        return total, z


def phi_gamma(A1, alpha):
    """Return Phi = exp(alpha*A1) and Gamma = int_0^alpha exp(A1 s) ds.

    Both come from one exponential of the augmented block matrix
    [[A1, I], [0, 0]], so Phi = I + A1 @ Gamma holds to machine precision.
    """
    A1 = _as_matrix(A1, name="A1")
    n = A1.shape[0]
    if A1.shape[1] != n:
        raise ValueError("A1 must be square")
    alpha = float(alpha)
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if alpha == 0.0:
        return np.eye(n), np.zeros((n, n))
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = A1
    aug[:n, n:] = np.eye(n)
    E = expm(alpha * aug)
    return E[:n, :n], E[:n, n:]


def solve_pmu(sys: CtsSystem, cost: CtsCost) -> PMU:
    """Factor the running cost into (P, M, U) against the plant dynamics.

    Requires A1 invertible with no eigenvalue pair summing to zero; in this
    package A1 is always a locally pre-stabilized (Hurwitz) matrix, which
    satisfies both conditions automatically.
    """
    A1, B1u = sys.A1, sys.B1u
    eig = np.linalg.eigvals(A1)
    scale = max(1.0, np.abs(eig).max())
    pair_sums = np.abs(eig[:, None] + eig[None, :])
    if pair_sums.min() < 1e-12 * scale:
        raise IllPosedLyapunov(
            "A1 has an eigenvalue pair summing to zero; "
            "pre-stabilize with local gains before discretizing")
    if np.abs(eig).min() < 1e-12 * scale:
        raise IllPosedLyapunov("A1 is singular")
    P = solve_sylvester(A1.T, A1, cost.Q1)
    P = 0.5 * (P + P.T)
    # iterative refinement; solve_sylvester alone can leave ~1e-9 residuals
    # on poorly separated spectra
    for _ in range(3):
        res = cost.Q1 - (P @ A1 + A1.T @ P)
        if np.abs(res).max() <= 1e-14 * (1 + np.abs(cost.Q1).max()):
            break
        dP = solve_sylvester(A1.T, A1, res)
        P = 0.5 * ((P + dP) + (P + dP).T)
    M = np.linalg.solve(A1.T, cost.N1 - P @ B1u)
    res = cost.N1 - (A1.T @ M + P @ B1u)
    M = M + np.linalg.solve(A1.T, res)
    U = cost.R1 - B1u.T @ M - M.T @ B1u
    U = 0.5 * (U + U.T)
    return PMU(P=P, M=M, U=U)


def psi_blocks(pmu: PMU, sys: CtsSystem, b) -> np.ndarray:
    """Quadratic form Psi(b) giving the cost integral over a length-b interval
    with held input: integral = [x(a); u]' Psi(b) [x(a); u]."""
    b = float(b)
    if b < 0:
        raise ValueError("interval length must be nonnegative")
    P, M, U = pmu.P, pmu.M, pmu.U
    B1u = sys.B1u
    Phi, Gamma = phi_gamma(sys.A1, b)
    GB = Gamma @ B1u
    psi1 = Phi.T @ P @ Phi - P
    psi3 = Phi.T @ P @ GB + Phi.T @ M - M
    psi2 = GB.T @ P @ GB + M.T @ GB + GB.T @ M + b * U
    psi = np.block([[psi1, psi3], [psi3.T, psi2]])
    return 0.5 * (psi + psi.T)


def _nice_fraction(x, rel_tol=1e-9):
    """Snap a float to the fraction its shortest decimal form denotes.

    Sampling periods and delays are specified as short decimals; arithmetic
    like 5*0.02 must still classify d = 0.1 as an exact multiple of h.
    """
    x = float(x)
    f = Fraction(x).limit_denominator(10 ** 6)
    if abs(float(f) - x) <= rel_tol * abs(x):
        return f
    return Fraction(x)


def split_delay(d, h):
    """Split d = q*h + r with q = max{k integer: k*h < d} and r in (0, h].

    For d = 0 returns (0, 0.0).  Performed in exact rational arithmetic on
    the shortest-decimal reading of d and h so that grid multiples land on
    r = h exactly.
    """
    if h <= 0:
        raise InvalidSampling(f"sampling period must be positive, got {h}")
    if d < 0:
        raise InvalidSampling(f"delay must be nonnegative, got {d}")
    if d == 0:
        return 0, 0.0
    D, H = _nice_fraction(d), _nice_fraction(h)
    ratio = D / H
    if ratio.denominator == 1:
        q = int(ratio) - 1
        r = float(H)
    else:
        q = int(ratio)  # floor; ratio > 0
        r = float(D - q * H)
    return q, r


def discretize(sys: CtsSystem, cost: CtsCost, h, d=0.0) -> DiscretizedSystem:
    """Discretize plant, output and cost exactly under sampling period h and
    input delay d.

    With d > 0 the lifted state carries the q+1 input samples in flight; the
    per-interval cost is assembled by applying the held-input cost identity
    on (kh, kh+r] with input u_{k-q-1} and on (kh+r, kh+h] with input
    u_{k-q}.  The disturbance is held and undelayed, and the sampled output
    uses the input sample active just after the sampling instant,
    u_{k-q-1}, which for d > 0 sits inside z_k (so D2u = 0 there).
    """
    h = float(h)
    if h <= 0:
        raise InvalidSampling(f"sampling period must be positive, got {h}")
    q, r = split_delay(d, h)
    pmu = solve_pmu(sys, cost)
    n_x, n_u, n_w, n_y = sys.n_x, sys.n_u, sys.n_w, sys.n_y
    Phi_h, Gamma_h = phi_gamma(sys.A1, h)

    if d == 0:
        psi = psi_blocks(pmu, sys, h)
        return DiscretizedSystem(
            A2=Phi_h,
            B2u=Gamma_h @ sys.B1u,
            B2w=Gamma_h @ sys.B1w,
            C2=sys.C1.copy(),
            D2u=sys.D1u.copy(),
            D2w=sys.D1w.copy(),
            Q2=psi[:n_x, :n_x].copy(),
            N2=psi[:n_x, n_x:].copy(),
            R2=psi[n_x:, n_x:].copy(),
            h=h, d=0.0, q=0, r=0.0, n_x=n_x, n_u=n_u, n_w=n_w)

    n_mem = q + 1
    n_z = n_x + n_mem * n_u
    Phi_r, Gamma_r = phi_gamma(sys.A1, r)
    Phi_hr, Gamma_hr = phi_gamma(sys.A1, h - r)
    Gamma1 = Phi_hr @ Gamma_r @ sys.B1u   # multiplies u_{k-q-1}
    Gamma0 = Gamma_hr @ sys.B1u           # multiplies u_{k-q}

    A2 = np.zeros((n_z, n_z))
    A2[:n_x, :n_x] = Phi_h
    A2[:n_x, n_x:n_x + n_u] = Gamma1
    B2u = np.zeros((n_z, n_u))
    if q == 0:
        B2u[:n_x] = Gamma0
        B2u[n_x:] = np.eye(n_u)
    else:
        A2[:n_x, n_x + n_u:n_x + 2 * n_u] = Gamma0
        # shift the memory registers one slot toward the plant
        for j in range(q):
            A2[n_x + j * n_u:n_x + (j + 1) * n_u,
               n_x + (j + 1) * n_u:n_x + (j + 2) * n_u] = np.eye(n_u)
        B2u[n_x + q * n_u:] = np.eye(n_u)

    B2w = np.zeros((n_z, n_w))
    B2w[:n_x] = Gamma_h @ sys.B1w

    C2 = np.zeros((n_y, n_z))
    C2[:, :n_x] = sys.C1
    C2[:, n_x:n_x + n_u] = sys.D1u  # sampled output sees u_{k-q-1}
    D2u = np.zeros((n_y, n_u))
    D2w = sys.D1w.copy()

    # cost over one interval touches x_k, u_{k-q-1} and u_{k-q} only
    psi_r = psi_blocks(pmu, sys, r)
    psi_hr = psi_blocks(pmu, sys, h - r)
    phi1 = np.zeros((n_x + n_u, n_x + 2 * n_u))
    phi1[:n_x, :n_x] = Phi_r
    phi1[:n_x, n_x:n_x + n_u] = Gamma_r @ sys.B1u
    phi1[n_x:, n_x + n_u:] = np.eye(n_u)
    W = np.zeros((n_x + 2 * n_u, n_x + 2 * n_u))
    W[:n_x + n_u, :n_x + n_u] = psi_r
    W += phi1.T @ psi_hr @ phi1
    W = 0.5 * (W + W.T)

    big = np.zeros((n_z + n_u, n_z + n_u))
    big[:n_x + 2 * n_u, :n_x + 2 * n_u] = W
    Q2 = big[:n_z, :n_z].copy()
    N2 = big[:n_z, n_z:].copy()
    R2 = big[n_z:, n_z:].copy()

    return DiscretizedSystem(
        A2=A2, B2u=B2u, B2w=B2w, C2=C2, D2u=D2u, D2w=D2w,
        Q2=Q2, N2=N2, R2=R2,
        h=h, d=float(d), q=q, r=r, n_x=n_x, n_u=n_u, n_w=n_w)


def _delayed_input_index(k, q, d, segment):
    """Sample index feeding the plant during segment 0 ((kh, kh+r]) or
    segment 1 ((kh+r, kh+h]) of interval k."""
    if d == 0:
        return k
    return k - q - 1 if segment == 0 else k - q


def quadrature_cost_oracle(sys: CtsSystem, cost: CtsCost, h, d, u_seq, x0,
                           n_steps, substeps_per_h=1000):
    """Independent evaluation of the continuous running cost.

    Steps the exact trajectory with cached per-substep matrix exponentials
    and integrates the cost integrand with composite Simpson quadrature; no
    use of the assembled discrete cost blocks.  The input history before
    t = 0 is zero and w = 0 throughout (the cost is defined for zero
    disturbance).
    """
    h = float(h)
    if h <= 0:
        raise InvalidSampling(f"sampling period must be positive, got {h}")
    q, r = split_delay(d, h)
    x0 = np.asarray(x0, dtype=float).reshape(sys.n_x)
    u_seq = [np.asarray(u, dtype=float).reshape(sys.n_u) for u in u_seq]
    if len(u_seq) < n_steps:
        raise ValueError("input sequence shorter than the horizon")

    segments = [(r, 0), (h - r, 1)] if d > 0 else [(h, 1)]
    stack = np.block([[cost.Q1, cost.N1], [cost.N1.T, cost.R1]])

    prop_cache = {}

    def propagators(length, n_sub):
        key = (length, n_sub)
        if key not in prop_cache:
            dt = length / n_sub
            aug = np.zeros((2 * sys.n_x, 2 * sys.n_x))
            aug[:sys.n_x, :sys.n_x] = sys.A1
            aug[:sys.n_x, sys.n_x:] = np.eye(sys.n_x)
            E = expm(dt * aug)
            prop_cache[key] = (E[:sys.n_x, :sys.n_x],
                               E[:sys.n_x, sys.n_x:] @ sys.B1u, dt)
        return prop_cache[key]

    def u_at(idx):
        if 0 <= idx < len(u_seq):
            return u_seq[idx]
        return np.zeros(sys.n_u)

    x = x0.copy()
    total = 0.0
    for k in range(n_steps):
        for length, seg in segments:
            if length == 0.0:
                continue
            u = u_at(_delayed_input_index(k, q, d, seg))
            n_sub = max(2, int(np.ceil(substeps_per_h * length / h)))
            if n_sub % 2:
                n_sub += 1
            Phi_s, GammaB_s, dt = propagators(length, n_sub)
            xs = np.empty((n_sub + 1, sys.n_x))
            xs[0] = x
            for j in range(n_sub):
                xs[j + 1] = Phi_s @ xs[j] + GammaB_s @ u
            zu = np.hstack([xs, np.tile(u, (n_sub + 1, 1))])
            vals = np.einsum("ij,jk,ik->i", zu, stack, zu)
            # composite Simpson on the even number of panels
            total += dt / 3.0 * (vals[0] + vals[-1]
                                 + 4.0 * vals[1:-1:2].sum()
                                 + 2.0 * vals[2:-1:2].sum())
            x = xs[-1]
    return total
