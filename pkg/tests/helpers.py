"""Shared generators and independent oracles for the test suite."""

import numpy as np

from wadc.sampled import CtsCost, CtsSystem, split_delay


def random_stable_system(rng, n_x, n_u, n_w=1, n_y=None):
    """Random Hurwitz system with eigenvalues in [-2, -0.1]."""
    if n_y is None:
        n_y = n_x
    lam = -rng.uniform(0.1, 2.0, n_x)
    V = rng.normal(size=(n_x, n_x))
    while abs(np.linalg.det(V)) < 1e-3:
        V = rng.normal(size=(n_x, n_x))
    A = V @ np.diag(lam) @ np.linalg.inv(V)
    return CtsSystem(
        A1=A,
        B1u=rng.normal(size=(n_x, n_u)),
        B1w=rng.normal(size=(n_x, n_w)),
        C1=rng.normal(size=(n_y, n_x)),
        D1u=rng.normal(size=(n_y, n_u)),
        D1w=rng.normal(size=(n_y, n_w)),
    )


def random_psd_cost(rng, n_x, n_u, cross=True):
    L = rng.normal(size=(n_x + n_u, n_x + n_u))
    S = L @ L.T + 1e-3 * np.eye(n_x + n_u)
    if not cross:
        S[:n_x, n_x:] = 0.0
        S[n_x:, :n_x] = 0.0
    return CtsCost(Q1=S[:n_x, :n_x], N1=S[:n_x, n_x:], R1=S[n_x:, n_x:])


def rk4_segment(A, Bu, u, x0, length, n_sub):
    """Plain RK4 over one held-input segment; independent of the library."""
    x = np.asarray(x0, dtype=float).copy()
    dt = length / n_sub
    c = Bu @ u
    for _ in range(n_sub):
        k1 = A @ x + c
        k2 = A @ (x + 0.5 * dt * k1) + c
        k3 = A @ (x + 0.5 * dt * k2) + c
        k4 = A @ (x + dt * k3) + c
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def rk4_delayed_zoh(sys, h, d, u_seq, x0, n_steps, subs=60, w_seq=None):
    """Fine-RK4 trace of x(kh) under the delayed held input.

    Within interval k the delayed input equals u_{k-q-1} on (kh, kh+r] and
    u_{k-q} on (kh+r, kh+h]; samples with negative index are zero.  The
    disturbance, if any, is held undelayed.
    """
    q, r = split_delay(d, h)

    def u_at(idx):
        if 0 <= idx < len(u_seq):
            return np.asarray(u_seq[idx], dtype=float)
        return np.zeros(sys.n_u)

    xs = [np.asarray(x0, dtype=float).copy()]
    x = xs[0]
    for k in range(n_steps):
        segs = [(r, k - q - 1), (h - r, k - q)] if d > 0 else [(h, k)]
        for length, idx in segs:
            if length == 0.0:
                continue
            x = rk4_segment(sys.A1, sys.B1u, u_at(idx), x, length, subs)
            if w_seq is not None:
                wk = (np.asarray(w_seq[k], dtype=float)
                      if 0 <= k < len(w_seq) else np.zeros(sys.n_w))
                # superpose the (undelayed, held) disturbance response
                x = x + rk4_segment(sys.A1, sys.B1w, wk,
                                    np.zeros(sys.n_x), length, subs)
        xs.append(x)
    return np.array(xs)


def closed_loop_cost(disc, F, z0, tol=1e-12, max_steps=2_000_000):
    """Accumulate the summed quadratic cost under u = F z until increments
    die out; independent of the Riccati machinery."""
    z = np.asarray(z0, dtype=float).copy()
    A_cl = disc.A2 + disc.B2u @ F
    if np.abs(np.linalg.eigvals(A_cl)).max() >= 1.0:
        return np.inf
    total = 0.0
    for _ in range(max_steps):
        u = F @ z
        inc = z @ disc.Q2 @ z + 2 * z @ disc.N2 @ u + u @ disc.R2 @ u
        total += inc
        z = A_cl @ z
        if abs(inc) < tol * max(total, 1e-300) and abs(inc) < 1e-12:
            break
    return total
