"""Static allocation solvers: power-optimal thrusts and hover equilibria.

Both solve the separable convex program

    minimize  sum_i c * T_i**1.5   s.t.  A(alpha) T = w,  0 <= T <= T_max

by different routes so that each can serve as the other's oracle:
``power_optimal_allocation`` runs a barrier Newton method in null-space
coordinates, ``hover_solution`` runs Newton on the Lagrange dual.
"""
import math

import numpy as np
from scipy.optimize import linprog

from tiltrl.dynamics import (
    N_ROTORS,
    InfeasibleError,
    Wrench,
    build_allocation_matrix,
    total_power,
)

RANK_TOL = 1e-10


def _as_wrench_array(w):
    return w.as_array() if isinstance(w, Wrench) else np.asarray(w, dtype=float)


def null_space(A, tol=RANK_TOL):
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > tol * s[0])) if s.size else 0
    return Vt[rank:].T


def left_null_space(A, tol=RANK_TOL):
    U, s, _ = np.linalg.svd(A)
    rank = int(np.sum(s > tol * s[0])) if s.size else 0
    return U[:, rank:]


def _max_slack_point(A, w, tmax):
    """LP: feasible T maximizing the distance t to the box faces."""
    n = A.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.vstack([np.hstack([-np.eye(n), np.ones((n, 1))]),
                      np.hstack([np.eye(n), np.ones((n, 1))])])
    b_ub = np.concatenate([np.zeros(n), np.full(n, tmax)])
    A_eq = np.hstack([A, np.zeros((A.shape[0], 1))])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=w,
                  bounds=[(0.0, tmax)] * n + [(0.0, 0.5 * tmax)], method="highs")
    if res.status != 0:
        return None, -1.0
    return res.x[:n], res.x[n]


def _coordinate_range(A, w, tmax, i):
    n = A.shape[1]
    lo_hi = []
    for sign in (1.0, -1.0):
        c = np.zeros(n)
        c[i] = sign
        res = linprog(c, A_eq=A, b_eq=w, bounds=[(0.0, tmax)] * n, method="highs")
        if res.status != 0:
            raise InfeasibleError("wrench is not reachable within thrust limits")
        lo_hi.append(res.x[i])
    return lo_hi[0], lo_hi[1]


def _barrier_newton(A, w, T0, c, tmax, mu0=1.0, mu_min=1e-11):
    """Minimize the barrier-augmented power over T0 + N z.

    ``mu_min`` keeps active bounds a few ulps away from the box face, where
    the barrier terms would otherwise overflow in double precision.
    """
    N = null_space(A)
    if N.shape[1] == 0:
        return T0
    z = np.zeros(N.shape[1])
    mu = mu0
    while True:
        for _ in range(100):
            T = T0 + N @ z
            up = tmax - T
            g_T = 1.5 * c * np.sqrt(T) - mu / T + mu / up
            h_T = 0.75 * c / np.sqrt(T) + mu / T ** 2 + mu / up ** 2
            g = N.T @ g_T
            H = N.T @ (h_T[:, None] * N)
            dz = -np.linalg.solve(H, g)
            decrement = -g @ dz
            if not decrement > 1e-20:
                break
            dT = N @ dz
            # largest step keeping the iterate strictly inside the box
            s = 1.0
            neg, pos = dT < 0, dT > 0
            if np.any(neg):
                s = min(s, 0.99 * np.min(-T[neg] / dT[neg]))
            if np.any(pos):
                s = min(s, 0.99 * np.min(up[pos] / dT[pos]))
            phi = _barrier_value(T, c, tmax, mu)
            while s > 1e-16:
                if _barrier_value(T + s * dT, c, tmax, mu) <= phi - 0.25 * s * decrement:
                    break
                s *= 0.5
            z = z + s * dz
        if mu <= mu_min:
            return T0 + N @ z
        mu *= 0.1


def _barrier_value(T, c, tmax, mu):
    return float(np.sum(c * T * np.sqrt(T)) - mu * np.sum(np.log(T) + np.log(tmax - T)))


def power_optimal_allocation(w, alpha, params):
    """Thrust vector of least total induced power producing wrench ``w``.

    Raises ``InfeasibleError`` if ``w`` cannot be produced within
    ``[0, thrust_max]`` per rotor.
    """
    A = build_allocation_matrix(params, alpha)
    w = _as_wrench_array(w)
    tmax = params.thrust_max
    c = params.power_coeff

    T0, slack = _max_slack_point(A, w, tmax)
    if T0 is None:
        raise InfeasibleError("wrench is not reachable within thrust limits")
    T = np.zeros(N_ROTORS)
    free = np.ones(N_ROTORS, dtype=bool)
    if slack < 1e-9:
        # some rotors are pinned to a box face in every feasible point
        for i in range(N_ROTORS):
            lo, hi = _coordinate_range(A, w, tmax, i)
            if hi - lo < 1e-9:
                T[i] = 0.0 if lo < 0.5 * tmax else tmax
                free[i] = False
        if not np.any(free):
            return T
        Af = A[:, free]
        wf = w - A[:, ~free] @ T[~free]
        T0, slack = _max_slack_point(Af, wf, tmax)
        if T0 is None or slack < 1e-12:
            raise InfeasibleError("wrench only reachable on a degenerate face")
    else:
        Af, wf = A, w
    # LP solutions carry solver tolerance; pull back onto A T = w exactly
    T0 = T0 + np.linalg.lstsq(Af, wf - Af @ T0, rcond=None)[0]
    T[free] = _barrier_newton(Af, wf, T0, c, tmax)
    return T


def _dual_allocation(A, w, c, tmax, max_iter=200, tol=1e-13):
    """Newton ascent on the Lagrange dual of the separable power program."""
    k = 1.5 * c
    T_guess = np.clip(np.linalg.lstsq(A, w, rcond=None)[0], 0.1 * tmax, 0.9 * tmax)
    lam = np.linalg.lstsq(A.T, k * np.sqrt(T_guess), rcond=None)[0]

    def primal(lam):
        a = A.T @ lam
        T = np.where(a > 0, (a / k) ** 2, 0.0)
        return a, np.minimum(T, tmax)

    def dual_value(lam):
        a, T = primal(lam)
        return float(np.sum(c * T * np.sqrt(T) - a * T) + lam @ w)

    scale = 1.0 + np.linalg.norm(w)
    damping = 1e-6
    eye = np.eye(A.shape[0])
    for _ in range(max_iter):
        a, T = primal(lam)
        r = w - A @ T
        if np.linalg.norm(r) < tol * scale:
            return T
        d = np.where((a > 0) & (T < tmax), 2.0 * a / k ** 2, 0.0)
        H = A @ (d[:, None] * A.T)
        g0 = dual_value(lam)
        # Levenberg-Marquardt damping: full Newton steps can overshoot into
        # the region where every rotor is off and the curvature vanishes
        while damping < 1e12:
            step = np.linalg.solve(H + damping * eye, r)
            if dual_value(lam + step) >= g0 + 1e-4 * (r @ step):
                damping = max(0.1 * damping, 1e-12)
                break
            damping *= 10.0
        else:
            break
        lam = lam + step
    # near the optimum the dual is flat below round-off and the ascent test
    # can stall; finish with Newton steps on the residual while it decreases
    for _ in range(50):
        a, T = primal(lam)
        r = w - A @ T
        if np.linalg.norm(r) < 1e-9 * scale:
            return T
        d = np.where((a > 0) & (T < tmax), 2.0 * a / k ** 2, 0.0)
        step = np.linalg.solve(A @ (d[:, None] * A.T) + 1e-12 * eye, r)
        if np.linalg.norm(w - A @ primal(lam + step)[1]) >= np.linalg.norm(r):
            break
        lam = lam + step
    a, T = primal(lam)
    if np.linalg.norm(w - A @ T) < 1e-9 * scale:
        return T
    raise InfeasibleError("dual iteration did not reach the wrench")


def gravity_wrench(params, theta):
    """Body wrench balancing gravity at nose-up pitch ``theta`` (zero roll)."""
    mg = params.mass * params.gravity
    return np.array([mg * math.sin(theta), mg * math.cos(theta), 0.0, 0.0, 0.0])


def hover_solution(params, alpha):
    """Equilibrium pitch and least-power thrusts for a fixed tilt angle.

    Returns ``(T, theta)`` with ``theta`` the nose-up pitch angle at which
    the platform hovers with zero roll and zero net moment.
    """
    A = build_allocation_matrix(params, alpha)
    c, tmax = params.power_coeff, params.thrust_max
    normals = left_null_space(A)
    if normals.shape[1] != 1:
        raise InfeasibleError("expected a single force/pitch coupling direction in A(alpha)")
    # the gravity wrench must be orthogonal to the left null vector
    n = normals[:, 0]
    base = math.atan2(-n[1], n[0])
    candidates = [base, base + math.pi]

    best = None
    for theta in candidates:
        theta = math.atan2(math.sin(theta), math.cos(theta))
        w = gravity_wrench(params, theta)
        if _max_slack_point(A, w, tmax)[0] is None:
            continue
        try:
            T = _dual_allocation(A, w, c, tmax)
        except InfeasibleError:
            continue
        P = total_power(T, params)
        if best is None or P < best[2]:
            best = (T, theta, P)
    if best is None:
        raise InfeasibleError(f"no hover equilibrium at alpha={alpha:.4g} rad")
    return best[0], best[1]
