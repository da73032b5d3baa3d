"""Independent reference computations used by the tests.

None of these share code with the package beyond the ``[a, b, x, y]`` table
layout, so agreement is a genuine cross-check.
"""
import itertools

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog


def _ns_constraint_system():
    """Equalities (normalization + no-signaling) on the 16 flat probabilities."""
    rows, rhs = [], []
    idx = lambda a, b, x, y: a * 8 + b * 4 + x * 2 + y
    for x, y in itertools.product((0, 1), repeat=2):
        r = np.zeros(16)
        for a, b in itertools.product((0, 1), repeat=2):
            r[idx(a, b, x, y)] = 1
        rows.append(r)
        rhs.append(1.0)
    # Alice's marginal independent of y, Bob's independent of x
    for x in (0, 1):
        r = np.zeros(16)
        for b in (0, 1):
            r[idx(1, b, x, 0)] += 1
            r[idx(1, b, x, 1)] -= 1
        rows.append(r)
        rhs.append(0.0)
    for y in (0, 1):
        r = np.zeros(16)
        for a in (0, 1):
            r[idx(a, 1, 0, y)] += 1
            r[idx(a, 1, 1, y)] -= 1
        rows.append(r)
        rhs.append(0.0)
    return np.array(rows), np.array(rhs)


def ns_vertices_bruteforce(tol=1e-9):
    """Enumerate extreme points of {p >= 0, normalization, no-signaling}.

    A vertex is a feasible point where the tight positivity constraints
    together with the 8 equalities have rank 16. The equality system has
    rank 8, so every vertex has at least 8 zero coordinates: try all
    8-subsets of coordinates set to zero.
    """
    E, e = _ns_constraint_system()
    found = []
    for zeros in itertools.combinations(range(16), 8):
        Z = np.zeros((8, 16))
        Z[np.arange(8), zeros] = 1
        M = np.vstack([E, Z])
        if np.linalg.matrix_rank(M) < 16:
            continue
        p = np.linalg.lstsq(M, np.r_[e, np.zeros(8)], rcond=None)[0]
        if np.max(np.abs(M @ p - np.r_[e, np.zeros(8)])) > tol or p.min() < -tol:
            continue
        p = np.where(np.abs(p) < tol, 0.0, p)
        if not any(np.allclose(p, v, atol=1e-9) for v in found):
            found.append(p)
    return np.array(found)


def in_convex_hull(point, vertices):
    """LP feasibility: is ``point`` a convex combination of the rows of ``vertices``?"""
    V = np.asarray(vertices)
    k = len(V)
    A_eq = np.vstack([V.T, np.ones((1, k))])
    b_eq = np.r_[point, 1.0]
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return res.status == 0


def min_kl_to_hull(p_flat, vertex_rows, q_xy=None, polish=20000):
    """``min_w KL(P || sum_k w_k D_k)`` over the simplex, as a trial-level KL.

    ``P`` and ``D_k`` are joint distributions ``q(xy) p(ab|xy)``. Solved with
    cvxpy, then refined by multiplicative EM updates on the weights (each
    step is monotone for this objective), and finally evaluated directly in
    numpy since conic solvers lose relative accuracy when the optimum is tiny.
    """
    q = np.full(4, 0.25) if q_xy is None else np.asarray(q_xy, dtype=float).ravel()
    qfull = np.tile(q, 4)
    P = np.asarray(p_flat) * qfull
    D = np.asarray(vertex_rows) * qfull
    used = P > 0
    w = cp.Variable(len(D), nonneg=True)
    mix = D[:, used].T @ w
    obj = cp.Minimize(-P[used] @ cp.log(mix))
    cp.Problem(obj, [cp.sum(w) == 1]).solve()
    weights = np.clip(np.asarray(w.value, dtype=float), 0, None) if w.value is not None else np.full(len(D), 1 / len(D))
    weights = weights / weights.sum()
    # keep every vertex alive so EM can move mass anywhere
    weights = 0.999 * weights + 0.001 / len(D)
    Du = D[:, used]
    Pu = P[used]
    for _ in range(polish):
        m = weights @ Du
        weights = weights * (Du @ (Pu / m))
        weights /= weights.sum()
    m = weights @ Du
    kl = float(np.sum(Pu * np.log(Pu / m)))
    return max(kl, 0.0), weights


def density_matrix_behavior(r, anglesA, anglesB, etaA=1.0, etaB=1.0):
    """``p(ab|xy)`` from a 4x4 density matrix and lossy projective POVMs.

    Basis order ``|HH>, |HV>, |VH>, |VV>``; the state is
    ``(|HV> + r |VH>) / sqrt(1 + r^2)``. Outcome 1 is the POVM element
    ``eta |t><t|`` with ``|t> = cos t |H> + sin t |V>``.
    """
    psi = np.array([0.0, 1.0, r, 0.0]) / np.sqrt(1 + r * r)
    rho = np.outer(psi, psi.conj())
    I2 = np.eye(2)

    def povm(theta_deg, eta):
        t = np.radians(theta_deg)
        v = np.array([np.cos(t), np.sin(t)])
        click = eta * np.outer(v, v)
        return [I2 - click, click]

    p = np.zeros((2, 2, 2, 2))
    for x, y in itertools.product((0, 1), repeat=2):
        EA, EB = povm(anglesA[x], etaA), povm(anglesB[y], etaB)
        for a, b in itertools.product((0, 1), repeat=2):
            p[a, b, x, y] = np.real(np.trace(rho @ np.kron(EA[a], EB[b])))
    return p
