"""Behaviors, vertex sets and maximum-likelihood fits for the CHSH scenario.

Two parties, binary settings ``x, y`` and binary outcomes ``a, b``. Every
probability table in this package is a ``(2, 2, 2, 2)`` array indexed
``[a, b, x, y]``; flattened tables use ``a*8 + b*4 + x*2 + y``.

Vertex orders are fixed:

* LHV vertex ``k`` has the 4-bit index ``k = dA(0)*8 + dA(1)*4 + dB(0)*2 + dB(1)``
  where ``dA``/``dB`` are the deterministic response functions.
* NS vertices are the 16 LHV vertices followed by the 8 PR boxes
  ``p(ab|xy) = 1/2  iff  a ^ b = x*y ^ s*x ^ t*y ^ u``, ordered by the 3-bit
  index ``s*4 + t*2 + u``. Entry 16 is the standard PR box.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ValidationError

SHAPE = (2, 2, 2, 2)
NORM_TOL = 1e-12

LHV, NS, SETTINGS = "LHV", "NS", "SETTINGS"


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Behavior:
    """Conditional outcome distribution ``p(ab|xy)``."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.size != 16:
            raise ValidationError(f"behavior needs 16 entries, got {p.size}")
        p = p.reshape(SHAPE)
        if not np.all(np.isfinite(p)) or p.min() < -NORM_TOL:
            raise ValidationError("behavior has negative or non-finite entries")
        sums = p.sum(axis=(0, 1))
        if np.max(np.abs(sums - 1.0)) > NORM_TOL:
            raise ValidationError(f"behavior not normalized per setting: {sums.ravel()}")
        object.__setattr__(self, "p", _frozen(np.clip(p, 0.0, None)))

    @property
    def flat(self) -> np.ndarray:
        return self.p.ravel()

    @classmethod
    def uniform(cls) -> "Behavior":
        return cls(np.full(SHAPE, 0.25))

    @classmethod
    def from_counts(cls, counts) -> "Behavior":
        """Empirical conditional frequencies; every setting must have data."""
        n = _counts_array(counts)
        nxy = n.sum(axis=(0, 1))
        if np.any(nxy <= 0):
            raise ValidationError("empirical behavior needs data for all four settings")
        return cls(n / nxy)

    def mix(self, other: "Behavior", weight: float) -> "Behavior":
        """Return ``(1 - weight) * self + weight * other``."""
        return Behavior((1.0 - weight) * self.p + weight * other.p)

    def alice_marginal(self) -> np.ndarray:
        """``p_A(a|x,y)`` as an array indexed ``[a, x, y]``."""
        return self.p.sum(axis=1)

    def bob_marginal(self) -> np.ndarray:
        """``p_B(b|x,y)`` as an array indexed ``[b, x, y]``."""
        return self.p.sum(axis=0)

    def signaling_gap(self) -> float:
        """Largest violation of the four no-signaling equalities."""
        pa = self.alice_marginal()
        pb = self.bob_marginal()
        return float(max(np.abs(pa[:, :, 0] - pa[:, :, 1]).max(),
                         np.abs(pb[:, 0, :] - pb[:, 1, :]).max()))

    def joint(self, q: "JointSettingDistribution | None" = None) -> np.ndarray:
        """Joint trial distribution ``q(xy) p(ab|xy)``; uniform ``q`` by default."""
        qq = np.full((2, 2), 0.25) if q is None else q.q
        return self.p * qq[None, None, :, :]

    def __repr__(self):
        return f"Behavior({np.array2string(self.flat, precision=6)})"


@dataclass(frozen=True, eq=False)
class JointSettingDistribution:
    """Product setting distribution ``q(xy) = qA(x) qB(y)``."""

    q: np.ndarray
    epsA: float = 0.0
    epsB: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(2, 2)
        if q.min() < 0 or abs(q.sum() - 1.0) > NORM_TOL:
            raise ValidationError("setting distribution must be a probability table")
        qa, qb = q.sum(axis=1), q.sum(axis=0)
        if np.max(np.abs(np.outer(qa, qb) - q)) > 1e-12:
            raise ValidationError("setting distribution must factorize")
        if np.max(np.abs(qa - 0.5)) > self.epsA + 1e-12 or np.max(np.abs(qb - 0.5)) > self.epsB + 1e-12:
            raise ValidationError("setting marginals exceed the stated biases")
        object.__setattr__(self, "q", _frozen(q))

    @classmethod
    def from_marginals(cls, qa0: float, qb0: float, epsA=None, epsB=None):
        epsA = abs(qa0 - 0.5) if epsA is None else epsA
        epsB = abs(qb0 - 0.5) if epsB is None else epsB
        q = np.outer([qa0, 1.0 - qa0], [qb0, 1.0 - qb0])
        return cls(q, epsA, epsB)

    @classmethod
    def uniform(cls):
        return cls(np.full((2, 2), 0.25))


@dataclass(frozen=True)
class VertexSet:
    kind: str
    vertices: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.vertices)

    def __iter__(self):
        return iter(self.vertices)

    def __getitem__(self, i):
        return self.vertices[i]

    def array(self) -> np.ndarray:
        """Vertices stacked as rows (16 columns for behaviors, 4 for settings)."""
        if self.kind == SETTINGS:
            return np.array([v.q.ravel() for v in self.vertices])
        return np.array([v.flat for v in self.vertices])


def _deterministic(da, db):
    p = np.zeros(SHAPE)
    for x, y in itertools.product((0, 1), repeat=2):
        p[da[x], db[y], x, y] = 1.0
    return p


def lhv_vertices() -> VertexSet:
    """The 16 deterministic local behaviors, in 4-bit strategy order."""
    verts = []
    for a0, a1, b0, b1 in itertools.product((0, 1), repeat=4):
        verts.append(Behavior(_deterministic((a0, a1), (b0, b1))))
    return VertexSet(LHV, tuple(verts))


def pr_box(s: int = 0, t: int = 0, u: int = 0) -> Behavior:
    p = np.zeros(SHAPE)
    for a, b, x, y in itertools.product((0, 1), repeat=4):
        if a ^ b == (x & y) ^ (s & x) ^ (t & y) ^ u:
            p[a, b, x, y] = 0.5
    return Behavior(p)


def ns_vertices() -> VertexSet:
    """LHV vertices followed by the 8 PR-box variants (24 in total)."""
    boxes = [pr_box(s, t, u) for s, t, u in itertools.product((0, 1), repeat=3)]
    return VertexSet(NS, lhv_vertices().vertices + tuple(boxes))


def _check_bias(eps, name):
    if not (0.0 <= eps < 0.5) or not math.isfinite(eps):
        raise ValidationError(f"{name} must lie in [0, 1/2), got {eps!r}")


def setting_vertices(epsA: float, epsB: float) -> VertexSet:
    """Extreme points of the product setting distributions with bounded bias.

    Order: ``qA(0) in (1/2+epsA, 1/2-epsA)`` outer, ``qB(0)`` inner.
    """
    _check_bias(epsA, "epsA")
    _check_bias(epsB, "epsB")
    verts = []
    for sa, sb in itertools.product((1, -1), repeat=2):
        verts.append(JointSettingDistribution.from_marginals(
            0.5 + sa * epsA, 0.5 + sb * epsB, epsA, epsB))
    return VertexSet(SETTINGS, tuple(verts))


# ---------------------------------------------------------------------------
# maximum-likelihood no-signaling fit

def _counts_array(counts) -> np.ndarray:
    n = np.asarray(getattr(counts, "n", counts), dtype=float)
    if n.size != 16:
        raise ValidationError(f"counts table needs 16 entries, got {n.size}")
    n = n.reshape(SHAPE)
    if np.any(n < 0) or not np.all(np.isfinite(n)):
        raise ValidationError("counts must be finite and nonnegative")
    return n


def _ns_affine():
    """Affine map ``p = M @ theta + k`` onto the NS subspace.

    ``theta = (pA(1|0), pA(1|1), pB(1|0), pB(1|1), p(11|00), p(11|01), p(11|10), p(11|11))``.
    """
    M = np.zeros(SHAPE + (8,))
    k = np.zeros(SHAPE)
    for x, y in itertools.product((0, 1), repeat=2):
        c = 4 + 2 * x + y
        M[1, 1, x, y, c] = 1
        M[1, 0, x, y, x] = 1
        M[1, 0, x, y, c] = -1
        M[0, 1, x, y, 2 + y] = 1
        M[0, 1, x, y, c] = -1
        M[0, 0, x, y, x] = -1
        M[0, 0, x, y, 2 + y] = -1
        M[0, 0, x, y, c] = 1
        k[0, 0, x, y] = 1
    return M.reshape(16, 8), k.ravel()


_NS_M, _NS_K = _ns_affine()


def log_likelihood(counts, behavior: Behavior) -> float:
    """``sum n(abxy) log p(ab|xy)`` with the convention ``0 log 0 = 0``."""
    n = _counts_array(counts).ravel()
    p = behavior.flat
    used = n > 0
    if np.any(p[used] <= 0):
        return -math.inf
    return float(np.dot(n[used], np.log(p[used])))


def _barrier_newton_ml(w, mu0=1e-2, mu_min=1e-15, tol=1e-10, max_iter=100_000):
    """Maximize ``sum w_i log p_i`` over the NS polytope.

    Path-following on ``sum (w_i + mu) log p_i``; the extra ``mu`` terms are a
    log barrier for ``p >= 0``, so the final objective gap is at most ``16 mu``.
    """
    theta = np.array([0.5, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25])
    M, k = _NS_M, _NS_K
    mu = mu0
    total = 0
    while True:
        wm = w + mu
        p = M @ theta + k
        f = float(wm @ np.log(p))
        for _ in range(200):
            total += 1
            if total > max_iter:
                raise ConvergenceError("no-signaling ML fit exceeded iteration cap")
            g = M.T @ (wm / p)
            H = (M * (wm / p**2)[:, None]).T @ M
            step = np.linalg.solve(H, g)
            decrement = float(g @ step)
            if decrement < tol * 1e-5:
                break
            dp = M @ step
            s = 1.0
            neg = dp < 0
            if np.any(neg):
                s = min(1.0, 0.99 * float(np.min(-p[neg] / dp[neg])))
            while True:
                p_new = p + s * dp
                f_new = float(wm @ np.log(p_new)) if np.all(p_new > 0) else -math.inf
                if f_new >= f + 0.25 * s * decrement or s < 1e-14:
                    break
                s *= 0.5
            if f_new == -math.inf:
                break
            theta = theta + s * step
            p, f_prev, f = p_new, f, f_new
            if abs(f - f_prev) <= 1e-16 * max(abs(f), 1.0):
                break
        if mu <= mu_min:
            return theta
        mu = max(mu * 0.1, mu_min)


def _em_vertex_weights(n, tol=1e-10, max_iter=100_000):
    """Multiplicative (EM) ascent on weights over the 24 NS vertices."""
    V = ns_vertices().array()
    w = np.full(len(V), 1.0 / len(V))
    used = n > 0
    nn = n[used] / n.sum()
    Vu = V[:, used]
    obj = -math.inf
    for _ in range(max_iter):
        p = w @ Vu
        new_obj = float(nn @ np.log(p))
        if abs(new_obj - obj) <= tol * abs(new_obj):
            return w
        obj = new_obj
        w = w * (Vu @ (nn / p))
        w /= w.sum()
    raise ConvergenceError("EM no-signaling fit exceeded iteration cap")


def ml_no_signaling(counts, method: str = "newton", tol: float = 1e-10,
                    max_iter: int = 100_000) -> Behavior:
    """Maximum-likelihood behavior inside the no-signaling polytope.

    Maximizes ``sum n(abxy) log p(ab|xy)`` over the convex hull of
    :func:`ns_vertices`. Zero-count cells contribute nothing.

    Parameters
    ----------
    counts : CountsTable or array-like of 16 counts indexed ``[a, b, x, y]``
    method : ``"newton"`` (default) runs a barrier Newton method in the
        8-parameter affine coordinates of the NS polytope; ``"em"`` runs
        multiplicative updates on the 24 vertex weights.
    tol : relative objective tolerance.
    max_iter : iteration cap; exceeding it raises :class:`ConvergenceError`.
    """
    n = _counts_array(counts)
    total = n.sum()
    if total <= 0:
        raise ValidationError("all counts are zero")
    flat = n.ravel()
    if method == "newton":
        theta = _barrier_newton_ml(flat / total, tol=tol, max_iter=max_iter)
        p = np.clip(_NS_M @ theta + _NS_K, 0.0, None)
    elif method == "em":
        w = _em_vertex_weights(flat, tol=tol, max_iter=max_iter)
        p = w @ ns_vertices().array()
    else:
        raise ValueError(f"unknown method {method!r}")
    p = p.reshape(SHAPE)
    p /= p.sum(axis=(0, 1), keepdims=True)
    return Behavior(p)
