"""Forward model of the entangled-photon Bell test.

State ``(|HV> + r|VH>) / sqrt(1 + r^2)``. Each analyzer transmits
``cos(t)|H> + sin(t)|V>`` for its setting angle ``t`` (degrees); outcome 1 is a
click behind the analyzer, outcome 0 is anything else, including loss.
Accidental clicks are OR-ed in independently on each side.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from scipy.optimize import minimize

from .chstats import CH_COEFFICIENTS, CountsTable, ch_value
from .errors import ValidationError
from .polytopes import SHAPE, Behavior, JointSettingDistribution

CHUNK_SIZE = 1_000_000


@dataclass(frozen=True)
class QuantumModel:
    r: float
    anglesA: tuple = (0.0, 45.0)
    anglesB: tuple = (0.0, 45.0)
    etaA: float = 1.0
    etaB: float = 1.0
    p_dark: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValidationError(f"amplitude ratio r must lie in [0, 1], got {self.r}")
        for name in ("etaA", "etaB", "p_dark"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if len(self.anglesA) != 2 or len(self.anglesB) != 2:
            raise ValidationError("each party needs two analyzer angles")

    @classmethod
    def from_state_angle(cls, state_angle_deg: float, **kw) -> "QuantumModel":
        """Model for ``cos(t)|HV> + sin(t)|VH>``, i.e. ``r = tan(t)``."""
        return cls(r=math.tan(math.radians(state_angle_deg)), **kw)


def _raw_terms(r, alpha, beta, etaA, etaB):
    """Click probabilities without accidentals; angles in radians, broadcastable."""
    norm = 1.0 + r * r
    amp = np.cos(alpha) * np.sin(beta) + r * np.sin(alpha) * np.cos(beta)
    p11 = etaA * etaB * amp**2 / norm
    pa = etaA * (np.cos(alpha) ** 2 + r * r * np.sin(alpha) ** 2) / norm
    pb = etaB * (np.sin(beta) ** 2 + r * r * np.cos(beta) ** 2) / norm
    return p11, pa, pb


def _dark_channel(p_dark):
    # column = true outcome, row = recorded outcome
    return np.array([[1.0 - p_dark, 0.0], [p_dark, 1.0]])


def _assemble(p11, pa, pb, p_dark):
    """Fill a ``[a, b, x, y]`` table from ``[x, y]`` joint and marginal terms."""
    p = np.empty(SHAPE)
    p[1, 1] = p11
    p[1, 0] = pa - p11
    p[0, 1] = pb - p11
    p[0, 0] = 1.0 - pa - pb + p11
    if p_dark:
        T = _dark_channel(p_dark)
        p = np.einsum("ia,jb,abxy->ijxy", T, T, p)
    return p


def model_behavior(m: QuantumModel) -> Behavior:
    """Predicted ``p(ab|xy)`` for a quantum model."""
    alpha = np.radians(np.asarray(m.anglesA, dtype=float))[:, None]
    beta = np.radians(np.asarray(m.anglesB, dtype=float))[None, :]
    p11, pa, pb = _raw_terms(m.r, alpha, beta, m.etaA, m.etaB)
    pa = np.broadcast_to(pa, (2, 2))
    pb = np.broadcast_to(pb, (2, 2))
    p = _assemble(p11, pa, pb, m.p_dark)
    # round-off can leave -1e-17 in cells that are exactly zero
    p[np.abs(p) < 1e-15] = 0.0
    return Behavior(np.clip(p, 0.0, None))


def model_j(m: QuantumModel) -> float:
    return ch_value(model_behavior(m))


def j_gradient(m: QuantumModel) -> np.ndarray:
    """Analytic ``dJ / d(r, A1, A2, B1, B2)``; angle derivatives per degree."""
    r = m.r
    alpha = np.radians(np.asarray(m.anglesA, dtype=float))[:, None]
    beta = np.radians(np.asarray(m.anglesB, dtype=float))[None, :]
    eA, eB = m.etaA, m.etaB
    norm = 1.0 + r * r
    ca, sa, cb, sb = np.cos(alpha), np.sin(alpha), np.cos(beta), np.sin(beta)
    amp = ca * sb + r * sa * cb

    d11_dalpha = eA * eB * 2 * amp * (-sa * sb + r * ca * cb) / norm
    d11_dbeta = eA * eB * 2 * amp * (ca * cb - r * sa * sb) / norm
    d11_dr = eA * eB * (2 * amp * sa * cb * norm - amp**2 * 2 * r) / norm**2
    da_dalpha = eA * (r * r - 1) * np.sin(2 * alpha) / norm
    da_dr = -eA * 2 * r * np.cos(2 * alpha) / norm**2
    db_dbeta = eB * (1 - r * r) * np.sin(2 * beta) / norm
    db_dr = eB * 2 * r * np.cos(2 * beta) / norm**2

    # J is linear in p; the accidental channel is linear too, so pull the
    # CH coefficients back through it once.
    c = CH_COEFFICIENTS
    if m.p_dark:
        T = _dark_channel(m.p_dark)
        c = np.einsum("ia,jb,ijxy->abxy", T, T, c)
    # coefficient of each raw term in J, per (x, y)
    w11 = c[1, 1] - c[1, 0] - c[0, 1] + c[0, 0]
    wa = c[1, 0] - c[0, 0]
    wb = c[0, 1] - c[0, 0]

    zeros = np.zeros((2, 2))
    g_r = np.sum(w11 * d11_dr + wa * (da_dr + zeros) + wb * (db_dr + zeros))
    g_alpha = np.sum(w11 * d11_dalpha + wa * (da_dalpha + zeros), axis=1)
    g_beta = np.sum(w11 * d11_dbeta + wb * (db_dbeta + zeros), axis=0)
    deg = math.pi / 180.0
    return np.r_[g_r, g_alpha * deg, g_beta * deg]


@dataclass(frozen=True)
class EberhardResult:
    r: float
    anglesA: tuple
    anglesB: tuple
    j_min: float
    violation: bool

    def model(self, etaA=1.0, etaB=1.0) -> QuantumModel:
        return QuantumModel(self.r, self.anglesA, self.anglesB, etaA, etaB)


def _wrap(angle, low):
    """Map ``angle`` into ``[low, low + 180)``."""
    return (angle - low) % 180.0 + low


def canonical_angles(anglesA, anglesB):
    """Pick one representative of the analyzer-angle symmetry class.

    Angles matter only modulo 180 degrees and up to a global sign flip. The
    sign is chosen so Bob's first angle lies in ``[0, 90)``; Alice's angles are
    then wrapped into ``[-180, 0)`` and Bob's into ``[-90, 90)``.
    """
    A = np.asarray(anglesA, dtype=float)
    B = np.asarray(anglesB, dtype=float)
    if _wrap(B[0], -90.0) < 0:
        A, B = -A, -B
    return tuple(float(_wrap(a, -180.0)) for a in A), tuple(float(_wrap(b, -90.0)) for b in B)


# fixed multi-start grid: r values x angle offsets
_R_STARTS = (0.2, 0.45, 0.7, 0.95)
_ANGLE_STARTS = (-60.0, 0.0, 60.0)


def eberhard_optimize(etaA: float, etaB: float | None = None, tol: float = 1e-12) -> EberhardResult:
    """Minimize ``J`` over the state ratio and the four analyzer angles.

    Accidentals are off. Runs L-BFGS-B with the analytic gradient from every
    point of a fixed start grid and keeps the best minimum, so the result is
    deterministic. ``violation`` is False when no negative ``J`` exists.
    """
    etaB = etaA if etaB is None else etaB
    if not (0 < etaA <= 1 and 0 < etaB <= 1):
        raise ValidationError("efficiencies must lie in (0, 1]")

    def fun(v):
        m = QuantumModel(float(np.clip(v[0], 0, 1)), (v[1], v[2]), (v[3], v[4]), etaA, etaB)
        p11, pa, pb = _raw_terms(m.r, np.radians(v[1:3])[:, None], np.radians(v[3:5])[None, :], etaA, etaB)
        J = float(np.sum(CH_COEFFICIENTS * _assemble(p11, np.broadcast_to(pa, (2, 2)),
                                                     np.broadcast_to(pb, (2, 2)), 0.0)))
        return J, j_gradient(m)

    bounds = [(0.0, 1.0)] + [(-360.0, 360.0)] * 4
    best = None
    for r0 in _R_STARTS:
        for offsets in itertools.product(_ANGLE_STARTS, repeat=4):
            # start near the generic CH layout: A2 - A1 and B2 - B1 spread apart
            v0 = np.array([r0, offsets[0], offsets[1] + 45.0, offsets[2], offsets[3] - 45.0])
            res = minimize(fun, v0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"ftol": tol, "gtol": 1e-10, "maxiter": 2000})
            if best is None or res.fun < best.fun:
                best = res
    v = best.x
    A, B = canonical_angles(v[1:3], v[3:5])
    j = model_j(QuantumModel(float(v[0]), A, B, etaA, etaB))
    return EberhardResult(float(v[0]), A, B, j, bool(j < -1e-12))


# ---------------------------------------------------------------------------
# sampling

class TrialRecord(NamedTuple):
    index: int
    period: int
    x: int
    y: int
    a: int
    b: int


@dataclass(frozen=True, eq=False)
class TrialStream:
    """Column-oriented ordered trial records."""

    index: np.ndarray
    period: np.ndarray
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        n = len(self.index)
        for name in ("index", "period", "x", "y", "a", "b"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (n,):
                raise ValidationError(f"column {name} has shape {arr.shape}, expected ({n},)")
            if name in ("x", "y", "a", "b") and n and (arr.min() < 0 or arr.max() > 1):
                raise ValidationError(f"column {name} must be binary")
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.index)

    def __iter__(self) -> Iterator[TrialRecord]:
        for row in zip(self.index, self.period, self.x, self.y, self.a, self.b):
            yield TrialRecord(*map(int, row))

    @classmethod
    def from_records(cls, records) -> "TrialStream":
        cols = list(zip(*records)) or [()] * 6
        return cls(*(np.asarray(c, dtype=np.int64) for c in cols))

    @classmethod
    def concat(cls, streams) -> "TrialStream":
        streams = list(streams)
        return cls(*(np.concatenate([getattr(s, k) for s in streams])
                     for k in ("index", "period", "x", "y", "a", "b")))

    def counts(self, period: int | None = None) -> CountsTable:
        sel = slice(None) if period is None else self.period == period
        cell = self.a[sel] * 8 + self.b[sel] * 4 + self.x[sel] * 2 + self.y[sel]
        return CountsTable(np.bincount(cell, minlength=16), period)


def simulate_trials(p: Behavior, q: JointSettingDistribution, n_trials: int, seed: int,
                    period: int = 1, start_index: int = 0,
                    chunk_size: int = CHUNK_SIZE) -> TrialStream:
    """Draw i.i.d. trials: settings from ``q``, outcomes from ``p(.|xy)``.

    The stream is generated in chunks with child seeds spawned from ``seed``,
    so output is fixed for a given ``(seed, chunk_size)``.
    """
    if n_trials <= 0:
        raise ValidationError("n_trials must be positive")
    cdf_q = np.cumsum(q.q.ravel())
    # outcome cells ordered (a, b) = 00, 01, 10, 11 per setting (x, y)
    cond = p.p.reshape(4, 4).T            # [xy, ab]
    cdf_o = np.cumsum(cond, axis=1)
    cdf_q[-1] = 1.0
    cdf_o[:, -1] = 1.0
    n_chunks = -(-n_trials // chunk_size)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    xs, outs = [], []
    for i, child in enumerate(children):
        m = min(chunk_size, n_trials - i * chunk_size)
        rng = np.random.default_rng(child)
        s = np.searchsorted(cdf_q, rng.random(m), side="right")
        o = (rng.random(m)[:, None] >= cdf_o[s]).sum(axis=1)
        xs.append(s)
        outs.append(o)
    s = np.concatenate(xs)
    o = np.minimum(np.concatenate(outs), 3)
    s = np.minimum(s, 3)
    return TrialStream(
        index=np.arange(start_index, start_index + n_trials),
        period=np.full(n_trials, period),
        x=s >> 1, y=s & 1, a=o >> 1, b=o & 1,
    )


def simulate_counts(p: Behavior, q: JointSettingDistribution, n_trials: int, seed: int,
                    return_trials: bool = False, chunk_size: int = CHUNK_SIZE):
    """Counts table of :func:`simulate_trials`; optionally also the stream."""
    trials = simulate_trials(p, q, n_trials, seed, chunk_size=chunk_size)
    counts = trials.counts()
    return (counts, trials) if return_trials else counts
