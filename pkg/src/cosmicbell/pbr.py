"""Prediction-based-ratio (PBR) construction and blocked p-value analysis.

A PBR is a nonnegative score ``R(abxy)`` whose expectation is at most one
under every distribution in the null hypothesis. With settings drawn from a
bias-bounded product distribution, the null set is contained in the convex
hull of ``q_j(xy) d_k(ab|xy)`` over setting vertices ``q_j`` and hypothesis
vertices ``d_k``, so validity reduces to finitely many linear constraints.

The running product of observed scores is a test supermartingale; its
inverse (clamped at one) is a valid p-value bound even when the score for
each block is chosen from earlier data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import polytopes
from .errors import ConvergenceError, ValidationError
from .polytopes import LHV, NS, Behavior, JointSettingDistribution

SMOOTHING = 1e-9
GAIN_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PbrFunction:
    """Nonnegative trial score indexed ``[a, b, x, y]``."""

    R: np.ndarray
    gain: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(polytopes.SHAPE)
        if np.any(R < 0) or not np.all(np.isfinite(R)):
            raise ValidationError("PBR values must be finite and nonnegative")
        R = R.copy()
        R.setflags(write=False)
        object.__setattr__(self, "R", R)

    @classmethod
    def trivial(cls) -> "PbrFunction":
        return cls(np.ones(polytopes.SHAPE), 0.0)

    @property
    def is_trivial(self) -> bool:
        return bool(np.all(self.R == 1.0))

    @property
    def flat(self) -> np.ndarray:
        return self.R.ravel()


def constraint_matrix(epsA: float, epsB: float, hypothesis: str = LHV) -> np.ndarray:
    """Rows ``q_j(xy) d_k(ab|xy)`` for every (hypothesis vertex, setting vertex) pair.

    Row order is hypothesis-vertex major. Shape is ``(64, 16)`` for LHV and
    ``(96, 16)`` for NS.
    """
    if hypothesis == LHV:
        D = polytopes.lhv_vertices().array()
    elif hypothesis == NS:
        D = polytopes.ns_vertices().array()
    else:
        raise ValidationError(f"unknown hypothesis {hypothesis!r}")
    Q = polytopes.setting_vertices(epsA, epsB).array()
    # q(xy) broadcast over the (a, b) axes of the flat layout
    Qfull = np.tile(Q, (1, 4))
    return (D[:, None, :] * Qfull[None, :, :]).reshape(-1, 16)


def max_constraint(pbr: PbrFunction, epsA: float, epsB: float, hypothesis: str = LHV) -> float:
    """Largest expected score over all vertex pairs (must be <= 1)."""
    return float(np.max(constraint_matrix(epsA, epsB, hypothesis) @ pbr.flat))


def gain_rate(pbr: PbrFunction, p: Behavior, q: JointSettingDistribution | None = None) -> float:
    """Expected log score ``sum q(xy) p(ab|xy) log R(abxy)``.

    Cells with zero probability contribute nothing. Returns ``-inf`` when
    ``R`` vanishes on a cell of positive probability.
    """
    w = p.joint(q).ravel()
    R = pbr.flat
    used = w > 0
    if np.any(R[used] <= 0):
        return -math.inf
    return float(np.dot(w[used], np.log(R[used])))


def _maximize_gain(c, A, mu_min=1e-15, max_iter=100_000):
    """Barrier Newton for ``max sum c log R  s.t.  A R <= 1``.

    Returns ``R`` strictly inside the feasible set. At the final barrier weight
    the gain is within ``len(A) * mu_min`` of the optimum.
    """
    R = np.full(A.shape[1], 0.5)
    mu = 1.0
    total = 0

    def objective(R, mu):
        s = 1.0 - A @ R
        if np.any(R <= 0) or np.any(s <= 0):
            return -math.inf
        return float(c @ np.log(R) + mu * np.sum(np.log(s)))

    while True:
        f = objective(R, mu)
        for _ in range(500):
            total += 1
            if total > max_iter:
                raise ConvergenceError("PBR optimization exceeded iteration cap")
            s = 1.0 - A @ R
            g = c / R - mu * (A.T @ (1.0 / s))
            H = np.diag(c / R**2) + mu * (A.T * (1.0 / s**2)) @ A
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, g, rcond=None)[0]
            decrement = float(g @ step)
            if decrement < 1e-20 + 1e-13 * mu:
                break
            t = 1.0
            f_new = objective(R + t * step, mu)
            while f_new < f + 0.25 * t * decrement and t > 1e-16:
                t *= 0.5
                f_new = objective(R + t * step, mu)
            if f_new == -math.inf or f_new <= f:
                break
            R = R + t * step
            f = f_new
        if mu <= mu_min:
            return R
        mu = max(mu * 0.1, mu_min)


def build_pbr(p_est: Behavior, epsA: float = 0.0, epsB: float = 0.0,
              hypothesis: str = LHV, max_iter: int = 100_000) -> PbrFunction:
    """Gain-optimal PBR against ``hypothesis`` with bias-bounded settings.

    The gain is evaluated at ``p_est`` with uniform settings, after mixing in
    ``1e-9`` of the uniform behavior so every score coordinate is pinned by
    the optimum. Constraints are imposed at every (hypothesis vertex,
    setting vertex) pair. Returns ``R = 1`` when the optimal gain is below
    ``1e-12``.
    """
    if not isinstance(p_est, Behavior):
        p_est = Behavior(p_est)
    A = constraint_matrix(epsA, epsB, hypothesis)
    smoothed = p_est.mix(Behavior.uniform(), SMOOTHING)
    c = smoothed.joint().ravel()
    R = _maximize_gain(c, A, max_iter=max_iter)
    gain = float(c @ np.log(R))
    if gain <= GAIN_FLOOR:
        return PbrFunction.trivial()
    # interior point already satisfies A R < 1; rescale guards round-off
    peak = float(np.max(A @ R))
    if peak > 1.0:
        R = R / peak
    return PbrFunction(R, gain_rate(PbrFunction(R), p_est))


def pvalue_bound(log_sum: float) -> float:
    """``min(exp(-log_sum), 1)`` for the accumulated log score."""
    if not log_sum > 0:
        return 1.0
    return math.exp(-log_sum)


# ---------------------------------------------------------------------------
# blocked analysis

@dataclass(frozen=True)
class Block:
    start: int
    stop: int
    period: int


@dataclass(frozen=True)
class BlockPlan:
    """Contiguous trial blocks with per-period setting biases.

    ``blocks`` index positions in the trial stream (half-open ranges);
    ``biases`` maps a period id to ``(epsA, epsB)``.
    """

    blocks: tuple
    biases: Mapping[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, Block) else Block(*b) for b in self.blocks)
        pos = 0
        for b in blocks:
            if b.start != pos or b.stop <= b.start:
                raise ValidationError(f"blocks must be contiguous and nonempty; bad block {b}")
            pos = b.stop
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "biases", {int(k): tuple(map(float, v)) for k, v in self.biases.items()})

    @property
    def n_trials(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    @classmethod
    def split_periods(cls, periods: Sequence[int], block_size: int, biases=None) -> "BlockPlan":
        """Cut each contiguous period run into blocks of roughly ``block_size``."""
        periods = np.asarray(periods)
        if block_size <= 0:
            raise ValidationError("block_size must be positive")
        blocks = []
        if len(periods):
            edges = np.flatnonzero(np.diff(periods)) + 1
            starts = np.r_[0, edges]
            stops = np.r_[edges, len(periods)]
            for s, e in zip(starts, stops):
                nb = max(1, int(round((e - s) / block_size)))
                cuts = np.linspace(s, e, nb + 1).round().astype(int)
                blocks += [Block(int(a), int(b), int(periods[s])) for a, b in zip(cuts[:-1], cuts[1:])]
        return cls(tuple(blocks), biases or {})


@dataclass(frozen=True)
class BlockResult:
    block: Block
    gain: float
    log_contribution: float
    trivial: bool


@dataclass(frozen=True)
class AnalysisResult:
    """Outcome of a blocked PBR analysis.

    ``log_product`` is the raw sum of ``log R_i`` over all trials and may be
    negative; ``total_log_inverse_p`` is its positive part.
    """

    p_value_bound: float
    log_product: float
    per_block: tuple

    @property
    def total_log_inverse_p(self) -> float:
        return max(self.log_product, 0.0)

    @property
    def log10_p(self) -> float:
        return -self.total_log_inverse_p / math.log(10)


def block_counts(x, y, a, b) -> np.ndarray:
    """Counts table ``[a, b, x, y]`` for a slice of trials."""
    idx = (np.asarray(a) * 8 + np.asarray(b) * 4 + np.asarray(x) * 2 + np.asarray(y)).astype(np.int64)
    return np.bincount(idx, minlength=16).reshape(polytopes.SHAPE)


def run_blocked(trials, plan: BlockPlan, hypothesis: str = LHV,
                zero_bias: bool = False) -> AnalysisResult:
    """Accumulate PBR scores block by block over an ordered trial stream.

    The first block of each period uses the trivial score. Every later block
    uses the PBR built from the ML no-signaling fit of the immediately
    preceding block of the same period, with that period's biases (or zero
    bias when ``zero_bias`` is set).

    ``trials`` is any object with integer arrays ``index, period, x, y, a, b``
    (see :class:`cosmicbell.qsim.TrialStream`).
    """
    index = np.asarray(trials.index)
    if len(index) != plan.n_trials:
        raise ValidationError(f"plan covers {plan.n_trials} trials but stream has {len(index)}")
    if len(index) > 1 and np.any(np.diff(index) <= 0):
        raise ValidationError("trial indices must be strictly increasing")
    x, y, a, b = (np.asarray(getattr(trials, k)) for k in ("x", "y", "a", "b"))
    period = np.asarray(trials.period)
    cell = (a * 8 + b * 4 + x * 2 + y).astype(np.int64)

    previous: dict[int, np.ndarray] = {}
    results = []
    total = 0.0
    for blk in plan.blocks:
        if blk.period not in plan.biases:
            raise ValidationError(f"block references unknown period {blk.period}")
        sl = slice(blk.start, blk.stop)
        if np.any(period[sl] != blk.period):
            raise ValidationError(f"trials in {blk} do not all belong to period {blk.period}")
        counts = np.bincount(cell[sl], minlength=16)
        prior = previous.get(blk.period)
        if prior is None:
            pbr = PbrFunction.trivial()
        else:
            epsA, epsB = (0.0, 0.0) if zero_bias else plan.biases[blk.period]
            p_est = polytopes.ml_no_signaling(prior)
            pbr = build_pbr(p_est, epsA, epsB, hypothesis)
        logR = np.log(pbr.flat)
        used = counts > 0
        if np.any(np.isneginf(logR[used])):
            contribution = -math.inf
        else:
            contribution = float(np.dot(counts[used], logR[used]))
        total += contribution
        results.append(BlockResult(blk, pbr.gain, contribution, pbr.is_trivial))
        previous[blk.period] = counts
    return AnalysisResult(pvalue_bound(total), total, tuple(results))
