"""CH/Eberhard statistic, no-signaling Z-tests, setting-bias bookkeeping.

Undetected events are recorded as outcome 0, so the ``p(1u|xy)`` terms of
the CH marginals merge into ``p(10|xy)`` (and likewise for Bob).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from .errors import ValidationError
from .polytopes import SHAPE, Behavior


@dataclass(frozen=True, eq=False)
class CountsTable:
    """Trial counts ``n(abxy)`` indexed ``[a, b, x, y]``."""

    n: np.ndarray
    period: int | None = None

    def __post_init__(self):
        n = np.asarray(self.n)
        if n.size != 16:
            raise ValidationError(f"counts table needs 16 entries, got {n.size}")
        if not np.all(np.isfinite(n)) or np.any(n < 0) or np.any(n != np.round(n)):
            raise ValidationError("counts must be nonnegative integers")
        n = n.reshape(SHAPE).astype(np.int64)
        n.setflags(write=False)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_rows(cls, rows, period=None) -> "CountsTable":
        """Build from ``(x, y, a, b, count)`` tuples; repeated cells accumulate."""
        n = np.zeros(SHAPE, dtype=np.int64)
        for x, y, a, b, c in rows:
            n[a, b, x, y] += c
        return cls(n, period)

    @property
    def total(self) -> int:
        return int(self.n.sum())

    @property
    def setting_totals(self) -> np.ndarray:
        """``N_xy`` indexed ``[x, y]``."""
        return self.n.sum(axis=(0, 1))

    def __add__(self, other: "CountsTable") -> "CountsTable":
        return CountsTable(self.n + other.n)

    def frequencies(self) -> Behavior:
        return Behavior.from_counts(self.n)


def _require_settings(counts: CountsTable):
    nxy = counts.setting_totals
    if np.any(nxy <= 0):
        empty = [f"{x}{y}" for x in (0, 1) for y in (0, 1) if nxy[x, y] <= 0]
        raise ValidationError(f"no trials for setting(s) {', '.join(empty)}")


def _ch_coefficients() -> np.ndarray:
    c = np.zeros(SHAPE)
    c[1, 1, 0, 0] = c[1, 1, 0, 1] = c[1, 1, 1, 0] = -1.0
    c[1, 1, 1, 1] = 1.0
    c[1, :, 0, :] += 0.5   # p^A(1|0), averaged over y
    c[:, 1, :, 0] += 0.5   # p^B(1|0), averaged over x
    return c


CH_COEFFICIENTS = _ch_coefficients()
CH_COEFFICIENTS.setflags(write=False)


def ch_value(p) -> float:
    """CH/Eberhard ``J`` of a behavior; local models satisfy ``J >= 0``.

    ``J = -p(11|00) - p(11|01) - p(11|10) + p(11|11) + p^A(1|0) + p^B(1|0)``.
    """
    q = p.p if isinstance(p, Behavior) else np.asarray(p).reshape(SHAPE)
    return float(np.sum(CH_COEFFICIENTS * q))


def ch_j(counts: CountsTable) -> float:
    """``J`` from the empirical conditional frequencies of a counts table."""
    if not isinstance(counts, CountsTable):
        counts = CountsTable(counts)
    _require_settings(counts)
    return ch_value(counts.frequencies())


class ZTest(NamedTuple):
    label: str
    z: float
    p_value: float
    degenerate: bool


def two_proportion_ztest(k1, n1, k2, n2) -> tuple[float, float, bool]:
    """Pooled two-proportion Z test, two-sided normal tail.

    Returns ``(z, p, degenerate)``; a pooled proportion of exactly 0 or 1
    gives ``p = 1`` with ``degenerate`` set.
    """
    if n1 <= 0 or n2 <= 0:
        raise ValidationError("both samples must be nonempty")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return 0.0, 1.0, True
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (k1 / n1 - k2 / n2) / se
    # the tail underflows past |z| ~ 38; keep p strictly positive
    p = min(1.0, max(2 * norm.sf(abs(z)), math.ulp(0.0)))
    return z, float(p), False


def nosignaling_ztests(counts: CountsTable) -> list[ZTest]:
    """Z-tests of the four no-signaling conditions.

    Order: Alice's click rate at ``x=0`` compared across ``y``, then ``x=1``,
    then Bob's at ``y=0`` across ``x``, then ``y=1``.
    """
    if not isinstance(counts, CountsTable):
        counts = CountsTable(counts)
    _require_settings(counts)
    n = counts.n
    N = counts.setting_totals
    clicks_a = n[1].sum(axis=0)     # [x, y]
    clicks_b = n[:, 1].sum(axis=0)  # [x, y]
    out = []
    for x in (0, 1):
        z, p, deg = two_proportion_ztest(clicks_a[x, 0], N[x, 0], clicks_a[x, 1], N[x, 1])
        out.append(ZTest(f"x={x}", z, p, deg))
    for y in (0, 1):
        z, p, deg = two_proportion_ztest(clicks_b[0, y], N[0, y], clicks_b[1, y], N[1, y])
        out.append(ZTest(f"y={y}", z, p, deg))
    return out


@dataclass(frozen=True)
class BiasMonitor:
    """Bit-frequency ratio ``r = n0/n1`` and signal-to-noise ratio of one RNG."""

    r: float
    snr: float
    flags: tuple = ()

    def __post_init__(self):
        if not (self.r >= 0) or not (self.snr > 0):
            raise ValidationError(f"need ratio >= 0 and SNR > 0, got r={self.r}, snr={self.snr}")


def bias_estimate(monitor: BiasMonitor) -> float:
    """Upper bound on the total-variation bias of the setting bits.

    The stellar fraction ``snr/(1+snr)`` of bits is at most as biased as the
    observed ratio allows; the background fraction is treated as arbitrary.
    """
    r, snr = float(monitor.r), float(monitor.snr)
    if math.isinf(snr):
        signal, noise = 1.0, 0.0
    else:
        signal, noise = snr / (1 + snr), 1 / (1 + snr)
    if math.isinf(r):
        top = 1.0
    else:
        top = max(r / (1 + r), 1 / (1 + r))
    return signal * top + noise - 0.5


def _hoeffding_exponent(n0: int, n1: int, eps: float) -> float:
    N = n0 + n1
    if N <= 0:
        raise ValidationError("need at least one trial")
    f = max(n0, n1) / N
    delta = (0.5 + eps) - f
    if delta <= 0:
        return 0.0
    return 2.0 * N * delta * delta


def hoeffding_consistency(n0: int, n1: int, eps: float) -> float:
    """Lower bound on ``Prob(max frequency <= 1/2 + eps)`` given the counts.

    One-sided Hoeffding: ``1 - exp(-2 N delta^2)`` with ``delta`` the gap
    between ``1/2 + eps`` and the observed larger frequency; 0 when the gap
    is not positive.
    """
    e = _hoeffding_exponent(n0, n1, eps)
    return -math.expm1(-e) if e > 0 else 0.0


def hoeffding_log10_tail(n0: int, n1: int, eps: float) -> float:
    """``log10(1 - c)`` for :func:`hoeffding_consistency`, finite even when ``c`` rounds to 1."""
    return -_hoeffding_exponent(n0, n1, eps) / math.log(10)


@dataclass(frozen=True)
class EfficiencyBudget:
    eta_sc: float
    eta_so: float
    eta_fiber: float
    eta_m: float
    eta_det: float

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")


def heralding_budget(budget: EfficiencyBudget) -> float:
    """Heralding efficiency as the product of the five stage efficiencies."""
    return budget.eta_sc * budget.eta_so * budget.eta_fiber * budget.eta_m * budget.eta_det


def infer_sc(eta_total: float, eta_so: float, eta_fiber: float, eta_m: float, eta_det: float) -> float:
    """Fiber-coupling efficiency implied by a measured heralding efficiency."""
    denom = eta_so * eta_fiber * eta_m * eta_det
    if denom == 0:
        raise ValidationError("cannot infer coupling efficiency with a zero factor")
    return eta_total / denom


def element_product(factors) -> float:
    """Product of optical element transmittances; ``(value, multiplicity)`` pairs allowed."""
    out = 1.0
    for f in factors:
        if isinstance(f, tuple):
            v, k = f
            out *= v ** k
        else:
            out *= f
    return out
