"""Star positions, station geometry and spacelike-separation margins.

Angles are in degrees, station times in nanoseconds, distances to stars in
light-years and lookback times in years. The station baseline is expressed in
light-nanoseconds.

Geometry convention: ``theta_A`` is the angle between the direction to
Alice's star (seen from Alice) and the vector from Bob's station to Alice's.
A small ``theta_A`` means Alice's star lies roughly behind Alice as seen from
Bob, so its photon reaches Alice well before it could reach Bob.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date as Date, datetime, time, timedelta, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

C_M_PER_NS = 0.299792458
# WGS84
_WGS84_A = 6378137.0
_WGS84_F = 1 / 298.257223563
_WGS84_E2 = _WGS84_F * (2 - _WGS84_F)
_JD_UNIX_EPOCH = 2440587.5
_JD_J2000 = 2451545.0


@dataclass(frozen=True)
class StarEntry:
    hip_id: int
    ra: float
    dec: float
    distance: float
    sigma_distance: float = 0.0

    def __post_init__(self):
        if not self.distance > 0:
            raise ValidationError(f"HIP {self.hip_id}: distance must be positive")
        if not 0 <= self.ra < 360:
            raise ValidationError(f"HIP {self.hip_id}: ra must lie in [0, 360)")
        if not -90 <= self.dec <= 90:
            raise ValidationError(f"HIP {self.hip_id}: dec must lie in [-90, 90]")
        if self.sigma_distance < 0:
            raise ValidationError(f"HIP {self.hip_id}: negative distance error")


@dataclass(frozen=True)
class Site:
    lat: float
    lon: float
    elevation: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not -90 <= self.lat <= 90:
            raise ValidationError(f"site {self.name!r}: latitude out of range")


_BUDGET_FIELDS = ("T_P", "T_R_A", "T_R_B", "T_PC_A", "T_PC_B", "T_M_A", "T_M_B",
                  "path_A", "path_B", "baseline")


@dataclass(frozen=True)
class TimingBudget:
    """Station latencies (ns), effective optical paths and baseline (light-ns).

    ``sigma`` maps any field name to its 1-sigma uncertainty.
    """

    T_P: float
    T_R_A: float
    T_R_B: float
    T_PC_A: float
    T_PC_B: float
    T_M_A: float
    T_M_B: float
    path_A: float
    path_B: float
    baseline: float
    sigma: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in _BUDGET_FIELDS:
            v = getattr(self, name)
            if not (v >= 0):
                raise ValidationError(f"timing budget field {name} must be nonnegative, got {v}")
        for name, v in self.sigma.items():
            if name not in _BUDGET_FIELDS:
                raise ValidationError(f"uncertainty for unknown budget field {name!r}")
            if not (v >= 0):
                raise ValidationError(f"uncertainty of {name} must be nonnegative")

    @property
    def offset_A(self) -> float:
        """Constant part of Alice's margin: everything except ``baseline cos(theta_A)``."""
        return -self.T_P - self.T_R_A - self.T_PC_A - self.T_M_B + (self.path_A - self.path_B)

    @property
    def offset_B(self) -> float:
        return -self.T_P - self.T_R_B - self.T_PC_B - self.T_M_A + (self.path_B - self.path_A)

    @classmethod
    def from_dict(cls, d: dict) -> "TimingBudget":
        missing = [k for k in _BUDGET_FIELDS if k not in d]
        if missing:
            raise ValidationError(f"timing budget missing fields: {', '.join(missing)}")
        return cls(**{k: float(d[k]) for k in _BUDGET_FIELDS},
                   sigma={k: float(v) for k, v in d.get("sigma", {}).items()})

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in _BUDGET_FIELDS}
        out["sigma"] = dict(sorted(self.sigma.items()))
        return out


@dataclass(frozen=True)
class SpacetimeReport:
    gamma_A: float
    gamma_B: float
    theta_A: float
    theta_B: float
    tau_AB: float
    sigma_tau: float
    alpha: float

    def __post_init__(self):
        if not 0 <= self.alpha <= 180:
            raise ValidationError("alpha must lie in [0, 180]")


# ---------------------------------------------------------------------------
# time and sky coordinates

def _as_utc(t: datetime) -> datetime:
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def julian_date(utc) -> np.ndarray | float:
    """Julian date of a datetime (naive means UTC) or of POSIX seconds."""
    if isinstance(utc, datetime):
        return _as_utc(utc).timestamp() / 86400.0 + _JD_UNIX_EPOCH
    return np.asarray(utc, dtype=float) / 86400.0 + _JD_UNIX_EPOCH


def gmst(jd) -> np.ndarray | float:
    """Greenwich mean sidereal time in degrees (Meeus polynomial, UT1 ~ UTC)."""
    d = np.asarray(jd, dtype=float) - _JD_J2000
    T = d / 36525.0
    g = 280.46061837 + 360.98564736629 * d + 0.000387933 * T**2 - T**3 / 38710000.0
    return np.mod(g, 360.0)


def _hour_angle(ra, site: Site, jd):
    return np.mod(gmst(jd) + site.lon - ra, 360.0)


def _altaz(ra, dec, site: Site, jd):
    H = np.radians(_hour_angle(ra, site, jd))
    phi, d = math.radians(site.lat), np.radians(dec)
    alt = np.arcsin(np.sin(phi) * np.sin(d) + np.cos(phi) * np.cos(d) * np.cos(H))
    az = np.arctan2(-np.cos(d) * np.sin(H), np.sin(d) * np.cos(phi) - np.cos(d) * np.sin(phi) * np.cos(H))
    return np.mod(np.degrees(az), 360.0), np.degrees(alt)


def radec_to_altaz(star: StarEntry, site: Site, utc) -> tuple[float, float]:
    """``(azimuth, altitude)`` of a star; azimuth clockwise from North, no refraction."""
    az, alt = _altaz(star.ra, star.dec, site, julian_date(utc))
    return float(az), float(alt)


def altaz_to_radec(azimuth: float, altitude: float, site: Site, utc) -> tuple[float, float]:
    """Inverse of :func:`radec_to_altaz` in the same sidereal frame."""
    A, h, phi = math.radians(azimuth), math.radians(altitude), math.radians(site.lat)
    sin_dec = math.sin(phi) * math.sin(h) + math.cos(phi) * math.cos(h) * math.cos(A)
    dec = math.asin(max(-1.0, min(1.0, sin_dec)))
    H = math.atan2(-math.sin(A) * math.cos(h), math.sin(h) * math.cos(phi) - math.cos(h) * math.sin(phi) * math.cos(A))
    ra = (float(gmst(julian_date(utc))) + site.lon - math.degrees(H)) % 360.0
    return ra, math.degrees(dec)


def angular_separation(starA: StarEntry, starB: StarEntry) -> float:
    """Great-circle angle between two catalog positions, degrees."""
    r1, d1, r2, d2 = map(math.radians, (starA.ra, starA.dec, starB.ra, starB.dec))
    # haversine form stays accurate near 0 and 180
    h = math.sin((d2 - d1) / 2) ** 2 + math.cos(d1) * math.cos(d2) * math.sin((r2 - r1) / 2) ** 2
    return math.degrees(2 * math.asin(min(1.0, math.sqrt(h))))


def _enu_unit(azimuth, altitude):
    A, h = np.radians(azimuth), np.radians(altitude)
    return np.stack([np.cos(h) * np.sin(A), np.cos(h) * np.cos(A), np.sin(h)], axis=-1)


# ---------------------------------------------------------------------------
# station geometry

def site_ecef(site: Site) -> np.ndarray:
    """Earth-centred Earth-fixed position on the WGS84 ellipsoid, meters."""
    phi, lam = math.radians(site.lat), math.radians(site.lon)
    N = _WGS84_A / math.sqrt(1 - _WGS84_E2 * math.sin(phi) ** 2)
    h = site.elevation
    return np.array([(N + h) * math.cos(phi) * math.cos(lam),
                     (N + h) * math.cos(phi) * math.sin(lam),
                     (N * (1 - _WGS84_E2) + h) * math.sin(phi)])


def _ecef_to_enu(site: Site, v):
    phi, lam = math.radians(site.lat), math.radians(site.lon)
    east = np.array([-math.sin(lam), math.cos(lam), 0.0])
    north = np.array([-math.sin(phi) * math.cos(lam), -math.sin(phi) * math.sin(lam), math.cos(phi)])
    up = np.array([math.cos(phi) * math.cos(lam), math.cos(phi) * math.sin(lam), math.sin(phi)])
    return np.array([v @ east, v @ north, v @ up])


class Baseline(NamedTuple):
    length: float            # light-ns
    direction: np.ndarray    # unit ENU vector at site A, pointing from B to A
    coincident: bool


def baseline(siteA: Site, siteB: Site) -> Baseline:
    """Straight-line separation of two stations and its local direction.

    ``direction`` is expressed in Alice's east-north-up frame and points from
    Bob's station to Alice's. Coincident sites give length 0, a zero
    direction and ``coincident=True``.
    """
    d = site_ecef(siteA) - site_ecef(siteB)
    L = float(np.linalg.norm(d))
    if L < 1e-9:
        return Baseline(0.0, np.zeros(3), True)
    return Baseline(L / C_M_PER_NS, _ecef_to_enu(siteA, d) / L, False)


def _theta(star, site, direction, jd):
    az, alt = _altaz(star.ra, star.dec, site, jd)
    cosang = np.clip(_enu_unit(az, alt) @ direction, -1.0, 1.0)
    return np.degrees(np.arccos(cosang)), alt


def separation_angles(starA: StarEntry, starB: StarEntry, siteA: Site, siteB: Site, utc) -> tuple[float, float]:
    """``(theta_A, theta_B)`` between each star and the outward baseline at its station.

    The two stations are a few hundred meters apart, so the ENU frame at
    Alice's station is used for both directions.
    """
    bl = baseline(siteA, siteB)
    if bl.coincident:
        raise ValidationError("stations coincide; separation angles undefined")
    jd = julian_date(utc)
    tA, _ = _theta(starA, siteA, bl.direction, jd)
    tB, _ = _theta(starB, siteB, -bl.direction, jd)
    return float(tA), float(tB)


def gamma_margins(budget: TimingBudget, theta_A, theta_B):
    """Spacelike-separation margins ``(Gamma_A, Gamma_B)`` in ns.

    Positive values mean the star photon reaching one station is spacelike
    separated from the remote measurement with that much slack.
    """
    gA = budget.baseline * np.cos(np.radians(theta_A)) + budget.offset_A
    gB = budget.baseline * np.cos(np.radians(theta_B)) + budget.offset_B
    if np.ndim(gA) == 0 and np.ndim(gB) == 0:
        return float(gA), float(gB)
    return gA, gB


# ---------------------------------------------------------------------------
# lookback time

def lookback(dA: float, dB: float, alpha: float) -> tuple[float, float]:
    """Past light-cone intersection ``(tau, separation)``.

    Distances in light-years give ``tau`` in years.
    """
    if not (dA > 0 and dB > 0):
        raise ValidationError("star distances must be positive")
    sep2 = dA * dA + dB * dB - 2 * dA * dB * math.cos(math.radians(alpha))
    sep = math.sqrt(max(sep2, 0.0))
    return (dA + dB + sep) / 2, sep


def lookback_sigma(dA: float, dB: float, alpha: float, sigma_dA: float, sigma_dB: float) -> float:
    """First-order error of :func:`lookback` from independent distance errors."""
    if sigma_dA < 0 or sigma_dB < 0:
        raise ValidationError("distance errors must be nonnegative")
    _, sep = lookback(dA, dB, alpha)
    c = math.cos(math.radians(alpha))
    if sep < 1e-12 * (dA + dB):
        # co-located sources: the separation term has no derivative; take
        # the symmetric limit of 1/2 per side
        gA = gB = 0.5
    else:
        gA = 0.5 * (1 + (dA - dB * c) / sep)
        gB = 0.5 * (1 + (dB - dA * c) / sep)
    return math.hypot(gA * sigma_dA, gB * sigma_dB)


def spacetime_report(starA: StarEntry, starB: StarEntry, siteA: Site, siteB: Site,
                     budget: TimingBudget, utc, alpha: float | None = None) -> SpacetimeReport:
    """Margins at ``utc`` plus lookback time; ``alpha`` defaults to the catalog separation."""
    tA, tB = separation_angles(starA, starB, siteA, siteB, utc)
    gA, gB = gamma_margins(budget, tA, tB)
    if alpha is None:
        alpha = angular_separation(starA, starB)
    tau, _ = lookback(starA.distance, starB.distance, alpha)
    sig = lookback_sigma(starA.distance, starB.distance, alpha, starA.sigma_distance, starB.sigma_distance)
    return SpacetimeReport(gA, gB, tA, tB, tau, sig, alpha)


# ---------------------------------------------------------------------------
# validity window

def _runs(mask):
    """Half-open ``[start, stop)`` index ranges where ``mask`` is True."""
    m = np.r_[False, mask, False].astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def validity_window(starA: StarEntry, starB: StarEntry, siteA: Site, siteB: Site,
                    budget: TimingBudget, date, theta_bounds=(17.0, 33.0),
                    min_altitude: float | None = 0.0, step_s: int = 1) -> list[tuple[datetime, datetime]]:
    """UTC intervals of ``date`` where both margins are positive and both angles are in bounds.

    The day is scanned every ``step_s`` seconds. Intervals are closed: both
    endpoints are sampled instants satisfying every condition. Stars below
    ``min_altitude`` are excluded unless it is None.
    """
    if isinstance(date, datetime):
        date = date.date()
    if not isinstance(date, Date):
        raise ValidationError(f"expected a date, got {date!r}")
    lo, hi = theta_bounds
    if not lo <= hi:
        raise ValidationError("theta bounds must be ordered")
    bl = baseline(siteA, siteB)
    if bl.coincident:
        return []
    t0 = datetime.combine(date, time(0), tzinfo=timezone.utc)
    secs = np.arange(0, 86400, step_s, dtype=float)
    jd = julian_date(t0.timestamp() + secs)
    tA, altA = _theta(starA, siteA, bl.direction, jd)
    tB, altB = _theta(starB, siteB, -bl.direction, jd)
    gA, gB = gamma_margins(budget, tA, tB)
    ok = (gA > 0) & (gB > 0) & (tA >= lo) & (tA <= hi) & (tB >= lo) & (tB <= hi)
    if min_altitude is not None:
        ok &= (altA > min_altitude) & (altB > min_altitude)
    return [(t0 + timedelta(seconds=float(secs[s])), t0 + timedelta(seconds=float(secs[e - 1])))
            for s, e in _runs(ok)]


# ---------------------------------------------------------------------------
# fixture files

def _read_csv(path, header):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or [h.strip() for h in head] != list(header):
            raise ValidationError(f"{path}: expected header {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def load_stars(path) -> dict[int, StarEntry]:
    """Read ``hip_id,ra_deg,dec_deg,dist_ly,sigma_ly``; keyed by HIP number."""
    out = {}
    for lineno, row in _read_csv(path, ("hip_id", "ra_deg", "dec_deg", "dist_ly", "sigma_ly")):
        try:
            star = StarEntry(int(row[0]), *map(float, row[1:]))
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        out[star.hip_id] = star
    return out


def load_sites(path) -> dict[str, Site]:
    """Read ``name,lat_deg,lon_deg,elev_m``; keyed by name."""
    out = {}
    for lineno, row in _read_csv(path, ("name", "lat_deg", "lon_deg", "elev_m")):
        try:
            out[row[0]] = Site(float(row[1]), float(row[2]), float(row[3]), row[0])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def load_budget(path) -> TimingBudget:
    with Path(path).open() as fh:
        try:
            return TimingBudget.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
