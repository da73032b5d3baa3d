"""Config-driven batch commands and report emission.

Each command takes a parsed JSON config (a dict), a base directory for
resolving relative paths and an output directory, and returns a report dict.
Reports are rendered with sorted keys and 12 significant digits so identical
inputs produce byte-identical files.

File references in a config are either plain paths (relative to the config
file), ``@data/NAME`` for fixtures shipped with the package, or objects
``{"path": ..., "sha256": ...}`` whose content hash is checked before use.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .chstats import (BiasMonitor, CountsTable, EfficiencyBudget, bias_estimate, ch_j, element_product,
                      heralding_budget, hoeffding_consistency, hoeffding_log10_tail, nosignaling_ztests)
from .cosmicrng import extract_bits, ratio_snr, read_timetags, simulate_arrivals, write_bits
from .errors import ValidationError
from .pbr import AnalysisResult, Block, BlockPlan, BlockResult, run_blocked
from .polytopes import LHV, NS, Behavior, JointSettingDistribution, ml_no_signaling
from .qsim import QuantumModel, TrialStream, model_behavior, simulate_trials
from . import spacetime as st

SIG_DIGITS = 12
DATA_PREFIX = "@data/"


# ---------------------------------------------------------------------------
# rendering and provenance

def _normalize(obj):
    """Make ``obj`` JSON-ready: round floats, stringify non-finite values."""
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _normalize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return float(f"{x:.{SIG_DIGITS}g}")
    if isinstance(obj, datetime):
        return obj.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return obj


def render_report(report: dict) -> str:
    return json.dumps(_normalize(report), sort_keys=True, indent=2) + "\n"


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON encoding of the effective config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_path(name: str) -> Path:
    """Location of a fixture shipped in the package ``data`` directory."""
    return Path(str(resources.files("cosmicbell") / "data" / name))


def resolve_file(ref, base_dir) -> Path:
    """Turn a config file reference into an existing path, checking its hash if given."""
    expected = None
    if isinstance(ref, dict):
        if "path" not in ref:
            raise ValidationError(f"file reference {ref!r} has no 'path'")
        expected = ref.get("sha256")
        ref = ref["path"]
    if not isinstance(ref, str):
        raise ValidationError(f"bad file reference {ref!r}")
    if ref.startswith(DATA_PREFIX):
        path = data_path(ref[len(DATA_PREFIX):])
    else:
        path = Path(ref)
        if not path.is_absolute():
            path = Path(base_dir) / path
    if not path.is_file():
        raise ValidationError(f"referenced file does not exist: {path}")
    if expected is not None:
        got = file_sha256(path)
        if got != expected.lower():
            raise ValidationError(f"hash mismatch for {path}: expected {expected}, got {got}")
    return path


def _require(config, key, command):
    if key not in config:
        raise ValidationError(f"{command} config is missing required key {key!r}")
    return config[key]


def _seed(config, command) -> int:
    seed = _require(config, "seed", command)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ValidationError(f"seed must be a nonnegative integer, got {seed!r}")
    return seed


def _provenance(command, config, seed=None):
    return {"command": command, "config_sha256": config_hash(config), "seed": seed, "version": __version__}


# ---------------------------------------------------------------------------
# ingestion

def _csv_rows(path, header):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None:
            raise ValidationError(f"{path}: empty file, expected header {','.join(header)!r}")
        if [h.strip() for h in head] != list(header):
            raise ValidationError(f"{path}:1: expected header {','.join(header)!r}, got {','.join(head)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [int(v) for v in row]
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-integer field in {row!r}") from None
            yield lineno, values


def ingest_counts(path) -> CountsTable:
    """Read an ``x,y,a,b,count`` file. Missing cells count as zero; repeats are errors."""
    n = np.zeros((2, 2, 2, 2), dtype=np.int64)
    seen = {}
    for lineno, (x, y, a, b, c) in _csv_rows(path, ("x", "y", "a", "b", "count")):
        if any(v not in (0, 1) for v in (x, y, a, b)):
            raise ValidationError(f"{path}:{lineno}: x, y, a, b must be 0 or 1")
        if c < 0:
            raise ValidationError(f"{path}:{lineno}: negative count")
        if (x, y, a, b) in seen:
            raise ValidationError(f"{path}:{lineno}: cell repeats line {seen[(x, y, a, b)]}")
        seen[(x, y, a, b)] = lineno
        n[a, b, x, y] = c
    if not seen:
        raise ValidationError(f"{path}: no data rows")
    return CountsTable(n)


def ingest_trials(path) -> TrialStream:
    """Read an ``index,period,x,y,a,b`` file with strictly increasing indices."""
    cols = []
    last = None
    for lineno, row in _csv_rows(path, ("index", "period", "x", "y", "a", "b")):
        if any(v not in (0, 1) for v in row[2:]):
            raise ValidationError(f"{path}:{lineno}: x, y, a, b must be 0 or 1")
        if last is not None and row[0] <= last:
            raise ValidationError(f"{path}:{lineno}: trial index {row[0]} not above previous {last}")
        last = row[0]
        cols.append(row)
    if not cols:
        raise ValidationError(f"{path}: no data rows")
    arr = np.asarray(cols, dtype=np.int64)
    return TrialStream(*arr.T)


def write_trials(path, trials: TrialStream):
    arr = np.column_stack([trials.index, trials.period, trials.x, trials.y, trials.a, trials.b])
    with Path(path).open("w", newline="") as fh:
        fh.write("index,period,x,y,a,b\n")
        np.savetxt(fh, arr, fmt="%d", delimiter=",")


def write_counts(path, counts: CountsTable):
    with Path(path).open("w", newline="") as fh:
        fh.write("x,y,a,b,count\n")
        for x in (0, 1):
            for y in (0, 1):
                for a in (0, 1):
                    for b in (0, 1):
                        fh.write(f"{x},{y},{a},{b},{counts.n[a, b, x, y]}\n")


def _load_json_or_inline(value, base_dir, key):
    """A config value that is either inline JSON or a reference to a JSON file."""
    if isinstance(value, (str, dict)) and not (isinstance(value, dict) and "path" not in value):
        path = resolve_file(value, base_dir)
        with path.open() as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from None
        return data.get(key, data) if isinstance(data, dict) else data
    return value


# ---------------------------------------------------------------------------
# analyze

def period_biases(periods) -> dict:
    """Per-period ``(epsA, epsB)`` from explicit values or ratio/SNR monitors."""
    out = {}
    for p in periods:
        pid = int(_require(p, "id", "period"))
        if pid in out:
            raise ValidationError(f"period {pid} listed twice")
        eps = []
        for side in ("A", "B"):
            if f"eps{side}" in p:
                eps.append(float(p[f"eps{side}"]))
            elif f"monitor_{side}" in p:
                m = p[f"monitor_{side}"]
                eps.append(bias_estimate(BiasMonitor(float(m["r"]), float(m["snr"]))))
            else:
                raise ValidationError(f"period {pid}: need eps{side} or monitor_{side}")
        out[pid] = tuple(eps)
    return out


def _consistency(periods, biases):
    out = {}
    for p in periods:
        pid = int(p["id"])
        row = {}
        for i, side in enumerate(("A", "B")):
            key = f"inputs_{side}"
            if key in p:
                n0, n1 = (int(v) for v in p[key])
                eps = biases[pid][i]
                row[side] = {"n0": n0, "n1": n1, "c_lower": hoeffding_consistency(n0, n1, eps),
                             "log10_one_minus_c": hoeffding_log10_tail(n0, n1, eps)}
        if row:
            out[pid] = row
    return out


def _pbr_section(result: AnalysisResult) -> dict:
    return {
        "p_value_bound": result.p_value_bound,
        "log_product": result.log_product,
        "log10_p": result.log10_p,
        "blocks": [{"start": r.block.start, "stop": r.block.stop, "period": r.block.period,
                    "gain": r.gain, "log_contribution": r.log_contribution, "trivial": r.trivial}
                   for r in result.per_block],
    }


def _block_plan(trials: TrialStream, config, biases) -> BlockPlan:
    if "blocks_per_period" in config:
        per = {int(k): int(v) for k, v in config["blocks_per_period"].items()}
        blocks = []
        periods = trials.period
        edges = np.flatnonzero(np.diff(periods)) + 1
        starts, stops = np.r_[0, edges], np.r_[edges, len(periods)]
        for s, e in zip(starts, stops):
            pid = int(periods[s])
            if pid not in per:
                raise ValidationError(f"blocks_per_period has no entry for period {pid}")
            cuts = np.linspace(s, e, per[pid] + 1).round().astype(int)
            blocks += [Block(int(a), int(b), pid) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]
        return BlockPlan(tuple(blocks), biases)
    size = int(config.get("block_size", 1_500_000))
    return BlockPlan.split_periods(trials.period, size, biases)


def cmd_analyze(config: dict, base_dir=".", out_dir=None) -> dict:
    """CH statistic, no-signaling tests, bias bookkeeping and PBR p-value bounds."""
    periods = _load_json_or_inline(config.get("periods", []), base_dir, "periods")
    biases = period_biases(periods)
    hypothesis = config.get("hypothesis", LHV)
    if hypothesis not in (LHV, NS):
        raise ValidationError(f"unknown hypothesis {hypothesis!r}")

    trials = None
    if isinstance(config.get("trials"), dict) and "simulate" in config["trials"]:
        # synthetic analysis: the stream is generated in memory
        trials, _, _ = simulate_stream(config["trials"]["simulate"], base_dir)
        counts = trials.counts()
    elif "trials" in config:
        trials = ingest_trials(resolve_file(config["trials"], base_dir))
        counts = trials.counts()
    elif "counts" in config:
        counts = ingest_counts(resolve_file(config["counts"], base_dir))
    else:
        raise ValidationError("analyze config needs 'counts' or 'trials'")
    if trials is not None:
        unknown = sorted(set(np.unique(trials.period).tolist()) - set(biases))
        if unknown:
            raise ValidationError(f"trial stream references unknown period id(s) {unknown}")

    report = {
        "provenance": _provenance("analyze", config, config.get("seed")),
        "total_trials": counts.total,
        "setting_totals": counts.setting_totals,
        "J": ch_j(counts),
        "z_tests": [{"label": z.label, "z": z.z, "p_value": z.p_value, "degenerate": z.degenerate}
                    for z in nosignaling_ztests(counts)],
        "biases": {pid: {"epsA": e[0], "epsB": e[1]} for pid, e in sorted(biases.items())},
        "consistency": _consistency(periods, biases),
        "hypothesis": hypothesis,
    }
    if trials is None:
        # a bare counts table is a single block with no earlier data: the
        # score has to be fixed in advance, so it is the trivial one
        blk = Block(0, counts.total, int(counts.period or 0))
        res = AnalysisResult(1.0, 0.0, (BlockResult(blk, 0.0, 0.0, True),))
        report["pbr"] = {"with_bias": _pbr_section(res), "zero_bias": _pbr_section(res), "mode": "counts"}
    else:
        plan = _block_plan(trials, config, biases)
        report["pbr"] = {
            "mode": "trials",
            "with_bias": _pbr_section(run_blocked(trials, plan, hypothesis)),
            "zero_bias": _pbr_section(run_blocked(trials, plan, hypothesis, zero_bias=True)),
        }
    if "efficiency" in config:
        report["efficiency"] = efficiency_report(_load_json_or_inline(config["efficiency"], base_dir, "efficiency"))
    return report


def efficiency_report(eff: dict) -> dict:
    """Source transmittance from element factors and per-side heralding products."""
    so_elements = element_product((float(e["value"]), int(e.get("count", 1))) for e in eff["source_elements"])
    eta_so = float(eff.get("eta_so", so_elements))
    out = {"eta_so_from_elements": so_elements}
    for side in ("alice", "bob"):
        s = eff[side]
        budget = EfficiencyBudget(float(s["eta_sc"]), eta_so, float(eff["eta_fiber"]),
                                  float(s["eta_m"]), float(s["eta_det"]))
        out[side] = {"heralding": heralding_budget(budget)}
    return out


# ---------------------------------------------------------------------------
# simulate

def _behavior_from_config(model: dict, base_dir) -> Behavior:
    if "counts" in model:
        counts = ingest_counts(resolve_file(model["counts"], base_dir))
        if model.get("fit", "no_signaling") == "no_signaling":
            return ml_no_signaling(counts, max_iter=int(model.get("max_iter", 100_000)))
        return counts.frequencies()
    if "state_angle_deg" in model:
        qm = QuantumModel.from_state_angle(float(model["state_angle_deg"]),
                                           anglesA=tuple(model["anglesA"]), anglesB=tuple(model["anglesB"]),
                                           etaA=float(model.get("etaA", 1.0)), etaB=float(model.get("etaB", 1.0)),
                                           p_dark=float(model.get("p_dark", 0.0)))
    else:
        qm = QuantumModel(float(_require(model, "r", "model")), tuple(model["anglesA"]), tuple(model["anglesB"]),
                          float(model.get("etaA", 1.0)), float(model.get("etaB", 1.0)),
                          float(model.get("p_dark", 0.0)))
    return model_behavior(qm)


def simulate_stream(config: dict, base_dir=".") -> tuple[TrialStream, Behavior, list]:
    """Sample the trial stream described by a simulate config, period by period."""
    seed = _seed(config, "simulate")
    p = _behavior_from_config(_require(config, "model", "simulate"), base_dir)
    periods = config.get("periods") or [{"id": 1, "n_trials": _require(config, "n_trials", "simulate")}]
    children = np.random.SeedSequence(seed).spawn(len(periods))
    streams, summary = [], []
    start = 0
    for spec, child in zip(periods, children):
        pid = int(spec.get("id", 1))
        n = int(_require(spec, "n_trials", "period"))
        if n <= 0:
            raise ValidationError(f"period {pid}: n_trials must be positive, got {n}")
        q = JointSettingDistribution.from_marginals(float(spec.get("qa0", 0.5)), float(spec.get("qb0", 0.5)))
        # an integer child seed leaves simulate_trials' own chunk spawning intact
        child_seed = int(child.generate_state(1, dtype=np.uint64)[0])
        tr = simulate_trials(p, q, n, child_seed, period=pid, start_index=start)
        start += n
        streams.append(tr)
        c = tr.counts()
        summary.append({"id": pid, "n_trials": n,
                        "J": ch_j(c) if np.all(c.setting_totals > 0) else None})
    return TrialStream.concat(streams), p, summary


def cmd_simulate(config: dict, base_dir=".", out_dir=None) -> dict:
    """Sample a trial stream and write ``trials.csv`` and ``counts.csv``."""
    trials, p, summary = simulate_stream(config, base_dir)
    counts = trials.counts()
    report = {
        "provenance": _provenance("simulate", config, config["seed"]),
        "behavior": p.flat,
        "periods": summary,
        "total_trials": len(trials),
    }
    if np.all(counts.setting_totals > 0):
        report["J"] = ch_j(counts)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if config.get("write_trials", True):
            write_trials(out / "trials.csv", trials)
        write_counts(out / "counts.csv", counts)
        report["files"] = sorted(f.name for f in out.glob("*.csv"))
    return report


# ---------------------------------------------------------------------------
# spacetime

def _parse_utc(s) -> datetime:
    try:
        t = datetime.fromisoformat(str(s).replace("Z", "+00:00"))
    except ValueError:
        raise ValidationError(f"bad UTC timestamp {s!r}") from None
    return t.replace(tzinfo=timezone.utc) if t.tzinfo is None else t.astimezone(timezone.utc)


def cmd_spacetime(config: dict, base_dir=".", out_dir=None) -> dict:
    """Alt/az, margins, lookback times and validity windows for each run."""
    stars = st.load_stars(resolve_file(_require(config, "stars", "spacetime"), base_dir))
    sites = st.load_sites(resolve_file(_require(config, "sites", "spacetime"), base_dir))
    budget = st.load_budget(resolve_file(_require(config, "budget", "spacetime"), base_dir))
    name_A, name_B = config.get("site_A", "alice"), config.get("site_B", "bob")
    for name in (name_A, name_B):
        if name not in sites:
            raise ValidationError(f"unknown site {name!r}; have {sorted(sites)}")
    siteA, siteB = sites[name_A], sites[name_B]
    runs = _load_json_or_inline(_require(config, "runs", "spacetime"), base_dir, "periods")
    bounds = tuple(config.get("theta_bounds", (17.0, 33.0)))
    scan = bool(config.get("validity_window", True))
    bl = st.baseline(siteA, siteB)
    out_runs = []
    for run in runs:
        rid = run.get("id")
        try:
            sa, sb = (stars[int(h)] for h in run["stars"])
        except KeyError as exc:
            raise ValidationError(f"run {rid}: star {exc} not in catalog") from None
        times = [_parse_utc(t) for t in run.get("times", [run.get("start_utc"), run.get("end_utc")]) if t]
        alpha_cat = st.angular_separation(sa, sb)
        alpha = float(run.get("alpha_deg", alpha_cat))
        tau, sep = st.lookback(sa.distance, sb.distance, alpha)
        entry = {
            "id": rid, "stars": [sa.hip_id, sb.hip_id],
            "alpha_catalog": alpha_cat, "alpha_used": alpha,
            "tau_AB": tau, "sigma_tau": st.lookback_sigma(sa.distance, sb.distance, alpha,
                                                          sa.sigma_distance, sb.sigma_distance),
            "star_separation_ly": sep,
            "epochs": [],
        }
        for t in times:
            rep = st.spacetime_report(sa, sb, siteA, siteB, budget, t, alpha)
            azA, altA = st.radec_to_altaz(sa, siteA, t)
            azB, altB = st.radec_to_altaz(sb, siteB, t)
            entry["epochs"].append({"utc": t, "az_A": azA, "alt_A": altA, "az_B": azB, "alt_B": altB,
                                    "theta_A": rep.theta_A, "theta_B": rep.theta_B,
                                    "gamma_A": rep.gamma_A, "gamma_B": rep.gamma_B})
        if scan and times:
            windows = st.validity_window(sa, sb, siteA, siteB, budget, times[0].date(), bounds)
            entry["validity_windows"] = [[a, b] for a, b in windows]
        out_runs.append(entry)
    return {
        "provenance": _provenance("spacetime", config, config.get("seed")),
        "baseline_light_ns": bl.length,
        "baseline_direction_enu": bl.direction,
        "budget": budget.to_dict(),
        "theta_bounds": list(bounds),
        "runs": out_runs,
    }


# ---------------------------------------------------------------------------
# rng

def _rng_source(spec, base_dir, seed):
    """Events and observation time (s) from a time-tag file or a simulation block."""
    if "timetags" in spec:
        ev = read_timetags(resolve_file(spec["timetags"], base_dir))
        duration = float(spec.get("duration_s", (ev.duration_ps + 1) / 1e12 if len(ev) else 0.0))
        return ev, duration
    sim = spec.get("simulate")
    if sim is None:
        raise ValidationError("rng source needs 'timetags' or 'simulate'")
    duration = float(_require(sim, "duration_s", "simulate"))
    ev = simulate_arrivals(float(sim.get("rate_signal", 0.0)), float(sim.get("rate_background", 0.0)),
                           duration, seed)
    return ev, duration


def cmd_rng(config: dict, base_dir=".", out_dir=None) -> dict:
    """Digitize on-source (and optional dark-sky) detections into bits."""
    seed = _seed(config, "rng")
    clock = float(config.get("clock_period_ns", 500.0))
    window = float(config.get("window_ns", 133.2))
    dead = float(config.get("deadtime_us", 5.0))
    s_on, s_dark = np.random.SeedSequence(seed).spawn(2)
    as_int = lambda s: int(s.generate_state(1, dtype=np.uint64)[0])
    ev, dur = _rng_source(_require(config, "onsource", "rng"), base_dir, as_int(s_on))
    bits = extract_bits(ev, clock, window, dead)
    report = {
        "provenance": _provenance("rng", config, seed),
        "events": len(ev),
        "duration_s": dur,
        "bits": len(bits),
        "bit_rate_hz": len(bits) / dur if dur > 0 else None,
        "ones": int(np.sum(bits.bit)),
        "min_spacing_ps": int(np.min(np.diff(bits.timestamp))) if len(bits) > 1 else None,
    }
    if "dark" in config and len(bits):
        dev, ddur = _rng_source(config["dark"], base_dir, as_int(s_dark))
        dbits = extract_bits(dev, clock, window, dead)
        mon = ratio_snr(bits, dbits, dur, ddur)
        report["monitor"] = {"r": mon.r, "snr": mon.snr, "flags": list(mon.flags), "epsilon": bias_estimate(mon)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_bits(out / "bits.csv", bits)
        report["files"] = ["bits.csv"]
    return report


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "spacetime": cmd_spacetime, "rng": cmd_rng}


def run_command(name: str, config_path, out_dir, seed: int | None = None) -> dict:
    """Load a config file, apply overrides, run the command and write ``report.json``."""
    config_path = Path(config_path)
    if not config_path.is_file():
        raise ValidationError(f"config file not found: {config_path}")
    try:
        config = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{config_path}: {exc}") from None
    if not isinstance(config, dict):
        raise ValidationError(f"{config_path}: top level must be an object")
    if seed is not None:
        config["seed"] = seed
    report = COMMANDS[name](config, config_path.parent, out_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(render_report(report))
    return report
