"""Command-line harness: pair-database building, speed benchmarks, Monte Carlo
campaigns of the four dynamic cases and quaternion-log replay.

Everything is emitted as CSV or JSON; nothing is plotted.

Timing methodology (also written into the benchmark metadata): each call is
timed individually with :func:`time.perf_counter` after one untimed warm-up
call on the same frame, with the garbage collector paused.  Means and 5 %
trimmed means are reported in microseconds.
"""

import argparse
import csv
import gc
import hashlib
import io
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from .attitude import quat_to_dcm, random_rotation
from .catalog import PairDatabase, build_kvector, build_pair_database, load_catalog
from .errors import StarTrackerError
from .frames import SPIKE, Frame
from .pipeline import PipelineConfig, new_state, run
from .pyramid import pyramid_identify
from .quatera import OmegaEstimate, QuaternionWindow, quatera_estimate
from .rsi import RsiConfig, RsiState, rsi_identify
from .simulator import (
    ARCSEC,
    EARTH_RATE,
    DEFAULT_CAMERA,
    case_config,
    generate_frame,
    run_scenario,
)

BENCH_SPIKES = tuple(range(11))
TIMING_METHOD = ("time.perf_counter around 2 calls per frame after one untimed warm-up call, "
                 "gc paused, mean and 5% trimmed mean in microseconds")
# sample periods of the two long cases, seconds
CASE_PERIODS = {1: (300.0, 600.0, 1800.0, 3600.0), 2: (300.0, 600.0, 1800.0, 3600.0), 3: (1.0,), 4: (1.0, 0.2)}


@dataclass
class Sky:
    catalog: object
    db: PairDatabase
    kv: object


def load_sky(catalog_path=None, db_path=None, magnitude=5.0, camera=DEFAULT_CAMERA):
    """Catalog plus pair database, loaded from ``db_path`` or built on the spot."""
    catalog = load_catalog(catalog_path, magnitude)
    if db_path is not None:
        db, kv = PairDatabase.load(db_path)
    else:
        db = build_pair_database(catalog, camera.fov_diagonal)
        kv = build_kvector(db)
    return Sky(catalog, db, kv)


# -- benchmarks ----------------------------------------------------------------------

@dataclass
class BenchmarkRecord:
    n_spikes: int
    pyramid_mean_us: float
    recursive_mean_us: float
    ratio: float  # pyramid_mean_us / recursive_mean_us
    n_runs: int
    pyramid_trimmed_us: float = 0.0
    recursive_trimmed_us: float = 0.0
    high_variance: bool = False
    id_digest: str = ""  # hash of every identification output, for determinism checks
    ratio_se: float = 0.0  # standard error of ``ratio``


def trimmed_mean(values, fraction=0.05):
    v = np.sort(np.asarray(values, dtype=float))
    cut = int(len(v) * fraction)
    return float(v[cut:len(v) - cut].mean()) if len(v) > 2 * cut else float(v.mean())


def _best_case_pair(sky, rng, n_spikes, min_stars=4):
    """Two frames at the same attitude (zero angular velocity) with fresh noise and spikes."""
    while True:
        c = quat_to_dcm(random_rotation(rng))
        prev, prev_truth = generate_frame(sky.catalog, DEFAULT_CAMERA, c, 0.0, rng, n_spikes=n_spikes)
        if np.count_nonzero(prev_truth != SPIKE) >= min_stars:
            break
    frame, _ = generate_frame(sky.catalog, DEFAULT_CAMERA, c, 1.0, rng, n_spikes=n_spikes)
    omega = OmegaEstimate(np.array([0.0, 0.0, 1.0]), 0.0, window_n=2, span=1.0)
    return RsiState(Frame(0.0, prev.observations, prev_truth), c, omega, 0.0), frame


# timed calls per sample, after one untimed warm-up call
TIMING_REPEAT = 2


def _timed(fn, repeat=TIMING_REPEAT):
    out = fn()
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return out, (time.perf_counter() - start) / repeat


def _ratio_se(num, den):
    """Delta-method standard error of ``mean(num) / mean(den)``."""
    n = len(num)
    if n < 2:
        return math.inf
    a, b = np.asarray(num), np.asarray(den)
    ma, mb = a.mean(), b.mean()
    var = (a.var(ddof=1) / ma ** 2 + b.var(ddof=1) / mb ** 2 - 2 * np.cov(a, b)[0, 1] / (ma * mb)) / n
    return float(ma / mb * math.sqrt(max(var, 0.0)))


def ratio_increases(records, n_se=2.0):
    """Consecutive spike counts whose ratio rises by more than ``n_se`` combined standard errors."""
    recs = sorted(records, key=lambda r: r.n_spikes)
    return [(a.n_spikes, b.n_spikes) for a, b in zip(recs, recs[1:])
            if b.ratio - a.ratio > n_se * math.hypot(a.ratio_se, b.ratio_se)]


def _bench(sky, n_runs, spikes, seed, config, worst):
    config = config or RsiConfig()
    records = []
    if n_runs <= 0:
        return records
    for n_spikes in spikes:
        rng = np.random.default_rng([seed, n_spikes, int(worst)])
        t_pyr, t_rsi = [], []
        digest = hashlib.sha256()
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(n_runs):
                state, frame = _best_case_pair(sky, rng, n_spikes)
                if worst:
                    # a rotation estimate orthogonal to the boresight that moves every
                    # star by a degree: nothing recurs, so RSI aborts and Pyramid runs
                    state.omega = OmegaEstimate(np.array([1.0, 0.0, 0.0]), math.radians(1.0), span=1.0)
                pyr = lambda: pyramid_identify(frame, sky.db, sky.kv, catalog=sky.catalog)

                def rec():
                    r = rsi_identify(state, frame, config, sky.db, sky.kv, sky.catalog)
                    return r if r.success else pyr()

                a, ta = _timed(pyr)
                b, tb = _timed(rec)
                t_pyr.append(ta)
                t_rsi.append(tb)
                digest.update(a.ids.tobytes())
                digest.update(b.ids.tobytes())
        finally:
            if gc_was_enabled:
                gc.enable()
        p, r = 1e6 * float(np.mean(t_pyr)), 1e6 * float(np.mean(t_rsi))
        records.append(BenchmarkRecord(n_spikes, p, r, p / r, n_runs, 1e6 * trimmed_mean(t_pyr),
                                       1e6 * trimmed_mean(t_rsi), n_runs == 1, digest.hexdigest()[:16],
                                       _ratio_se(t_pyr, t_rsi)))
    return records


def bench_best_case(sky, n_runs, spikes=BENCH_SPIKES, seed=0, config=None):
    """Pyramid alone against recursive identification on frame pairs where every star recurs."""
    return _bench(sky, n_runs, spikes, seed, config, worst=False)


def bench_worst_case(sky, n_runs, spikes=BENCH_SPIKES, seed=0, config=None):
    """Pyramid alone against a recursive attempt that aborts and then calls Pyramid."""
    return _bench(sky, n_runs, spikes, seed, config, worst=True)


# -- Monte Carlo campaigns -----------------------------------------------------------------

def case_pipeline_options(case_id):
    """Pipeline settings per case.

    Only the time-varying case uses the adaptive window; the others keep
    every quaternion of the run.  The stellar compass knows its spin rate.
    """
    if case_id == 4:
        return {"adapt": True, "n_max": 50}
    opts = {"adapt": False, "n_max": 100000}
    if case_id == 1:
        opts["known_rate"] = EARTH_RATE
    return opts


@dataclass
class CampaignReport:
    case_id: int
    sample_period: float
    summary: dict
    series: list = field(default_factory=list)
    runtime_s: float = 0.0  # wall clock, kept out of the serialized report

    SERIES_COLUMNS = ("t", "n", "axis_err_mean", "axis_err_sd", "axis_err_plus3sd", "rate_err_mean",
                      "rate_err_sd", "pyramid_rate", "window_mean")

    def series_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.SERIES_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.series)
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"case": self.case_id, "sample_period": self.sample_period,
                           "summary": self.summary, "series": self.series}, sort_keys=True)


_WORKER_SKY = None


def _init_worker(catalog_path, db_path, magnitude):
    global _WORKER_SKY
    _WORKER_SKY = load_sky(catalog_path, db_path, magnitude)


def _trial(args):
    case_id, sample_period, trial_seed, overrides, sky = args
    sky = sky or _WORKER_SKY
    cfg = case_config(case_id, sample_period, seed=trial_seed)
    opts = {**case_pipeline_options(case_id), **overrides}
    state = new_state(PipelineConfig(sky.catalog, sky.db, sky.kv, **opts))
    rep = run(state, run_scenario(cfg, sky.catalog))
    rows = [{"t": r["t"], "method": r["method"], "window_n": r["window_n"],
             "axis_err": r.get("axis_err_arcsec"), "rate_err": r.get("rate_err"),
             "mis": r.get("n_misidentified", 0)} for r in rep.rows]
    return {"rows": rows, "pyramid_fraction": rep.pyramid_fraction, "fallback_fraction": rep.fallback_fraction,
            "stats": asdict(rep.stats), "k": rep.k}


def _after_switch_pyramid_calls(rows, t_switch, period, n_frames=5):
    return sum(r["method"] == "pyramid" for r in rows if t_switch < r["t"] <= t_switch + n_frames * period + 1e-9)


def run_case(case_id, n_trials, sky, seed=0, sample_period=None, overrides=None, workers=1,
             catalog_path=None, db_path=None, magnitude=5.0):
    """Monte Carlo campaign of one case at one sample period.

    Trial ``i`` uses scenario seed ``seed * 1_000_000 + i``; results do not
    depend on ``workers``.
    """
    overrides = dict(overrides or {})
    period = sample_period if sample_period is not None else CASE_PERIODS[case_id][0]
    seeds = [seed * 1_000_000 + i for i in range(n_trials)]
    started = time.perf_counter()
    if workers > 1:
        jobs = [(case_id, period, s, overrides, None) for s in seeds]
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(catalog_path, db_path, magnitude)) as pool:
            trials = list(pool.map(_trial, jobs, chunksize=max(1, n_trials // (4 * workers))))
    else:
        trials = [_trial((case_id, period, s, overrides, sky)) for s in seeds]
    elapsed = time.perf_counter() - started
    return _aggregate(case_id, period, trials, elapsed)


def _aggregate(case_id, period, trials, elapsed):
    cfg = case_config(case_id, period)
    series = []
    if trials:
        times = [r["t"] for r in trials[0]["rows"]]
        for j, t in enumerate(times):
            rows = [tr["rows"][j] for tr in trials if j < len(tr["rows"])]
            ax = np.array([r["axis_err"] for r in rows if r["axis_err"] is not None])
            rt = np.array([r["rate_err"] for r in rows if r["rate_err"] is not None]) / ARCSEC
            series.append({
                "t": t, "n": len(ax),
                "axis_err_mean": float(ax.mean()) if len(ax) else None,
                "axis_err_sd": float(ax.std()) if len(ax) else None,
                "axis_err_plus3sd": float(ax.mean() + 3 * ax.std()) if len(ax) else None,
                "rate_err_mean": float(rt.mean()) if len(rt) else None,
                "rate_err_sd": float(rt.std()) if len(rt) else None,
                "pyramid_rate": sum(r["method"] == "pyramid" for r in rows) / len(rows),
                "window_mean": float(np.mean([r["window_n"] for r in rows])),
            })
    summary = {
        "n_trials": len(trials),
        "frames_per_trial": len(series),
        "pyramid_percent": 100 * float(np.mean([t["pyramid_fraction"] for t in trials])) if trials else 0.0,
        "fallback_percent": 100 * float(np.mean([t["fallback_fraction"] for t in trials])) if trials else 0.0,
        "misidentified": int(sum(r["mis"] for t in trials for r in t["rows"])),
        "id_failures": int(sum(t["stats"]["id_failures"] for t in trials)),
        "rsi_aborts": int(sum(t["stats"]["rsi_aborts"] for t in trials)),
    }
    final = [t["rows"][-1]["axis_err"] for t in trials if t["rows"] and t["rows"][-1]["axis_err"] is not None]
    if final:
        summary["final_axis_err_mean"] = float(np.mean(final))
        summary["final_axis_err_plus3sd"] = float(np.mean(final) + 3 * np.std(final))
    if case_id == 3:
        t_switch = cfg.duration / 2
        calls = [_after_switch_pyramid_calls(t["rows"], t_switch, period) for t in trials]
        summary["pyramid_after_switch_mean"] = float(np.mean(calls)) if calls else 0.0
        summary["pyramid_after_switch_exactly_2"] = float(np.mean([c == 2 for c in calls])) if calls else 0.0
    if case_id == 4:
        t0 = cfg.duration / 4
        dyn = [r for t in trials for r in t["rows"] if r["t"] >= t0 and r["method"] in ("pyramid", "recursive")]
        summary["dynamic_pyramid_percent"] = 100 * float(np.mean([r["method"] == "pyramid" for r in dyn])) \
            if dyn else 0.0
        summary["dynamic_window_mean"] = float(np.mean([r["window_n"] for r in dyn])) if dyn else 0.0
    return CampaignReport(case_id, period, summary, series, elapsed)


# -- replay ---------------------------------------------------------------------------------

def replay(rows, tolerance=1e-9, adapt=True, n_max=None):
    """QuateRA estimates along a quaternion log of ``(t, qx, qy, qz, qw)`` rows."""
    rows = list(rows)
    window = QuaternionWindow(n_max or max(2, len(rows)))
    out = []
    for t, *q in rows:
        window.push(float(t), np.array(q, dtype=float))
        rec = {"t": float(t), "axis_x": None, "axis_y": None, "axis_z": None, "rate": None, "window_n": window.n,
               "sigma3": None}
        if window.n >= 2:
            try:
                est, used = quatera_estimate(window, tolerance, adapt=adapt)
                rec.update(axis_x=float(est.axis[0]), axis_y=float(est.axis[1]), axis_z=float(est.axis[2]),
                           rate=est.magnitude, window_n=used.n, sigma3=float(est.sigma[2]))
            except StarTrackerError:
                pass
        out.append(rec)
    return out


# -- acceptance checks used by --check -------------------------------------------------------

def check_bench(kind, records):
    if not records:
        return []
    problems = []
    by = {r.n_spikes: r for r in records}
    if kind == "best":
        if 0 in by and by[0].ratio < 5:
            problems.append(f"best-case ratio at 0 spikes {by[0].ratio:.2f} < 5")
        if 10 in by and by[10].ratio < 3:
            problems.append(f"best-case ratio at 10 spikes {by[10].ratio:.2f} < 3")
        for a, b in ratio_increases(records):
            problems.append(f"best-case ratio rises from {a} to {b} spikes beyond noise")
    else:
        for r in records:
            if r.recursive_mean_us > 1.10 * r.pyramid_mean_us:
                problems.append(f"worst-case overhead at {r.n_spikes} spikes "
                                f"{r.recursive_mean_us / r.pyramid_mean_us:.3f} > 1.10")
    return problems


def axis_err_at(report, t):
    """Mean axis error (arcsec) at the last sample no later than ``t`` seconds."""
    best = None
    for row in report.series:
        if row["t"] <= t + 1e-9 and row["axis_err_mean"] is not None:
            best = row["axis_err_mean"]
    return best


def series_distinguishable(a, b, alpha=0.01):
    """Sample times where the mean axis errors of two campaigns differ significantly.

    Welch z-statistic per common sample time, Bonferroni-corrected over the
    compared times.
    """
    rows_b = {round(r["t"], 6): r for r in b.series}
    pairs = []
    for ra in a.series:
        rb = rows_b.get(round(ra["t"], 6))
        if rb and ra["axis_err_mean"] is not None and rb["axis_err_mean"] is not None and ra["n"] > 1 and rb["n"] > 1:
            pairs.append((ra, rb))
    if not pairs:
        return []
    crit = NormalDist().inv_cdf(1 - alpha / (2 * len(pairs)))
    out = []
    for ra, rb in pairs:
        se = math.sqrt(ra["axis_err_sd"] ** 2 / (ra["n"] - 1) + rb["axis_err_sd"] ** 2 / (rb["n"] - 1))
        diff = ra["axis_err_mean"] - rb["axis_err_mean"]
        if (se == 0 and diff != 0) or (se > 0 and abs(diff) / se > crit):
            out.append(ra["t"])
    return out


# the dynamic-segment Pyramid reliance at 1 Hz must exceed that at 5 Hz by this factor
RELIANCE_FACTOR = 4.0


def check_case4(reports):
    """Cross-rate checks of the time-varying case; needs the 1 Hz and 5 Hz reports."""
    by = {round(1 / r.sample_period): r.summary for r in reports if r.case_id == 4}
    if 1 not in by or 5 not in by:
        return []
    problems = []
    slow, fast = by[1]["dynamic_pyramid_percent"], by[5]["dynamic_pyramid_percent"]
    if not (slow > 0 and slow >= RELIANCE_FACTOR * fast):
        problems.append(f"case 4 Pyramid reliance {slow:.1f}% at 1 Hz vs {fast:.1f}% at 5 Hz "
                        f"is not a factor {RELIANCE_FACTOR:g} apart")
    for hz, target in ((1, 3.0), (5, 6.0)):
        w = by[hz]["dynamic_window_mean"]
        if abs(w - target) > 1:
            problems.append(f"case 4 mean window {w:.2f} at {hz} Hz not within 1 of {target:g}")
    return problems


def check_case(report):
    s = report.summary
    problems = []
    # recursive failures answered by Pyramid; the two initialization calls are not failures
    if report.case_id == 1 and s["fallback_percent"] >= 2:
        problems.append(f"case 1 Pyramid fallback rate {s['fallback_percent']:.2f}% >= 2%")
    if report.case_id == 1:
        for hours, limit in ((1, 5.0), (5, 1.0)):
            e = axis_err_at(report, hours * 3600.0)
            if e is None or e >= limit:
                problems.append(f"case 1 mean axis error after {hours} h is {e} arcsec, not < {limit:g}")
    if report.case_id == 2 and s["fallback_percent"] >= 1:
        problems.append(f"case 2 Pyramid fallback rate {s['fallback_percent']:.2f}% >= 1%")
    if report.case_id == 3:
        if s.get("final_axis_err_mean", math.inf) >= 10 or s.get("final_axis_err_plus3sd", math.inf) >= 30:
            problems.append("case 3 final axis error above 10 arcsec mean / 30 arcsec +3 sd")
        if s.get("pyramid_after_switch_exactly_2", 0) < 0.95:
            problems.append("case 3: fewer than 95% of trials call Pyramid exactly twice after the switch")
    if s["misidentified"]:
        problems.append(f"{s['misidentified']} misidentified stars")
    return problems


# -- CLI ----------------------------------------------------------------------------------------

def _write(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _records_csv(records, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(records)
    return buf.getvalue()


def _cmd_build_db(args):
    """Binary ``.npz`` (pairs and k-vector) unless the output is ``-`` or ends in ``.csv``."""
    catalog = load_catalog(args.catalog, args.magnitude)
    db = build_pair_database(catalog, DEFAULT_CAMERA.fov_diagonal)
    out = args.out or "pairs.npz"
    if out == "-" or out.endswith(".csv"):
        buf = io.StringIO()
        db.to_csv(buf)
        _write(buf.getvalue(), out)
    else:
        db.save(out, build_kvector(db))
        print(json.dumps({"stars": len(catalog), "pairs": len(db), "path": out}))
    return 0


def _cmd_bench(args):
    sky = load_sky(args.catalog, args.db, args.magnitude)
    fn = bench_best_case if args.kind == "best" else bench_worst_case
    records = [asdict(r) for r in fn(sky, args.runs, seed=args.seed)]
    if args.format == "json":
        _write(json.dumps({"kind": args.kind, "timing": TIMING_METHOD, "records": records}, indent=1) + "\n",
               args.out)
    else:
        _write(_records_csv(records, [f.name for f in BenchmarkRecord.__dataclass_fields__.values()]), args.out)
    if args.check:
        problems = check_bench(args.kind, [BenchmarkRecord(**r) for r in records])
        for p in problems:
            print("FAIL:", p, file=sys.stderr)
        return 1 if problems else 0
    return 0


def _cmd_run_case(args):
    sky = load_sky(args.catalog, args.db, args.magnitude)
    periods = [args.period] if args.period else CASE_PERIODS[args.case]
    reports = [run_case(args.case, args.trials, sky, seed=args.seed, sample_period=p, workers=args.workers,
                        catalog_path=args.catalog, db_path=args.db, magnitude=args.magnitude) for p in periods]
    if args.format == "json":
        _write("[" + ",\n".join(r.to_json() for r in reports) + "]\n", args.out)
    else:
        summaries = [{"case": r.case_id, "sample_period": r.sample_period, **r.summary} for r in reports]
        cols = list(dict.fromkeys(k for s in summaries for k in s))
        text = _records_csv(summaries, cols)
        if args.series:
            text += "".join(f"\n# series case={r.case_id} sample_period={r.sample_period}\n" + r.series_csv()
                            for r in reports)
        _write(text, args.out)
    if args.check:
        problems = [p for r in reports for p in check_case(r)] + check_case4(reports)
        for p in problems:
            print("FAIL:", p, file=sys.stderr)
        return 1 if problems else 0
    return 0


def _cmd_replay(args):
    with open(args.log) as fh:
        reader = csv.reader(fh)
        rows = [[float(x) for x in row[:5]] for row in reader if row and not row[0].lstrip().startswith(("#", "t"))]
    out = replay(rows, args.tolerance, adapt=not args.no_adapt)
    if args.format == "json":
        _write(json.dumps(out) + "\n", args.out)
    else:
        _write(_records_csv(out, list(out[0]) if out else ["t"]), args.out)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--catalog", help="catalog CSV (id, ra_deg, dec_deg, vmag); bundled Hipparcos subset by default")
    common.add_argument("--db", help="pair database written by build-db")
    common.add_argument("--magnitude", type=float, default=5.0, help="magnitude threshold")
    common.add_argument("--out", help="output file (stdout by default)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--check", action="store_true", help="exit nonzero when an acceptance threshold is violated")

    p = argparse.ArgumentParser(prog="quatera-rsi", description="Star-tracker identification and angular-velocity harness (CSV/JSON output).")
    sub = p.add_subparsers(dest="command", required=True)
    b = sub.add_parser("build-db", parents=[common], help="build and save the star-pair database")
    b.set_defaults(func=_cmd_build_db)
    b = sub.add_parser("bench", parents=[common], help="best- or worst-case speed benchmark")
    b.add_argument("kind", choices=("best", "worst"))
    b.add_argument("--runs", type=int, default=1000, help="timed frame pairs per spike count")
    b.set_defaults(func=_cmd_bench)
    b = sub.add_parser("run-case", parents=[common], help="Monte Carlo campaign of a dynamic case")
    b.add_argument("case", type=int, choices=(1, 2, 3, 4))
    b.add_argument("--trials", type=int, default=1000)
    b.add_argument("--period", type=float, help="sample period in seconds (default: every period of the case)")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--series", action="store_true", help="append per-time error series to the CSV output")
    b.set_defaults(func=_cmd_run_case)
    b = sub.add_parser("replay", parents=[common], help="run QuateRA over a quaternion log (t,qx,qy,qz,qw)")
    b.add_argument("log")
    b.add_argument("--tolerance", type=float, default=1e-9, help="sigma3 tolerance of the adaptive window")
    b.add_argument("--no-adapt", action="store_true")
    b.set_defaults(func=_cmd_replay)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
