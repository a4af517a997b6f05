"""Frame-by-frame loop combining lost-in-space, recursive identification and
angular-velocity estimation.

For every frame with more than three observations:

* while fewer than two frames have been identified, use Pyramid;
* otherwise try the recursive identifier and fall back to Pyramid on abort;
* solve for the attitude, append its quaternion to the window and, once
  two frames are in, refresh the angular-velocity estimate.

A frame whose identification fails leaves the valid-frame counter unchanged.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attitude import solve_wahba
from .errors import DegenerateGeometryError, StarTrackerError
from .frames import Frame
from .pyramid import DEFAULT_TOLERANCE, pyramid_identify
from .quatera import DEFAULT_N_MAX, SIGMA3_TOLERANCE, OmegaEstimate, QuaternionWindow, quatera_estimate
from .rsi import RsiConfig, RsiState, rsi_identify
from .simulator import DEFAULT_CAMERA

ARCSEC = math.pi / 180.0 / 3600.0
REPORT_COLUMNS = ("t", "method", "n_identified", "n_spikes_discarded", "axis_err_arcsec", "rate_err", "window_n")


@dataclass
class PipelineConfig:
    """Static inputs of a run.

    ``known_rate`` replaces the estimated rotation rate (the axis is still
    estimated), as for a camera fixed to a planet of known spin.
    """

    catalog: object
    db: object
    kv: object
    camera: object = DEFAULT_CAMERA
    rsi: RsiConfig = field(default_factory=RsiConfig)
    pair_tolerance: float = DEFAULT_TOLERANCE
    n_max: int = DEFAULT_N_MAX
    adapt: bool = True
    sigma3_tolerance: float = SIGMA3_TOLERANCE
    known_rate: Optional[float] = None
    pyramid_order: str = "lexicographic"


@dataclass
class Stats:
    pyramid_calls: int = 0
    pyramid_successes: int = 0
    rsi_calls: int = 0
    rsi_successes: int = 0
    rsi_aborts: int = 0
    frames_skipped: int = 0
    id_failures: int = 0
    abort_reasons: dict = field(default_factory=dict)


@dataclass
class PipelineState:
    config: PipelineConfig
    k: int = 0
    window: QuaternionWindow = None
    rsi_state: Optional[RsiState] = None
    last_estimate: Optional[OmegaEstimate] = None
    stats: Stats = field(default_factory=Stats)

    def __post_init__(self):
        if self.window is None:
            self.window = QuaternionWindow(self.config.n_max)


def new_state(config):
    return PipelineState(config)


def _estimate(state):
    cfg = state.config
    try:
        est, used = quatera_estimate(state.window, cfg.sigma3_tolerance, adapt=cfg.adapt)
    except StarTrackerError:
        return None, None
    if cfg.known_rate is not None:
        est = OmegaEstimate(est.axis, cfg.known_rate, est.phi0, np.zeros((2, 2)), est.window_n, est.sigma,
                            est.frequency_warning, est.span)
    return est, used


def _failed(state, report):
    # the recursive identifier needs a successfully identified previous frame
    state.stats.id_failures += 1
    state.rsi_state = None
    report["method"] = "failed"
    return state, report


def step(state, frame):
    """Process one frame; returns ``(state, report)``.  ``state`` is updated in place."""
    cfg = state.config
    st = state.stats
    n = len(frame)
    report = {"t": frame.time, "method": "skipped", "n_identified": 0, "n_spikes_discarded": 0,
              "window_n": state.window.n, "abort_reason": ""}
    if n <= 3:
        st.frames_skipped += 1
        return state, report

    result = None
    if state.k > 1 and state.rsi_state is not None:
        st.rsi_calls += 1
        r = rsi_identify(state.rsi_state, frame, cfg.rsi, cfg.db, cfg.kv, cfg.catalog, cfg.camera)
        if r.success:
            result = r
            st.rsi_successes += 1
        else:
            st.rsi_aborts += 1
            st.abort_reasons[r.reason] = st.abort_reasons.get(r.reason, 0) + 1
            report["abort_reason"] = r.reason
    if result is None:
        st.pyramid_calls += 1
        result = pyramid_identify(frame, cfg.db, cfg.kv, cfg.pair_tolerance, order=cfg.pyramid_order,
                                  catalog=cfg.catalog)
        if result.success:
            st.pyramid_successes += 1
    report["method"] = result.method
    if not result.success:
        return _failed(state, report)

    sol = result.extra.get("solution")
    idx, ids = result.identified()
    if sol is None:
        try:
            sol = solve_wahba(frame.observations[idx], cfg.catalog.vectors(ids))
        except DegenerateGeometryError:
            return _failed(state, report)

    state.window.push(frame.time, sol.quaternion)
    state.k += 1
    if state.k > 1:
        est, used = _estimate(state)
        if est is not None:
            state.last_estimate = est
            report["window_n"] = used.n
            report["frequency_warning"] = est.frequency_warning
    labelled = Frame(frame.time, frame.observations, result.ids)
    if state.last_estimate is not None and state.k > 1:
        state.rsi_state = RsiState(labelled, sol.dcm, state.last_estimate, frame.time)
    report.update(n_identified=result.n_identified, n_spikes_discarded=result.n_spikes, attitude=sol.dcm,
                  quaternion=sol.quaternion, ids=result.ids)
    if state.last_estimate is not None:
        report["omega"] = state.last_estimate
    return state, report


@dataclass
class RunReport:
    rows: list
    stats: Stats
    k: int

    @property
    def n_frames(self):
        return len(self.rows)

    @property
    def pyramid_fraction(self):
        """Share of identified frames that needed Pyramid, initialization included."""
        ident = [r for r in self.rows if r["method"] in ("pyramid", "recursive")]
        return sum(r["method"] == "pyramid" for r in ident) / len(ident) if ident else 0.0

    @property
    def fallback_fraction(self):
        """Share of frames after initialization that fell back to Pyramid."""
        ident = [r for r in self.rows if r["method"] in ("pyramid", "recursive")][2:]
        return sum(r["method"] == "pyramid" for r in ident) / len(ident) if ident else 0.0

    def table(self):
        return [{c: r.get(c) for c in REPORT_COLUMNS} for r in self.rows]

    def to_csv(self, out=None):
        buf = out or io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.table():
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue() if out is None else None

    def to_json(self):
        return json.dumps({"rows": self.table(), "stats": vars(self.stats), "k": self.k,
                           "pyramid_fraction": self.pyramid_fraction,
                           "fallback_fraction": self.fallback_fraction}, sort_keys=True)


def _axis_error(axis, omega_true):
    w = np.linalg.norm(omega_true)
    if w == 0:
        return None
    c = abs(float(np.dot(axis, omega_true / w)))
    # axis compared as a line: the direction is arbitrary when the rate is zero
    return math.atan2(math.sqrt(max(0.0, 1 - c * c)), c) / ARCSEC


def run(state, frames, max_frames=None, max_time=None, max_valid=None):
    """Feed ``frames`` through :func:`step` until the stream or a stop criterion ends.

    Items of ``frames`` may be :class:`Frame` objects or simulator truth
    samples (anything with ``frame``, ``truth_ids`` and ``omega``), in
    which case errors against the truth are reported as well.
    """
    rows = []
    for item in frames:
        truth = None
        if not isinstance(item, Frame):
            truth, item = item, item.frame
        if max_time is not None and item.time > max_time:
            break
        _, rep = step(state, item)
        if truth is not None:
            ids = rep.pop("ids", None)
            if ids is not None:
                ok = ids >= 0
                rep["n_misidentified"] = int(np.count_nonzero(ids[ok] != truth.truth_ids[ok]))
            est = rep.get("omega")
            if est is not None:
                rep["axis_err_arcsec"] = _axis_error(est.axis, truth.omega)
                rep["rate_err"] = abs(est.magnitude - float(np.linalg.norm(truth.omega)))
        else:
            rep.pop("ids", None)
        rows.append(rep)
        if max_frames is not None and len(rows) >= max_frames:
            break
        if max_valid is not None and state.k >= max_valid:
            break
    return RunReport(rows, state.stats, state.k)
