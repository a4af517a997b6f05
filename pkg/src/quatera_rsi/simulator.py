"""Virtual star tracker and attitude scenarios with ground truth.

Observations are perturbed directly on the unit sphere; no detector image is
rendered.  Scenario kinds:

``stellar_compass``  camera fixed to a rotating planet, boresight at the zenith
``geo``              constant sidereal-rate spin about a random body axis
``bang_bang``        single-axis rest-to-rest slew under bang-bang control
``time_varying``     inertial rate that drifts in direction and magnitude
"""

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .attitude import (
    dcm_to_quat,
    delta_c,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_dcm,
    random_rotation,
    random_unit_vector,
)
from .errors import DomainError, InvalidInputError
from .frames import SPIKE, Frame

ARCSEC = math.pi / 180.0 / 3600.0
DEG = math.pi / 180.0
SIDEREAL_DAY = 86164.0905
EARTH_RATE = 2.0 * math.pi / SIDEREAL_DAY
SCENARIO_KINDS = ("stellar_compass", "geo", "bang_bang", "time_varying")


@dataclass(frozen=True)
class CameraModel:
    rows: int = 1024
    cols: int = 1024
    pixel_pitch: float = 0.018  # mm
    focal_length: float = 50.47  # mm
    magnitude_threshold: float = 5.0
    centroid_sigma: float = 10.0 / 3.0 * ARCSEC
    spike_count_max: int = 5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0 and f.name != "spike_count_max":
                raise InvalidInputError(f"camera parameter {f.name} must be positive")

    @property
    def tan_half_x(self):
        return self.cols * self.pixel_pitch / 2.0 / self.focal_length

    @property
    def tan_half_y(self):
        return self.rows * self.pixel_pitch / 2.0 / self.focal_length

    @property
    def fov_x(self):
        return 2.0 * math.atan(self.tan_half_x)

    @property
    def fov_y(self):
        return 2.0 * math.atan(self.tan_half_y)

    @property
    def fov_diagonal(self):
        return 2.0 * math.atan(math.hypot(self.tan_half_x, self.tan_half_y))

    def in_fov(self, vectors):
        """Boolean mask of camera-frame directions that land on the detector."""
        v = np.atleast_2d(vectors)
        z = v[:, 2]
        return (z > 0) & (np.abs(v[:, 0]) <= self.tan_half_x * z) & (np.abs(v[:, 1]) <= self.tan_half_y * z)


DEFAULT_CAMERA = CameraModel()


def perturb_directions(vectors, sigma, rng):
    """Rotate each unit vector by ``|N(0, sigma)|`` about a random transverse axis."""
    v = np.atleast_2d(vectors)
    if len(v) == 0 or sigma == 0:
        return v.copy()
    axes = np.cross(v, rng.standard_normal(v.shape))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    ang = np.abs(rng.normal(0.0, sigma, len(v)))[:, None]
    out = v * np.cos(ang) + np.cross(axes, v) * np.sin(ang)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def random_fov_directions(camera, n, rng):
    """``n`` directions uniform in solid angle over the detector footprint."""
    out = np.empty((0, 3))
    cos_max = math.cos(camera.fov_diagonal / 2.0)
    while len(out) < n:
        m = 2 * (n - len(out)) + 4
        cz = rng.uniform(cos_max, 1.0, m)
        az = rng.uniform(0.0, 2.0 * math.pi, m)
        sz = np.sqrt(1.0 - cz * cz)
        cand = np.stack([sz * np.cos(az), sz * np.sin(az), cz], axis=1)
        out = np.vstack([out, cand[camera.in_fov(cand)]])
    return out[:n]


def generate_frame(catalog, camera, attitude, t, rng, n_spikes=None, noise=True):
    """Simulate one frame; returns ``(Frame, truth_ids)``.

    ``truth_ids`` holds the catalog id of each observation or ``SPIKE``.
    ``n_spikes=None`` draws the count uniformly from ``0..spike_count_max``.
    """
    cam = catalog.directions @ np.asarray(attitude).T
    visible = np.flatnonzero(camera.in_fov(cam))
    stars = cam[visible]
    if noise:
        stars = perturb_directions(stars, camera.centroid_sigma, rng)
    if n_spikes is None:
        n_spikes = int(rng.integers(0, camera.spike_count_max + 1))
    spikes = random_fov_directions(camera, n_spikes, rng)
    obs = np.vstack([stars, spikes])
    truth = np.concatenate([catalog.ids[visible], np.full(n_spikes, SPIKE, dtype=np.int64)])
    order = rng.permutation(len(obs))
    return Frame(t, obs[order]), truth[order]


# -- maneuver profile ----------------------------------------------------------------

def bang_bang_final_time(theta_f, theta_dot_max):
    return 2.0 * theta_f / theta_dot_max


def bang_bang_theta(t, theta_f, theta_dot_max):
    """Angle and rate of the rest-to-rest bang-bang slew at time ``t``."""
    tf = bang_bang_final_time(theta_f, theta_dot_max)
    if t < 0 or t > tf * (1 + 1e-12):
        raise DomainError(f"t={t} outside maneuver interval [0, {tf}]")
    u = 4.0 * theta_f / tf ** 2
    if t <= tf / 2:
        return 0.5 * u * t * t, u * t
    return -0.25 * (2 * t * t - 4 * t * tf + tf * tf) * u, -u * (t - tf)


# -- scenarios -----------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    kind: str
    duration: float
    sample_period: float
    rng_seed: int = 0
    spin_rate: float = EARTH_RATE  # stellar_compass / geo, rad/s
    theta_f: float = 10.0 * DEG  # bang_bang
    theta_dot_max: float = 0.15 * DEG  # bang_bang
    integration_step: float = 0.01  # time_varying
    spike_count_max: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise InvalidInputError(f"unknown scenario kind {self.kind!r}")
        if self.duration <= 0 or self.sample_period <= 0:
            raise InvalidInputError("duration and sample_period must be positive")

    @property
    def sample_times(self):
        n = int(math.floor(self.duration / self.sample_period + 1e-9))
        return [i * self.sample_period for i in range(n + 1)]

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["scenario"] = {k: repr(v) if isinstance(v, float) else str(v)
                          for k, v in asdict(self).items() if v is not None}
        return cp

    @classmethod
    def from_ini(cls, source):
        """Read the ``[scenario]`` section of an INI file (path or text)."""
        cp = configparser.ConfigParser()
        if "\n" in str(source) or "[" in str(source):
            cp.read_string(str(source))
        else:
            with open(source) as fh:
                cp.read_file(fh)
        sec = cp["scenario"]
        kwargs = {}
        for f in fields(cls):
            if f.name not in sec:
                continue
            raw = sec[f.name]
            kwargs[f.name] = raw if f.name == "kind" else (int(raw) if f.name in ("rng_seed", "spike_count_max") else float(raw))
        return cls(**kwargs)


def case_config(case_id, sample_period=None, seed=0):
    """Default configuration for one of the four numbered test cases."""
    if case_id == 1:
        return ScenarioConfig("stellar_compass", 8 * 3600.0, sample_period or 300.0, seed)
    if case_id == 2:
        return ScenarioConfig("geo", 8 * 3600.0, sample_period or 300.0, seed)
    if case_id == 3:
        cfg = ScenarioConfig("bang_bang", 1.0, sample_period or 1.0, seed)
        cfg.duration = bang_bang_final_time(cfg.theta_f, cfg.theta_dot_max)
        return cfg
    if case_id == 4:
        return ScenarioConfig("time_varying", 120.0, sample_period or 1.0, seed)
    raise InvalidInputError(f"unknown case {case_id}")


def time_varying_rate(t, tf):
    """Inertial angular velocity (rad/s) of the time-varying case."""
    if t < tf / 4:
        return np.array([3.0, 0.0, 0.0]) * DEG
    tau = t - tf / 4
    return np.array([3.0, 0.003 * tau, -0.0015 * tau]) * DEG


def time_varying_rates(t, tf):
    """Vectorized :func:`time_varying_rate` for an array of times; shape ``(n, 3)``."""
    tau = np.maximum(np.asarray(t, dtype=float) - tf / 4, 0.0)
    return np.column_stack([np.full_like(tau, 3.0), 0.003 * tau, -0.0015 * tau]) * DEG


class Scenario:
    """Truth attitude generator for one Monte Carlo trial."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng([config.rng_seed, 0x5EED])
        self.q0 = random_rotation(rng)
        kind = config.kind
        if kind == "stellar_compass":
            # site uniform on the sphere, camera at the local zenith with random roll
            zenith = random_unit_vector(rng)
            roll = rng.uniform(0, 2 * math.pi)
            ref = np.array([0.0, 0.0, 1.0]) if abs(zenith[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            x = np.cross(ref, zenith)
            x /= np.linalg.norm(x)
            y = np.cross(zenith, x)
            c0 = np.vstack([x, y, zenith])
            c0 = delta_c(np.array([0.0, 0.0, 1.0]), roll) @ c0
            self.q0 = dcm_to_quat(c0)
            self.latitude = math.asin(zenith[2])
            # spin about the inertial pole, expressed in the camera frame
            self.body_axis = c0 @ np.array([0.0, 0.0, 1.0])
        elif kind in ("geo", "bang_bang"):
            self.body_axis = random_unit_vector(rng)
        else:
            self._integrate()

    def _integrate(self):
        cfg = self.config
        h = cfg.integration_step
        steps_per_sample = int(round(cfg.sample_period / h))
        if abs(steps_per_sample * h - cfg.sample_period) > 1e-12 * cfg.sample_period:
            raise InvalidInputError("sample_period must be a multiple of integration_step")
        times = cfg.sample_times
        n_steps = (len(times) - 1) * steps_per_sample
        t = np.arange(n_steps) * h
        c1, c2 = 0.5 - math.sqrt(3) / 6, 0.5 + math.sqrt(3) / 6
        w1 = time_varying_rates(t + c1 * h, cfg.duration)
        w2 = time_varying_rates(t + c2 * h, cfg.duration)
        # fourth-order Magnus step for the inertial-rate kinematics
        theta = 0.5 * h * (w1 + w2) + math.sqrt(3) / 12 * h * h * np.cross(w2, w1)
        ang = np.linalg.norm(theta, axis=1)
        scale = np.divide(np.sin(0.5 * ang), ang, out=np.zeros_like(ang), where=ang > 0)
        steps = np.column_stack([theta * scale[:, None], np.cos(0.5 * ang)]).tolist()
        # sequential Hamilton products dq ⊗ q on plain floats (the hot loop)
        x, y, z, w = self.q0.tolist()
        out = [self.q0.copy()]
        for k in range(len(times) - 1):
            for a, b, c, d in steps[k * steps_per_sample:(k + 1) * steps_per_sample]:
                x, y, z, w = (d * x + w * a + b * z - c * y,
                              d * y + w * b + c * x - a * z,
                              d * z + w * c + a * y - b * x,
                              d * w - a * x - b * y - c * z)
            q = np.array([x, y, z, w])
            q /= np.linalg.norm(q)
            x, y, z, w = q.tolist()
            out.append(q)
        self._truth_quats = out

    def true_attitude(self, t):
        """``(C, omega_body)`` at time ``t``; omega is expressed in the camera frame."""
        cfg = self.config
        if t < 0 or t > cfg.duration * (1 + 1e-12):
            raise DomainError(f"t={t} outside scenario interval")
        c0 = quat_to_dcm(self.q0)
        if cfg.kind in ("stellar_compass", "geo"):
            return delta_c(self.body_axis, cfg.spin_rate * t) @ c0, cfg.spin_rate * self.body_axis
        if cfg.kind == "bang_bang":
            theta, rate = bang_bang_theta(min(t, cfg.duration), cfg.theta_f, cfg.theta_dot_max)
            return delta_c(self.body_axis, theta) @ c0, rate * self.body_axis
        k = int(round(t / cfg.sample_period))
        if abs(k * cfg.sample_period - t) > 1e-9:
            raise DomainError("time_varying truth is only tabulated at sample times")
        c = quat_to_dcm(self._truth_quats[k])
        return c, c @ time_varying_rate(t, cfg.duration)

    def true_quaternion(self, t):
        if self.config.kind == "time_varying":
            return self._truth_quats[int(round(t / self.config.sample_period))]
        return dcm_to_quat(self.true_attitude(t)[0])


@dataclass
class TruthSample:
    frame: Frame
    truth_ids: np.ndarray
    attitude: np.ndarray
    omega: np.ndarray


def run_scenario(config, catalog, camera=DEFAULT_CAMERA, noise=True):
    """Yield :class:`TruthSample` objects at every sample time of ``config``."""
    scenario = Scenario(config)
    rng = np.random.default_rng([config.rng_seed, 0xF4A3E])
    if config.spike_count_max is not None:
        camera = CameraModel(**{**asdict(camera), "spike_count_max": config.spike_count_max})
    for t in config.sample_times:
        c, w = scenario.true_attitude(t)
        frame, truth = generate_frame(catalog, camera, c, t, rng, noise=noise)
        yield TruthSample(frame, truth, c, w)
