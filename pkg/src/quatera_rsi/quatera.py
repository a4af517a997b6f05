"""Angular velocity from a sliding window of attitude quaternions.

Under pure spin every attitude quaternion lies on a great circle of the unit
3-sphere, i.e. in a fixed 2-D plane of R^4.  The plane is found from the
dominant eigenvectors of the 4x4 scatter matrix ``Z = Q Q^T``; the rotation
axis follows from the two spanning vectors, and the rotation rate from a
straight-line fit of the in-plane phase against time.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .attitude import quat_conjugate, quat_multiply
from .errors import (
    AmbiguousPlaneError,
    DegenerateProjectionError,
    InconsistentPlaneError,
    InsufficientDataError,
    OrderingError,
    SingularRegressorError,
)

SIGMA3_TOLERANCE = 1e-9
DEFAULT_N_MAX = 50


class QuaternionWindow:
    """Time-ordered, sign-continuous buffer of the most recent quaternions."""

    def __init__(self, n_max=DEFAULT_N_MAX, times=(), quats=()):
        if n_max < 2:
            raise ValueError("n_max must be at least 2")
        self.n_max = n_max
        self.times = list(times)
        self.quats = [np.asarray(q, dtype=float) for q in quats]
        self.frequency_warning = False

    def __len__(self):
        return len(self.times)

    @property
    def n(self):
        return len(self.times)

    def copy(self):
        w = QuaternionWindow(self.n_max, self.times, self.quats)
        w.frequency_warning = self.frequency_warning
        return w

    def clear(self):
        self.times.clear()
        self.quats.clear()
        self.frequency_warning = False

    def push(self, t, q):
        """Append ``q`` at time ``t``, flipping its sign to stay continuous."""
        if self.times and t <= self.times[-1]:
            raise OrderingError(f"time {t} does not follow {self.times[-1]}")
        q = np.asarray(q, dtype=float)
        if self.quats and q @ self.quats[-1] < 0:
            q = -q
        self.times.append(float(t))
        self.quats.append(q)
        while len(self.times) > self.n_max:
            self.drop_oldest()
        return self

    def drop_oldest(self):
        del self.times[0]
        del self.quats[0]

    def matrix(self):
        """4 x n measurement matrix with one quaternion per column."""
        return np.array(self.quats).T


def push_measurement(window, t, q):
    return window.push(t, q)


@dataclass(frozen=True)
class PlaneFit:
    u: np.ndarray  # columns u1..u4
    sigma: np.ndarray  # descending

    @property
    def u1(self):
        return self.u[:, 0]

    @property
    def u2(self):
        return self.u[:, 1]

    def cost(self, quats, v1=None, v2=None):
        """Sum of squared projections of ``quats`` onto the plane ``(v1, v2)``."""
        v1 = self.u1 if v1 is None else v1
        v2 = self.u2 if v2 is None else v2
        q = np.atleast_2d(quats)
        return float(np.sum((q @ v1) ** 2 + (q @ v2) ** 2))


def _eig_desc(z):
    vals, vecs = np.linalg.eigh(z)
    vals = np.clip(vals[::-1], 0.0, None)
    return vals, vecs[:, ::-1]


def fit_plane(window):
    """Best-fit quaternion plane of the window."""
    if window.n < 2:
        raise InsufficientDataError("need at least two quaternions")
    q = window.matrix()
    sigma, u = _eig_desc(q @ q.T)
    if sigma[1] - sigma[2] <= 1e-13 * sigma[0]:
        raise AmbiguousPlaneError(f"second and third singular values coincide ({sigma[1]:.3g}, {sigma[2]:.3g})")
    return PlaneFit(u, sigma)


def extract_aor(fit, tol=1e-6):
    """Axis of rotation from the plane: vector part of ``u1^-1 ⊗ u2``."""
    p = quat_multiply(quat_conjugate(fit.u1), fit.u2)
    if abs(p[3]) > tol:
        raise InconsistentPlaneError(f"plane product has scalar part {p[3]:.3g}")
    return p[:3] / np.linalg.norm(p[:3])


@dataclass(frozen=True)
class AngleSeries:
    times: np.ndarray
    phis: np.ndarray


def project_and_phase(window, fit):
    """Project each quaternion onto the plane and return its unwrapped phase."""
    q = np.array(window.quats)
    a = q @ fit.u1
    b = q @ fit.u2
    norm = np.hypot(a, b)
    if np.any(norm < 1e-9):
        raise DegenerateProjectionError("a quaternion is orthogonal to the fitted plane")
    phis = 2.0 * np.arctan2(b / norm, a / norm)
    return AngleSeries(np.array(window.times), np.unwrap(phis))


def projected_quaternions(window, fit):
    q = np.array(window.quats)
    a = q @ fit.u1
    b = q @ fit.u2
    norm = np.hypot(a, b)[:, None]
    return (a[:, None] * fit.u1 + b[:, None] * fit.u2) / norm


@dataclass(frozen=True)
class AvmFit:
    phi0: float
    rate: float
    covariance: np.ndarray
    dof: int


def estimate_avm(series):
    """Least-squares line ``phi = phi0 + rate * t`` with parameter covariance.

    With only two points the covariance is returned as zeros and ``dof == 0``.
    """
    t = np.asarray(series.times, dtype=float)
    phi = np.asarray(series.phis, dtype=float)
    n = len(t)
    if n < 2:
        raise InsufficientDataError("need at least two phase samples")
    # centre the regressor so that long time stamps stay well conditioned
    tc = t.mean()
    dt = t - tc
    sxx = float(dt @ dt)
    if sxx <= 1e-12 * max(1.0, tc * tc) * n or np.ptp(t) == 0:
        raise SingularRegressorError("phase samples need at least two distinct times")
    rate = float(dt @ (phi - phi.mean())) / sxx
    intercept_c = float(phi.mean())
    phi0 = intercept_c - rate * tc
    dof = n - 2
    if dof == 0:
        cov = np.zeros((2, 2))
    else:
        resid = phi - (intercept_c + rate * dt)
        s2 = float(resid @ resid) / dof
        # (H^T H)^-1 for H = [1, t], expressed through centred sums
        inv = np.array([[1.0 / n + tc * tc / sxx, -tc / sxx], [-tc / sxx, 1.0 / sxx]])
        cov = s2 * inv
    return AvmFit(phi0, rate, cov, dof)


def adapt_window(window, tolerance_sigma3=SIGMA3_TOLERANCE):
    """Drop the oldest quaternions until the third singular value falls
    below ``tolerance_sigma3`` or two measurements remain."""
    if tolerance_sigma3 <= 0:
        raise ValueError("tolerance must be positive")
    w = window.copy()
    w.frequency_warning = False
    while w.n > 2:
        q = w.matrix()
        sigma = np.linalg.eigvalsh(q @ q.T)
        if sigma[1] < tolerance_sigma3:  # third largest of four
            break
        w.drop_oldest()
    else:
        w.frequency_warning = window.n > 2 or w.frequency_warning
    return w


@dataclass(frozen=True)
class OmegaEstimate:
    axis: np.ndarray
    magnitude: float
    phi0: float = 0.0
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    window_n: int = 0
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(4))
    frequency_warning: bool = False
    span: float = 0.0  # time covered by the window, seconds

    @property
    def vector(self):
        return self.magnitude * self.axis

    @property
    def rate_sigma(self):
        return math.sqrt(max(self.covariance[1, 1], 0.0))


def quatera_estimate(window, tolerance_sigma3=SIGMA3_TOLERANCE, adapt=True):
    """Full estimate: adapt, fit plane, axis, phases, rate.

    Returns ``(OmegaEstimate, adapted_window)``.  The axis sign is chosen so
    that the rate is non-negative.
    """
    if window.n < 2:
        raise InsufficientDataError("need at least two quaternions")
    w = adapt_window(window, tolerance_sigma3) if adapt else window
    fit = fit_plane(w)
    axis = extract_aor(fit)
    series = project_and_phase(w, fit)
    avm = estimate_avm(series)
    rate, phi0 = avm.rate, avm.phi0
    if rate < 0:
        axis, rate, phi0 = -axis, -rate, -phi0
    est = OmegaEstimate(axis, rate, phi0, avm.covariance, w.n, fit.sigma, w.frequency_warning,
                        w.times[-1] - w.times[0])
    return est, w
