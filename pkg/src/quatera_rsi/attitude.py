"""Attitude math shared by the identification and estimation code.

Conventions
-----------
* Quaternions are numpy arrays ``[x, y, z, w]`` (vector part first, scalar last).
* :func:`quat_multiply` is the Hamilton product.
* ``quat_to_dcm(q)`` returns the *passive* direction cosine matrix that maps
  inertial vectors into the camera frame, ``b = C @ r``.  With these two
  choices, composition reads ``quat_to_dcm(q ⊗ p) = quat_to_dcm(p) @ quat_to_dcm(q)``,
  so a body-frame increment ``dq`` is applied on the right: ``q_next = q ⊗ dq``.
* The 4x4 operator written ``[p ⊗]`` in the estimation literature (Shuster's
  product order) is :func:`right_matrix`, i.e. ``right_matrix(p) @ q == q ⊗ p``.
"""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateGeometryError, InsufficientDataError, InvalidInputError

UNIT_TOL = 1e-9

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def skew(v):
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def normalize(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise InvalidInputError("cannot normalize a zero vector")
    return v / n


def check_unit(v, name="vector", tol=UNIT_TOL):
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise InvalidInputError(f"{name} must be unit norm, got norm {np.linalg.norm(v):.12g}")
    return v


def radec_to_vector(ra, dec):
    """Unit vector(s) from right ascension and declination in radians."""
    ra = np.asarray(ra, dtype=float)
    dec = np.asarray(dec, dtype=float)
    cd = np.cos(dec)
    return np.stack([cd * np.cos(ra), cd * np.sin(ra), np.sin(dec)], axis=-1)


# -- quaternions ---------------------------------------------------------------

def quat_multiply(q, p):
    """Hamilton product ``q ⊗ p`` of scalar-last quaternions."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    qv, qw = q[:3], q[3]
    pv, pw = p[:3], p[3]
    out = np.empty(4)
    out[:3] = qw * pv + pw * qv + np.cross(qv, pv)
    out[3] = qw * pw - qv @ pv
    return out


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_inverse(q):
    return quat_conjugate(q) / (q @ q)


def left_matrix(p):
    """4x4 matrix ``L`` with ``L @ q == p ⊗ q``."""
    pv, pw = p[:3], p[3]
    m = np.empty((4, 4))
    m[:3, :3] = pw * np.eye(3) + skew(pv)
    m[:3, 3] = pv
    m[3, :3] = -pv
    m[3, 3] = pw
    return m


def right_matrix(p):
    """4x4 matrix ``R`` with ``R @ q == q ⊗ p``."""
    pv, pw = p[:3], p[3]
    m = np.empty((4, 4))
    m[:3, :3] = pw * np.eye(3) - skew(pv)
    m[:3, 3] = pv
    m[3, :3] = -pv
    m[3, 3] = pw
    return m


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    half = 0.5 * angle
    return np.concatenate([axis * np.sin(half), [np.cos(half)]])


def quat_to_dcm(q):
    """Passive (inertial to camera) rotation matrix of a unit quaternion.

    ``(w² − e·e) I + 2 e eᵀ − 2 w [e×]``, written out element by element.
    """
    x, y, z, w = (float(v) for v in q[:4])
    xx, yy, zz, ww = x * x, y * y, z * z, w * w
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([[ww + xx - yy - zz, 2.0 * (xy + wz), 2.0 * (xz - wy)],
                     [2.0 * (xy - wz), ww - xx + yy - zz, 2.0 * (yz + wx)],
                     [2.0 * (xz + wy), 2.0 * (yz - wx), ww - xx - yy + zz]])


def dcm_to_quat(c):
    """Inverse of :func:`quat_to_dcm` (Shepperd's method); returns ``w >= 0``."""
    c = np.asarray(c, dtype=float)
    tr = np.trace(c)
    cands = np.array([c[0, 0], c[1, 1], c[2, 2], tr])
    i = int(np.argmax(cands))
    q = np.empty(4)
    if i == 3:
        q[3] = 0.5 * np.sqrt(1.0 + tr)
        f = 0.25 / q[3]
        q[0] = (c[1, 2] - c[2, 1]) * f
        q[1] = (c[2, 0] - c[0, 2]) * f
        q[2] = (c[0, 1] - c[1, 0]) * f
    else:
        j, k = (i + 1) % 3, (i + 2) % 3
        q[i] = 0.5 * np.sqrt(1.0 + 2.0 * c[i, i] - tr)
        f = 0.25 / q[i]
        q[j] = (c[i, j] + c[j, i]) * f
        q[k] = (c[i, k] + c[k, i]) * f
        q[3] = (c[j, k] - c[k, j]) * f
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def is_rotation(c, tol=1e-10):
    c = np.asarray(c, dtype=float)
    return (c.shape == (3, 3)
            and np.allclose(c @ c.T, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(c) - 1.0) <= tol)


# -- rigid rotation and propagation ----------------------------------------------

def delta_c(axis, angle):
    """Rotation matrix for a frame turned by ``angle`` about ``axis``.

    ``I cos(a) + (1 - cos(a)) n n^T - [n x] sin(a)``; it maps star directions
    seen in the old camera frame to where they appear in the new one.
    """
    x, y, z = (float(v) for v in axis)
    if abs(math.sqrt(x * x + y * y + z * z) - 1.0) > UNIT_TOL:
        check_unit(axis, "rotation axis")
    if not math.isfinite(angle):
        raise InvalidInputError("rotation angle must be finite")
    ca, sa = math.cos(angle), math.sin(angle)
    k = 1.0 - ca
    return np.array([[ca + k * x * x, k * x * y + sa * z, k * x * z - sa * y],
                     [k * x * y - sa * z, ca + k * y * y, k * y * z + sa * x],
                     [k * x * z + sa * y, k * y * z - sa * x, ca + k * z * z]])


def propagate_quaternion(q0, axis, rate, dt):
    """Closed-form pure-spin propagation of ``q0`` over ``dt`` seconds.

    ``q(t) = [I cos(W dt/2) + sin(W dt/2) [w_q ⊗]] q0`` with ``w_q = [axis, 0]``.
    The result satisfies ``quat_to_dcm(q) == delta_c(axis, rate*dt) @ quat_to_dcm(q0)``.
    """
    q0 = np.asarray(q0, dtype=float)
    if rate == 0.0:
        return q0.copy()
    axis = check_unit(axis, "rotation axis")
    half = 0.5 * rate * dt
    omega_q = np.concatenate([axis, [0.0]])
    q = np.cos(half) * q0 + np.sin(half) * (right_matrix(omega_q) @ q0)
    return q / np.linalg.norm(q)


def principal_angle(c1, c2):
    """Rotation angle of ``c1^T c2`` in ``[0, pi]``.

    Equal to ``arccos((trace(c1^T c2) - 1) / 2)``; evaluated through atan2 of
    the antisymmetric part so that small angles keep full precision.
    """
    r = (np.asarray(c1).T @ np.asarray(c2)).tolist()
    cos_part = min(1.0, max(-1.0, 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0)))
    sin_part = 0.5 * math.sqrt((r[2][1] - r[1][2]) ** 2 + (r[0][2] - r[2][0]) ** 2 + (r[1][0] - r[0][1]) ** 2)
    return math.atan2(sin_part, cos_part)


# -- Wahba's problem -------------------------------------------------------------

@dataclass(frozen=True)
class WahbaSolution:
    quaternion: np.ndarray
    cost: float
    n_stars: int

    @cached_property
    def dcm(self):
        return quat_to_dcm(self.quaternion)


# relative eigenvalue gap below which the attitude is not determined
DEGENERATE_GAP = 1e-12


def solve_wahba(obs, ref, weights=None):
    """q-method solution of Wahba's problem for ``obs ~ C @ ref``.

    Weights default to ``1/n``.  The reported cost is the attained loss
    ``1/2 sum w |b - C r|^2``, evaluated from residuals rather than from the
    eigenvalue gap so that exact data gives a cost at round-off level.
    """
    if not (isinstance(obs, np.ndarray) and obs.ndim == 2 and obs.dtype == float):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if not (isinstance(ref, np.ndarray) and ref.ndim == 2 and ref.dtype == float):
        ref = np.atleast_2d(np.asarray(ref, dtype=float))
    n = len(obs)
    if n < 2 or len(ref) != n:
        raise InsufficientDataError(f"need at least 2 matched vector pairs, got {n}")
    if weights is None:
        total = 1.0
        b = (obs.T @ ref * (1.0 / n)).tolist()
    else:
        weights = np.asarray(weights, dtype=float)
        if len(weights) != n or np.any(weights <= 0):
            raise InvalidInputError("weights must be positive and match the vector count")
        total = float(weights.sum())
        b = ((weights[:, None] * obs).T @ ref).tolist()
    (b00, b01, b02), (b10, b11, b12), (b20, b21, b22) = b
    sigma = b00 + b11 + b22
    z0, z1, z2 = b12 - b21, b20 - b02, b01 - b10
    k = np.array([[2 * b00 - sigma, b01 + b10, b02 + b20, z0],
                  [b01 + b10, 2 * b11 - sigma, b12 + b21, z1],
                  [b02 + b20, b12 + b21, 2 * b22 - sigma, z2],
                  [z0, z1, z2, sigma]])
    vals, vecs = np.linalg.eigh(k)
    # collinear observed or reference directions leave the rotation about
    # their common line free, which shows up as a repeated largest eigenvalue
    if vals[3] - vals[2] <= DEGENERATE_GAP * total:
        raise DegenerateGeometryError("observed or reference directions are collinear")
    q = vecs[:, -1]
    if q[3] < 0:
        q = -q
    q = q / math.sqrt(float(q @ q))
    c = quat_to_dcm(q)
    resid = obs - ref @ c.T
    if weights is None:
        cost = 0.5 * float(np.vdot(resid, resid)) / n
    else:
        cost = 0.5 * float(weights @ np.einsum("ij,ij->i", resid, resid))
    sol = WahbaSolution(quaternion=q, cost=cost, n_stars=n)
    sol.__dict__["dcm"] = c
    return sol


def random_rotation(rng):
    """Uniformly distributed unit quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def random_unit_vector(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)
