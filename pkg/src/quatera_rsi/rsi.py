"""Recursive star identification.

The stars identified in the previous frame are rotated forward by the
estimated angular velocity, matched one-to-one against the new
observations, and any observation left over is identified against three of
the recurrent stars with the same test Pyramid uses for its remaining
stars.  The resulting attitude is accepted only if its Wahba cost is small
and the rotation from the previous attitude agrees with the predicted
angle; otherwise the caller falls back to lost-in-space identification.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attitude import delta_c, principal_angle, solve_wahba
from .errors import DegenerateGeometryError, InvalidInputError
from .frames import Frame, IdResult, failure
from .pyramid import DEFAULT_TOLERANCE, PairQuery, identify_remaining
from .quatera import OmegaEstimate
from .simulator import DEFAULT_CAMERA

ARCSEC = math.pi / 180.0 / 3600.0

TOO_FEW_RECURRENT = "too-few-recurrent"
WAHBA_COST = "wahba-cost"
PRINCIPAL_ANGLE = "principal-angle"
CONFLICT = "conflict"


@dataclass
class RsiConfig:
    """Tolerances of the recursive identifier.

    ``None`` selects the automatic value:

    * ``epsilon`` with ``epsilon_mode="accuracy"``: ``3σ_ω·Δt + 3·√2·σ_c``,
      the 3σ displacement from the rate uncertainty plus two independent
      centroid errors;
    * ``epsilon`` with ``epsilon_mode="rate-fraction"``:
      ``(Ω + 3σ_ω)·Δt·epsilon_rate_factor + 3σ_c``, at least ``epsilon_floor``;
    * ``theta_min``: ``2·epsilon``;
    * ``wahba_cost_max``: ``n·(3σ_c)²`` on the unit-weight cost ``½Σ|b − C r|²``;
    * ``principal_angle_tol``: ``3σ_ω·Δt + 60 arcsec``.

    ``σ_ω`` is the rate standard deviation from the phase regression, but
    never less than ``√2·σ_c`` over the time spanned by the window (the
    regression of two or three samples says little about its own error).
    A positive ``sigma_omega`` overrides it.
    """

    epsilon: Optional[float] = None
    theta_min: Optional[float] = None
    sigma_omega: Optional[float] = None
    epsilon_mode: str = "accuracy"
    wahba_cost_max: Optional[float] = None
    principal_angle_tol: Optional[float] = None
    centroid_sigma: float = 10.0 / 3.0 * ARCSEC
    epsilon_rate_factor: float = 0.05
    epsilon_floor: float = 30.0 * ARCSEC
    pair_tolerance: float = DEFAULT_TOLERANCE
    min_recurrent: int = 3

    def __post_init__(self):
        for name in ("epsilon", "theta_min", "wahba_cost_max", "principal_angle_tol"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if (self.sigma_omega is not None and self.sigma_omega < 0) or self.centroid_sigma <= 0 \
                or self.pair_tolerance <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.epsilon_mode not in ("accuracy", "rate-fraction"):
            raise InvalidInputError(f"unknown epsilon mode {self.epsilon_mode!r}")
        if self.min_recurrent < 3:
            raise InvalidInputError("at least three recurrent stars are needed as a base")

    def rate_sigma(self, omega):
        if self.sigma_omega is not None:
            return self.sigma_omega
        floor = math.sqrt(2) * self.centroid_sigma / omega.span if omega.span > 0 else 0.0
        return max(omega.rate_sigma, floor)

    def epsilon_for(self, omega, dt):
        if self.epsilon is not None:
            return self.epsilon
        if self.epsilon_mode == "accuracy":
            return 3 * self.rate_sigma(omega) * dt + 3 * math.sqrt(2) * self.centroid_sigma
        eps = (omega.magnitude + 3 * self.rate_sigma(omega)) * dt * self.epsilon_rate_factor
        return max(eps + 3 * self.centroid_sigma, self.epsilon_floor)

    def theta_min_for(self, epsilon):
        return self.theta_min if self.theta_min is not None else 2.0 * epsilon

    def cost_max_for(self, n):
        if self.wahba_cost_max is not None:
            return self.wahba_cost_max
        return n * (3 * self.centroid_sigma) ** 2

    def angle_tol_for(self, omega, dt):
        if self.principal_angle_tol is not None:
            return self.principal_angle_tol
        return 3 * self.rate_sigma(omega) * dt + 60 * ARCSEC


@dataclass
class RsiState:
    """Everything carried from frame ``k`` to frame ``k + 1``.

    The identified directions of the previous frame and their mutual
    cosines are extracted once, when the state is built.
    """

    prev_frame: Frame
    prev_attitude: np.ndarray
    omega: OmegaEstimate
    prev_time: float
    known: np.ndarray = field(init=False, repr=False)
    known_ids: np.ndarray = field(init=False, repr=False)
    known_gram: np.ndarray = field(init=False, repr=False)
    known_nearest: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ids = self.prev_frame.ids
        if ids is None or np.count_nonzero(ids >= 0) < 3:
            raise InvalidInputError("previous frame needs at least three identified stars")
        keep = ids >= 0
        self.known = self.prev_frame.observations[keep]
        self.known_ids = ids[keep]
        self.known_gram = self.known @ self.known.T
        np.fill_diagonal(self.known_gram, -1.0)
        self.known_nearest = self.known_gram.max(axis=1)


def predict_stars(state, t_next, camera=DEFAULT_CAMERA, theta_min=0.0):
    """Expected camera-frame directions and catalog ids of recurrent stars at ``t_next``.

    Stars leaving the field of view are removed, and so are stars closer
    than ``theta_min`` to another expected star.
    """
    dt = t_next - state.prev_time
    if dt <= 0:
        raise InvalidInputError("t_next must follow the previous frame")
    b = state.known
    om = state.omega
    if om.magnitude != 0:
        b = b @ delta_c(om.axis, om.magnitude * dt).T
    inside = camera.in_fov(b)
    limit = math.cos(theta_min)
    if theta_min > 0 and bool((state.known_nearest[inside] > limit).any()):
        # rotation preserves the mutual angles, so the cached cosines apply
        g = state.known_gram[inside][:, inside]
        keep = np.flatnonzero(inside)
        if len(keep) > 1:
            keep = keep[g.max(axis=1) <= limit]
        return b[keep], state.known_ids[keep]
    return b[inside], state.known_ids[inside]


def _match_indices(expected, observations, epsilon, minimum=0):
    """Index arrays ``(obs_idx, exp_idx)`` of the one-to-one matches.

    Returns early, with whatever single-cone observations were found, when
    there are fewer than ``minimum`` of them.
    """
    inside = (observations @ expected.T) > math.cos(epsilon)
    single = np.flatnonzero(inside.sum(axis=1) == 1)
    if len(single) < minimum:
        return single, single
    target = inside[single].argmax(axis=1)
    claims = np.bincount(target, minlength=len(expected))
    ok = claims[target] == 1
    return single[ok], target[ok]


def match_recurrent(expected, expected_ids, observations, epsilon):
    """One-to-one matches ``{observation index: catalog id}``.

    Observation ``j`` matches expected star ``i`` when it lies inside the
    cone of half-angle ``epsilon`` around ``i`` and outside the cones of all
    other expected stars.  An expected star claimed by two observations
    matches neither.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    expected = np.asarray(expected, dtype=float).reshape(-1, 3)
    obs = np.asarray(observations, dtype=float).reshape(-1, 3)
    if len(expected) == 0 or len(obs) == 0:
        return {}
    j, i = _match_indices(expected, obs, epsilon)
    ids = np.asarray(expected_ids)[i]
    return dict(zip(j.tolist(), ids.tolist()))


def validate(prev_attitude, solution, expected_phi, config, omega=None, dt=None):
    """``(passed, reason)`` for a new attitude solution.

    The cost is compared on the unit-weight scale ``½Σ|b − C r|²``.
    """
    n = solution.n_stars
    if solution.cost * n > config.cost_max_for(n):
        return False, WAHBA_COST
    tol = config.principal_angle_tol
    if tol is None:
        tol = config.angle_tol_for(omega, dt) if omega is not None else 60 * ARCSEC
    if abs(principal_angle(prev_attitude, solution.dcm) - expected_phi) > tol:
        return False, PRINCIPAL_ANGLE
    return True, ""


def _pick_base(confirmed, observations):
    """Three matched observations spanning the widest triangle among the first few."""
    idx = sorted(confirmed)[:6]
    combos = np.array(list(itertools.combinations(idx, 3)))
    o = observations
    u = o[combos[:, 1]] - o[combos[:, 0]]
    v = o[combos[:, 2]] - o[combos[:, 0]]
    # squared area of the triangle, up to a constant
    area = ((u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1]) ** 2 + (u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2]) ** 2
            + (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]) ** 2)
    return tuple(combos[int(np.argmax(area))].tolist())


def rsi_identify(state, frame, config, db, kv, catalog, camera=DEFAULT_CAMERA):
    """Identify ``frame`` from the previous one.

    On success the result carries the Wahba solution in
    ``extra["solution"]``.  On abort the result has no identified stars and
    ``reason`` is one of ``too-few-recurrent``, ``conflict``, ``wahba-cost``
    or ``principal-angle``.
    """
    n = len(frame)
    dt = frame.time - state.prev_time
    omega = state.omega
    eps = config.epsilon_for(omega, dt)
    expected, exp_ids = predict_stars(state, frame.time, camera, config.theta_min_for(eps))
    obs = frame.observations
    if len(expected) == 0 or n == 0:
        return failure(n, "recursive", TOO_FEW_RECURRENT)
    j, i = _match_indices(expected, obs, eps, config.min_recurrent)
    if len(j) < config.min_recurrent:
        return failure(n, "recursive", TOO_FEW_RECURRENT)
    if len(j) < n:
        confirmed = dict(zip(j.tolist(), exp_ids[i].tolist()))
        query = PairQuery(obs, db, kv, config.pair_tolerance)
        result = identify_remaining(frame, confirmed, db, kv, config.pair_tolerance, query=query,
                                    method="recursive", base=_pick_base(confirmed, obs))
        if result.extra["base_conflict"]:
            return failure(n, "recursive", CONFLICT)
        idx, ids = result.identified()
        ids = ids.tolist()
    else:
        ids = np.empty(n, dtype=np.int64)
        ids[j] = exp_ids[i]
        result = IdResult(ids, "recursive")
        idx, ids = slice(None), ids.tolist()
    try:
        sol = solve_wahba(obs[idx], catalog.vectors(ids))
    except DegenerateGeometryError:
        return failure(n, "recursive", WAHBA_COST)
    ok, reason = validate(state.prev_attitude, sol, omega.magnitude * dt, config, omega, dt)
    if not ok:
        return failure(n, "recursive", reason)
    result.extra["solution"] = sol
    result.extra["n_recurrent"] = len(j)
    result.extra["epsilon"] = eps
    return result
