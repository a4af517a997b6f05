"""Lost-in-space identification with the Pyramid scheme.

A frame is identified in three stages:

1. scan observation triples until one admits exactly one catalog triangle;
2. find a fourth (reference) observation whose triangles with the first
   three are also unique, which confirms the four stars;
3. identify every remaining observation against three confirmed stars,
   discarding those without a unique match as spikes.

Pair lookups go through the k-vector; each observation pair is queried at
most once per frame.
"""

import itertools
import math

import numpy as np

from .attitude import solve_wahba
from .catalog import kvector_bounds
from .errors import DegenerateGeometryError
from .frames import SPIKE, UNIDENTIFIED, IdResult, failure

ARCSEC = math.pi / 180.0 / 3600.0
DEFAULT_TOLERANCE = 10.0 * ARCSEC
# below this |b_i . (b_j x b_k)| the handedness of a triangle is not trusted
HANDEDNESS_MIN = 1e-4
# confirmed stars must fit one rotation to within this multiple of the tolerance
RESIDUAL_FACTOR = 2.0
# smallest singular value of the four confirmed directions below which they
# count as lying near one great circle (about 4 % of correct pyramids)
GREAT_CIRCLE_SIGMA = 0.02


class PairQuery:
    """Per-frame cache of catalog pairs compatible with each observation pair."""

    def __init__(self, observations, db, kv, tolerance=DEFAULT_TOLERANCE):
        self.obs = np.asarray(observations, dtype=float)
        self.db = db
        self.kv = kv
        self.tolerance = tolerance
        self._max_angle = db.max_pair_angle + tolerance
        self._bounds = {}
        self._adj = {}
        self._cos = None

    def _dot(self, i, j):
        if self._cos is None:
            self._cos = (self.obs @ self.obs.T).tolist()
        return self._cos[i][j]

    def bounds(self, i, j):
        """Index slice of the pair database compatible with observations ``i, j``."""
        key = (i, j) if i < j else (j, i)
        hit = self._bounds.get(key)
        if hit is not None:
            return hit
        c = self._dot(i, j)
        theta = math.acos(min(1.0, max(-1.0, c)))
        if theta > self._max_angle:
            hit = (0, 0)
        else:
            lo = math.cos(min(math.pi, theta + self.tolerance))
            hi = math.cos(max(0.0, theta - self.tolerance))
            hit = kvector_bounds(self.kv, self.db, lo, hi)
        self._bounds[key] = hit
        return hit

    def adjacency(self, i, j):
        """``{catalog_id: set(partner ids)}`` for observation pair ``i, j``."""
        key = (i, j) if i < j else (j, i)
        adj = self._adj.get(key)
        if adj is None:
            start, stop = self.bounds(i, j)
            adj = {}
            for a, b in zip(self.db._a_list[start:stop], self.db._b_list[start:stop]):
                adj.setdefault(a, set()).add(b)
                adj.setdefault(b, set()).add(a)
            self._adj[key] = adj
        return adj

    def partners(self, i, j, star_id):
        """Catalog ids that pair with ``star_id`` at the angle between ``i`` and ``j``."""
        key = (i, j) if i < j else (j, i)
        adj = self._adj.get(key)
        if adj is not None:
            return adj.get(star_id, set())
        start, stop = self.bounds(i, j)
        out = set()
        a_list, b_list = self.db._a_list, self.db._b_list
        for n in range(start, stop):
            a = a_list[n]
            if a == star_id:
                out.add(b_list[n])
            elif b_list[n] == star_id:
                out.add(a)
        return out

    def triple_product(self, i, j, k):
        o = self.obs
        return float(np.dot(o[i], np.cross(o[j], o[k])))


def _handedness_ok(query, catalog_vectors, i, j, k, a, b, c):
    t_obs = query.triple_product(i, j, k)
    if abs(t_obs) < HANDEDNESS_MIN or catalog_vectors is None:
        return True
    va, vb, vc = catalog_vectors(a), catalog_vectors(b), catalog_vectors(c)
    return (t_obs > 0) == (float(np.dot(va, np.cross(vb, vc))) > 0)


def triangle_matches(query, i, j, k, limit=2, catalog_vectors=None):
    """Catalog triples ``(a, b, c)`` consistent with observations ``(i, j, k)``.

    Enumeration stops once ``limit`` matches are found.
    """
    adj_ij = query.adjacency(i, j)
    if not adj_ij:
        return []
    adj_ik = query.adjacency(i, k)
    if not adj_ik:
        return []
    adj_jk = query.adjacency(j, k)
    if not adj_jk:
        return []
    out = []
    for a, bs in adj_ij.items():
        cs_a = adj_ik.get(a)
        if not cs_a:
            continue
        for b in bs:
            cs_b = adj_jk.get(b)
            if not cs_b:
                continue
            for c in cs_a & cs_b:
                if c == a or c == b:
                    continue
                if not _handedness_ok(query, catalog_vectors, i, j, k, a, b, c):
                    continue
                out.append((a, b, c))
                if len(out) >= limit:
                    return out
    return out


def _triples(n, order):
    if order == "smart":
        # spread the first tries over the whole frame
        for dj in range(1, n - 1):
            for dk in range(1, n - dj):
                for i in range(0, n - dj - dk):
                    yield i, i + dj, i + dj + dk
    else:
        yield from itertools.combinations(range(n), 3)


def find_unique_triangle(frame, db, kv, tolerance=DEFAULT_TOLERANCE, *, query=None, order="lexicographic",
                         catalog_vectors=None, start=0):
    """First observation triple (in scan order, from position ``start``) with a
    unique catalog triangle.

    Returns ``(indices, catalog_ids, position)`` or ``None``.
    """
    obs = frame.observations
    if len(obs) < 3:
        return None
    query = query or PairQuery(obs, db, kv, tolerance)
    for pos, tri in enumerate(_triples(len(obs), order)):
        if pos < start:
            continue
        m = triangle_matches(query, *tri, catalog_vectors=catalog_vectors)
        if len(m) == 1:
            return tri, m[0], pos
    return None


def _unique_fourth(query, base, base_ids, r):
    """Catalog id of observation ``r`` if its triangles with the base are unique.

    A candidate pairs with every base star, so it can never be a base star.
    """
    (i, j, k), (a, b, c) = base, base_ids
    cand = query.partners(i, r, a)
    if not cand:
        return None
    cand = cand & query.partners(j, r, b)
    if not cand:
        return None
    cand = cand & query.partners(k, r, c)
    if len(cand) != 1:
        return None
    return next(iter(cand))


def pyramid_is_rigid(observations, catalog_ids, catalog, tolerance=DEFAULT_TOLERANCE):
    """True if the confirmed stars fit a single rotation.

    Pairwise angle checks alone accept a spike sitting near the mirror image
    of a catalog star across a nearly collinear base; the rotation fit does not.
    """
    ref = catalog.vectors(catalog_ids)
    try:
        sol = solve_wahba(observations, ref)
    except DegenerateGeometryError:
        return False
    res = np.linalg.norm(observations - ref @ sol.dcm.T, axis=1)
    return bool(np.all(res <= RESIDUAL_FACTOR * tolerance))


def find_reference_star(frame, triangle, triangle_ids, db, kv, tolerance=DEFAULT_TOLERANCE, *, query=None):
    """Index and catalog id of a reference observation confirming ``triangle``, or ``None``."""
    query = query or PairQuery(frame.observations, db, kv, tolerance)
    for r in range(len(frame.observations)):
        if r in triangle:
            continue
        d = _unique_fourth(query, triangle, triangle_ids, r)
        if d is not None:
            return r, d
    return None


def identify_remaining(frame, confirmed, db, kv, tolerance=DEFAULT_TOLERANCE, *, query=None,
                       method="pyramid", base=None):
    """Identify every observation not in ``confirmed`` against three confirmed stars.

    ``confirmed`` maps observation index to catalog id (at least three
    entries).  ``base`` optionally names the three observation indices used
    as the reference triangle; by default the first three confirmed
    indices are used.  Observations without a unique match are marked as
    spikes.

    Two observations resolving to the same catalog star cannot both be
    right.  Such conflicts are listed in ``extra["conflicts"]`` as
    ``(observation, catalog_id)``; the later observation is marked as a
    spike.  A conflict with a confirmed star means the base itself is
    suspect.
    """
    obs = frame.observations
    n = len(obs)
    query = query or PairQuery(obs, db, kv, tolerance)
    ids = np.full(n, UNIDENTIFIED, dtype=np.int64)
    for idx, cid in confirmed.items():
        ids[idx] = cid
    if base is None:
        base = tuple(sorted(confirmed)[:3])
    base_ids = tuple(confirmed[b] for b in base)
    used = set(confirmed.values())
    conflicts = []
    for s in range(n):
        if s in confirmed:
            continue
        d = _unique_fourth(query, base, base_ids, s)
        if d is None:
            ids[s] = SPIKE
        elif d in used:
            ids[s] = SPIKE
            conflicts.append((s, d))
        else:
            ids[s] = d
            used.add(d)
    result = IdResult(ids, method)
    result.extra["conflicts"] = conflicts
    result.extra["base_conflict"] = any(d in set(confirmed.values()) for _, d in conflicts)
    return result


def pyramid_identify(frame, db, kv, tolerance=DEFAULT_TOLERANCE, *, order="lexicographic", catalog=None):
    """Full lost-in-space identification of ``frame``.

    When ``catalog`` is given, triangle handedness is checked against the
    catalog directions to reject mirror-image matches, and the four
    confirmed stars must fit one rotation.

    A spike can complete a pyramid whose four directions lie nearly on one
    great circle: moving it across that circle barely changes its angles to
    the other three.  Such a pyramid is held back while the scan continues
    when it also leaves more observations unexplained than it identifies.
    If no better pyramid turns up, the held-back result with the most
    identified stars is returned.
    """
    obs = frame.observations
    n = len(obs)
    if n < 3:
        return failure(n, "pyramid", "too-few-observations")
    query = PairQuery(obs, db, kv, tolerance)
    vectors = catalog.vector if catalog is not None else None
    held = None
    pos = 0
    while True:
        found = find_unique_triangle(frame, db, kv, tolerance, query=query, order=order,
                                     catalog_vectors=vectors, start=pos)
        if found is None:
            return held if held is not None else failure(n, "pyramid", "no-unique-pyramid")
        tri, tri_ids, pos = found
        ref = find_reference_star(frame, tri, tri_ids, db, kv, tolerance, query=query)
        four = list(tri) + [ref[0]] if ref is not None else None
        if ref is not None and catalog is not None:
            if not pyramid_is_rigid(obs[four], list(tri_ids) + [ref[1]], catalog, tolerance):
                ref = None
        if ref is not None:
            confirmed = dict(zip(tri, tri_ids))
            confirmed[ref[0]] = ref[1]
            result = identify_remaining(frame, confirmed, db, kv, tolerance, query=query, base=tri)
            if not result.extra["base_conflict"]:
                result.extra["triangle"] = tri
                result.extra["reference"] = ref[0]
                if result.n_spikes <= result.n_identified or \
                        np.linalg.svd(obs[four], compute_uv=False)[2] >= GREAT_CIRCLE_SIGMA:
                    return result
                if held is None or result.n_identified > held.n_identified:
                    held = result
        pos += 1
