import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quatera_rsi.attitude import delta_c, quat_to_dcm
from quatera_rsi.frames import SPIKE, Frame
from quatera_rsi.pyramid import (
    PairQuery,
    find_reference_star,
    find_unique_triangle,
    identify_remaining,
    pyramid_identify,
    pyramid_is_rigid,
    triangle_matches,
)
from quatera_rsi.simulator import ARCSEC, DEG, DEFAULT_CAMERA, generate_frame, random_fov_directions


def _attitude(rng):
    q = rng.standard_normal(4)
    return quat_to_dcm(q / np.linalg.norm(q))


def _frame(cat, rng, n_spikes=0, noise=False, min_stars=0):
    while True:
        frame, truth = generate_frame(cat, DEFAULT_CAMERA, _attitude(rng), 0.0, rng, n_spikes=n_spikes, noise=noise)
        if np.count_nonzero(truth != SPIKE) >= min_stars:
            return frame, truth


def _subset(frame, truth, n_stars, n_spikes=0, rng=None):
    stars = np.flatnonzero(truth != SPIKE)[:n_stars]
    spikes = np.flatnonzero(truth == SPIKE)[:n_spikes]
    keep = np.concatenate([stars, spikes])
    return Frame(frame.time, frame.observations[keep]), truth[keep]


def _nearest_neighbour(cat, cid):
    c = cat.directions @ cat.vector(cid)
    c[cat.index_of[cid]] = -1.0
    return math.acos(min(1.0, c.max()))


def _misidentified(result, truth):
    ok = result.ids >= 0
    return int(np.count_nonzero(result.ids[ok] != truth[ok]))


def test_five_star_frame_triangle_and_reference(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(10)
    frame, truth = _subset(*_frame(cat, rng, min_stars=5), 5)
    tri, ids, _ = find_unique_triangle(frame, db, kv)
    assert list(ids) == truth[list(tri)].tolist()
    r, rid = find_reference_star(frame, tri, ids, db, kv)
    assert r not in tri and rid == truth[r]


def test_two_observations_short_circuit(sky):
    cat, db, kv = sky
    frame = Frame(0.0, [[0, 0, 1.0], [0, 0.1, 0.995]])
    assert find_unique_triangle(frame, db, kv) is None
    res = pyramid_identify(frame, db, kv, catalog=cat)
    assert not res.success and res.reason == "too-few-observations"


def test_off_catalog_angles_give_no_triangle(sky):
    _, db, kv = sky
    # three points on a great circle, 40 deg apart: wider than any catalog pair
    obs = [delta_c(np.array([1.0, 0, 0]), a).T @ [0, 0, 1.0] for a in (-40 * DEG, 0.0, 40 * DEG)]
    assert find_unique_triangle(Frame(0.0, obs), db, kv) is None


def test_three_star_frame_has_no_reference(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(11)
    frame, truth = _subset(*_frame(cat, rng, min_stars=3), 3)
    tri, ids, _ = find_unique_triangle(frame, db, kv)
    assert find_reference_star(frame, tri, ids, db, kv) is None
    res = pyramid_identify(frame, db, kv, catalog=cat)
    assert not res.success and res.reason == "no-unique-pyramid"


def test_spike_as_only_fourth_candidate_is_rejected(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(12)
    for _ in range(20):
        frame, truth = _subset(*_frame(cat, rng, n_spikes=1, min_stars=3), 3, 1)
        found = find_unique_triangle(frame, db, kv)
        if found is None:
            continue
        tri, ids, _ = found
        assert find_reference_star(frame, tri, ids, db, kv) is None


def test_eight_stars_identified_with_and_without_spikes(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(13)
    frame, truth = _frame(cat, rng, n_spikes=3, min_stars=8)
    clean = _subset(frame, truth, 8)
    res = pyramid_identify(clean[0], db, kv, catalog=cat)
    assert res.n_identified == 8 and res.n_spikes == 0
    assert np.array_equal(res.ids, clean[1])
    dirty = _subset(frame, truth, 8, 3)
    res = pyramid_identify(dirty[0], db, kv, catalog=cat)
    assert res.n_identified == 8 and res.n_spikes == 3
    assert np.array_equal(res.ids, dirty[1])


def test_identify_remaining_with_nothing_left(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(14)
    frame, truth = _subset(*_frame(cat, rng, min_stars=4), 4)
    confirmed = {i: int(truth[i]) for i in range(4)}
    res = identify_remaining(frame, confirmed, db, kv)
    assert res.ids.tolist() == truth.tolist()
    assert res.extra["conflicts"] == [] and not res.extra["base_conflict"]


def test_identify_remaining_flags_base_conflict(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(15)
    frame, truth = _subset(*_frame(cat, rng, min_stars=6), 6)
    # claim the star seen at observation 5 is already confirmed at observation 3
    confirmed = {0: int(truth[0]), 1: int(truth[1]), 2: int(truth[2]), 3: int(truth[5])}
    res = identify_remaining(frame, confirmed, db, kv, base=(0, 1, 2))
    assert res.ids[5] == SPIKE
    assert (5, int(truth[5])) in res.extra["conflicts"] and res.extra["base_conflict"]


def test_noiseless_monte_carlo_is_exact(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(16)
    for _ in range(1000):
        frame, truth = _frame(cat, rng)
        res = pyramid_identify(frame, db, kv, catalog=cat)
        assert _misidentified(res, truth) == 0
        if np.count_nonzero(truth != SPIKE) >= 4:
            assert res.success
            # only members of close doubles may stay ambiguous
            for cid in truth[res.ids < 0]:
                assert _nearest_neighbour(cat, cid) < 60 * ARCSEC


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n_spikes=st.integers(0, 10))
def test_no_false_positive_with_spikes(sky, seed, n_spikes):
    cat, db, kv = sky
    rng = np.random.default_rng(seed)
    frame, truth = _frame(cat, rng, n_spikes=n_spikes)
    res = pyramid_identify(frame, db, kv, catalog=cat)
    assert _misidentified(res, truth) == 0
    assert not np.any(res.ids[truth == SPIKE] >= 0)


def test_spike_only_frames_fail(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(17)
    for _ in range(30):
        frame = Frame(0.0, random_fov_directions(DEFAULT_CAMERA, 10, rng))
        assert not pyramid_identify(frame, db, kv, catalog=cat).success


def test_deterministic(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(18)
    frame, _ = _frame(cat, rng, n_spikes=5, noise=True)
    a = pyramid_identify(frame, db, kv, catalog=cat)
    b = pyramid_identify(Frame(frame.time, frame.observations.copy()), db, kv, catalog=cat)
    assert np.array_equal(a.ids, b.ids) and a.extra["triangle"] == b.extra["triangle"]


def test_smart_order_gives_same_identification(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(19)
    for _ in range(50):
        frame, truth = _frame(cat, rng, n_spikes=3, min_stars=5)
        res = pyramid_identify(frame, db, kv, order="smart", catalog=cat)
        assert np.array_equal(res.ids, truth)


def test_mirror_image_is_not_rigid(sky):
    cat, _, _ = sky
    rng = np.random.default_rng(20)
    frame, truth = _subset(*_frame(cat, rng, min_stars=4), 4)
    assert pyramid_is_rigid(frame.observations, truth, cat)
    mirrored = frame.observations * np.array([1.0, -1.0, 1.0])
    assert not pyramid_is_rigid(mirrored, truth, cat)


def test_triangle_handedness_rejects_mirror(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(21)
    frame, truth = _subset(*_frame(cat, rng, min_stars=3), 3)
    mirrored = PairQuery(frame.observations * np.array([1.0, -1.0, 1.0]), db, kv)
    if abs(mirrored.triple_product(0, 1, 2)) > 1e-3:
        found = triangle_matches(mirrored, 0, 1, 2, limit=50, catalog_vectors=cat.vector)
        assert tuple(truth) not in found
        assert tuple(truth) in triangle_matches(mirrored, 0, 1, 2, limit=50)


def test_pair_query_bounds_bracket_the_true_pair(sky):
    cat, db, kv = sky
    rng = np.random.default_rng(22)
    frame, truth = _subset(*_frame(cat, rng, noise=True, min_stars=2), 2)
    q = PairQuery(frame.observations, db, kv)
    start, stop = q.bounds(0, 1)
    pairs = set(zip(db._a_list[start:stop], db._b_list[start:stop]))
    a, b = sorted(truth.tolist())
    assert (a, b) in pairs or (b, a) in pairs
    assert q.bounds(1, 0) == (start, stop)
    assert int(truth[1]) in q.partners(0, 1, int(truth[0]))


def test_spike_completing_a_pyramid_over_a_collinear_cluster_is_held_back(sky):
    # a maneuver frame where a spike 230 arcsec from a real star closes a pyramid
    # on three nearly collinear stars: the pair angles and the rigid fit both pass
    from quatera_rsi.simulator import case_config, run_scenario

    cat, db, kv = sky
    sample = next(s for s in run_scenario(case_config(3, 1.0, seed=109_000_091), cat) if s.frame.time == 24.0)
    res = pyramid_identify(sample.frame, db, kv, catalog=cat)
    assert res.success
    ok = res.ids >= 0
    assert np.array_equal(res.ids[ok], sample.truth_ids[ok])
    assert res.n_identified > res.n_spikes
