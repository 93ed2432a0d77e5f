import warnings

import numpy as np
import pytest

from sdareid.data import DomainSpec, generate_domain, make_query_gallery
from sdareid.evaluation import (
    EvalResult,
    anti_forgetting_eval,
    average_precision,
    centroid_shift,
    evaluate_retrieval,
    extract_refined_features,
    forgetting_curve,
    pairwise_distances,
    score_ranking,
)
from sdareid.model import clone_bundle


@pytest.mark.parametrize("rel, expected", [([1, 1, 1], 1.0), ([0, 0, 1], 1 / 3), ([1, 0, 1], 5 / 6)])
def test_average_precision_cases(rel, expected):
    assert average_precision(rel) == pytest.approx(expected, abs=1e-15)


def test_average_precision_needs_a_match():
    with pytest.raises(ValueError):
        average_precision([0, 0])


def test_one_hot_identity_features_are_perfect():
    ids = np.repeat(np.arange(5), 4)
    cams = np.tile(np.arange(2), 10)
    feats = np.eye(5)[ids]
    r = score_ranking(pairwise_distances(feats, feats), ids, cams, ids, cams)
    assert r.mAP == 1.0 and r.rank1 == 1.0 and r.query_count == 20


def test_random_ranking_approaches_relevant_fraction():
    n_ids, per_id = 10, 120
    g_ids = np.repeat(np.arange(n_ids), per_id)
    g_cams = np.tile(np.arange(2), n_ids * per_id // 2)
    q_ids = np.arange(n_ids)
    q_cams = np.full(n_ids, 5)
    prior = per_id / len(g_ids)
    for seed in range(5):
        dist = np.random.default_rng(seed).random((n_ids, len(g_ids)))
        r = score_ranking(dist, q_ids, q_cams, g_ids, g_cams)
        assert abs(r.mAP / prior - 1) < 0.5


def _brute_force(dist, q_ids, q_cams, g_ids, g_cams, max_rank):
    aps, hits = [], np.zeros(max_rank)
    for i in range(len(q_ids)):
        cand = [j for j in range(len(g_ids)) if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        cand.sort(key=lambda j: dist[i, j])
        rel = [g_ids[j] == q_ids[i] for j in cand]
        if not any(rel):
            continue
        precisions = []
        found = 0
        for pos, r in enumerate(rel, start=1):
            if r:
                found += 1
                precisions.append(found / pos)
        aps.append(sum(precisions) / len(precisions))
        first = rel.index(True)
        for k in range(max_rank):
            hits[k] += first <= k
    if not aps:
        return None
    return sum(aps) / len(aps), hits / len(aps), len(aps)


def test_scoring_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        n_q, n_g, n_ids = rng.integers(1, 8), rng.integers(2, 31), rng.integers(1, 6)
        q_ids, g_ids = rng.integers(0, n_ids, n_q), rng.integers(0, n_ids, n_g)
        q_cams, g_cams = rng.integers(0, 3, n_q), rng.integers(0, 3, n_g)
        dist = rng.random((n_q, n_g))
        expected = _brute_force(dist, q_ids, q_cams, g_ids, g_cams, 10)
        if expected is None:
            continue
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            r = score_ranking(dist, q_ids, q_cams, g_ids, g_cams, max_rank=10)
        assert len(caught) == (expected[2] < n_q)
        assert abs(r.mAP - expected[0]) <= 1e-12
        assert np.max(np.abs(np.array(r.cmc) - expected[1])) <= 1e-12
        assert r.query_count == expected[2]
        assert all(b >= a for a, b in zip(r.cmc, r.cmc[1:]))
        checked += 1


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_map_depends_only_on_ranking():
    rng = np.random.default_rng(3)
    ids = rng.integers(0, 6, 40)
    cams = rng.integers(0, 3, 40)
    dist = rng.random((40, 40))
    a = score_ranking(dist, ids, cams, ids, cams)
    b = score_ranking(dist**3, ids, cams, ids, cams)
    assert a == b


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_scoring_is_thread_count_independent():
    rng = np.random.default_rng(4)
    ids = rng.integers(0, 8, 60)
    cams = rng.integers(0, 3, 60)
    dist = rng.random((60, 60))
    one = score_ranking(dist, ids, cams, ids, cams, threads=1)
    assert all(score_ranking(dist, ids, cams, ids, cams, threads=t) == one for t in (2, 4, 7))


def test_query_without_cross_camera_match_is_dropped():
    g_ids, g_cams = np.array([0, 0, 1]), np.array([0, 0, 1])
    with pytest.warns(UserWarning, match="1 queries"):
        r = score_ranking(np.random.default_rng(0).random((2, 3)), np.array([0, 1]), np.array([0, 0]), g_ids, g_cams)
    assert r.query_count == 1


def test_eval_result_invariants():
    with pytest.raises(ValueError):
        EvalResult(1, 1.2, (1.0,), 1)
    with pytest.raises(ValueError):
        EvalResult(1, 0.5, (0.8, 0.6), 1)
    r = EvalResult(1, 0.5, (0.4, 0.7, 0.9), 3)
    assert r.rank1 == 0.4 and r.rank(10) == 0.9


@pytest.fixture
def domain():
    return generate_domain(DomainSpec(id_count=12, cameras=3, samples_per_id_per_camera=2, input_dim=6, identity_dim=3, seed=1))


def test_refined_features_are_unit_rows_and_deterministic(small_bundle, domain):
    f = extract_refined_features(small_bundle, domain.x)
    assert f.shape == (len(domain), 5)
    assert np.max(np.abs(np.linalg.norm(f, axis=1) - 1)) < 1e-10
    assert f.tobytes() == extract_refined_features(small_bundle, domain.x).tobytes()
    raw = extract_refined_features(small_bundle, domain.x, normalize=False)
    assert not np.allclose(np.linalg.norm(raw, axis=1), 1)


def test_anti_forgetting_averages(small_bundle, domain):
    q, g = make_query_gallery(domain, seed=0)
    other = generate_domain(DomainSpec(id_count=8, cameras=2, input_dim=6, identity_dim=3, seed=2, domain=2, id_offset=12))
    q2, g2 = make_query_gallery(other, seed=0)
    single = anti_forgetting_eval(small_bundle, [(q, g)])
    assert single.mean_mAP == single.results[0].mAP and single.mean_rank1 == single.results[0].rank1
    both = anti_forgetting_eval(small_bundle, [(q, g), (q2, g2)])
    assert len(both.results) == 2 and [r.domain for r in both.results] == [1, 2]
    assert abs(both.mean_mAP - (both.results[0].mAP + both.results[1].mAP) / 2) < 1e-12
    assert abs(both.mean_rank1 - (both.results[0].rank1 + both.results[1].rank1) / 2) < 1e-12
    assert both.results[0] == evaluate_retrieval(small_bundle, q, g)
    with pytest.raises(ValueError):
        anti_forgetting_eval(small_bundle, [])


def test_forgetting_curve():
    assert forgetting_curve([0.4, 0.4, 0.4]).drop == 0
    curve = forgetting_curve([0.6, 0.5, 0.44])
    assert curve.series == [0.6, 0.5, 0.44]
    assert abs(curve.drop - 0.16) < 1e-12
    with pytest.raises(ValueError):
        forgetting_curve([])


def test_centroid_shift_identity_and_translation(small_bundle, domain):
    assert centroid_shift(small_bundle, small_bundle, domain) == 0.0
    moved = clone_bundle(small_bundle)
    tau = np.array([0.3, -1.2, 0.0, 2.0, 0.5])
    moved["backbone"]["b2"].data = moved["backbone"]["b2"].data + tau
    assert abs(centroid_shift(small_bundle, moved, domain) - np.linalg.norm(tau)) < 1e-12
