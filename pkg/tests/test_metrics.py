import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoprobe.metrics import (
    DegenerateFeatures, aggregate_over_seeds, compute_report, cosine_similarity, format_report,
    gram_matrix, gram_rows, metric_adv, metric_g, pearson, verdicts,
)


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 1], [1, 0]) - 0.7071068) < 1e-6
    with pytest.raises(DegenerateFeatures, match="degenerate feature vector"):
        cosine_similarity([0, 0], [1, 0])


def test_gram_rows_normalise():
    unit = np.array([[1.0, 0.0], [0.6, 0.8]])
    np.testing.assert_array_equal(gram_rows(unit), unit)
    scaled = unit.copy()
    scaled[1] *= 10
    np.testing.assert_allclose(gram_rows(scaled), unit, atol=1e-15)
    assert gram_rows([[3.0, 4.0, 0.0]]).shape == (1, 3)
    with pytest.raises(DegenerateFeatures, match="class 1"):
        gram_rows([[1.0, 0.0], [0.0, 0.0]])


def test_metric_g_examples():
    assert metric_g(gram_rows(np.eye(2))) == 0.5
    assert metric_g(gram_rows(np.ones((4, 3)))) == pytest.approx(0.0, abs=1e-15)
    assert metric_g(gram_rows([[2.0, 1.0]])) == pytest.approx(0.0, abs=1e-15)


def test_metric_adv_examples():
    f = np.array([[1.0, 2.0], [3.0, 1.0]])
    assert metric_adv(f, f) == pytest.approx(0.0, abs=1e-15)
    assert metric_adv([[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]) == 1.0
    # similarities 0.8 and 0.6 -> 1 - 0.7
    pairs_p = [[1.0, 0.0], [1.0, 0.0]]
    pairs_a = [[0.8, 0.6], [0.6, 0.8]]
    assert metric_adv(pairs_p, pairs_a) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(ValueError, match="no adversaries available"):
        metric_adv([], [])


def test_aggregate():
    assert aggregate_over_seeds([0.5]).mean == 0.5
    agg = aggregate_over_seeds([0.4, 0.6])
    assert agg.mean == pytest.approx(0.5) and (agg.min, agg.max) == (0.4, 0.6)
    with pytest.raises(ValueError):
        aggregate_over_seeds([])


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValueError, match="undefined correlation"):
        pearson([1, 2, 3], [5, 5, 5])
    with pytest.raises(ValueError):
        pearson([1], [2])


def _textbook_pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    vx = sum((a - mx) ** 2 for a in xs)
    vy = sum((b - my) ** 2 for b in ys)
    return cov / math.sqrt(vx * vy)


def test_pearson_matches_two_pass_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(2, 40))
        xs, ys = rng.normal(size=n), rng.normal(size=n)
        assert abs(pearson(xs, ys) - _textbook_pearson(list(xs), list(ys))) < 1e-12


def test_verdicts():
    assert verdicts(0.811, 0.426) == (True, True)
    assert verdicts(0.707, 0.306) == (False, False)
    assert verdicts(0.80, 0.35) == (True, True)
    assert verdicts(0.80, 0.35, threshold_g=0.9) == (False, True)


nonneg = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                elements=st.floats(0, 100, allow_nan=False)).filter(lambda a: np.all(a.sum(axis=1) > 1e-3))


@settings(max_examples=150, deadline=None)
@given(nonneg, st.randoms(use_true_random=False))
def test_metric_g_properties(feats, rnd):
    g = gram_rows(feats)
    ggt = gram_matrix(g)
    assert np.all(np.abs(np.linalg.norm(g, axis=1) - 1) <= 1e-6)
    assert np.all(np.abs(ggt - ggt.T) <= 1e-6)
    assert np.all(np.abs(np.diag(ggt) - 1) <= 1e-6)
    assert np.all(ggt >= -1e-6) and np.all(ggt <= 1 + 1e-6)
    mg = metric_g(g)
    assert -1e-12 <= mg <= 1
    perm = list(range(len(feats)))
    rnd.shuffle(perm)
    assert metric_g(gram_rows(feats[perm])) == mg
    scaled = feats * np.linspace(1, 50, len(feats))[:, None]
    assert metric_g(gram_rows(scaled)) == pytest.approx(mg, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(nonneg)
def test_gram_product_matches_pairwise_cosines(feats):
    ggt = gram_matrix(gram_rows(feats))
    k = len(feats)
    for a in range(k):
        for b in range(k):
            assert abs(ggt[a, b] - cosine_similarity(feats[a], feats[b])) <= 1e-6


def _features(rng, classes, seeds, d=5):
    return {(k, s): rng.random(d) + 0.01 for k in range(classes) for s in seeds}


def test_compute_report_mean_of_means(rng):
    seeds = (3, 7)
    protos = _features(rng, 3, seeds)
    advs = _features(rng, 3, seeds)
    rep = compute_report(protos, advs, 3, seeds)
    per_seed_g = [metric_g(gram_rows([protos[(k, s)] for k in range(3)])) for s in seeds]
    per_seed_adv = [metric_adv([protos[(k, s)] for k in range(3)], [advs[(k, s)] for k in range(3)]) for s in seeds]
    assert rep.m_g == pytest.approx(np.mean(per_seed_g), abs=1e-12)
    assert rep.m_adv == pytest.approx(np.mean(per_seed_adv), abs=1e-12)
    assert rep.m_g_spread == (min(per_seed_g), max(per_seed_g))
    # the seed-averaged Gram matrix reproduces the mean M_g
    assert 1 - rep.ggt.mean() == pytest.approx(rep.m_g, abs=1e-12)
    assert rep.nonnegative_features and rep.excluded_attack_failures == 0


def test_compute_report_excludes_failed_attacks(rng):
    seeds = (0,)
    protos = _features(rng, 3, seeds)
    advs = _features(rng, 3, seeds)
    advs[(1, 0)] = None
    rep = compute_report(protos, advs, 3, seeds)
    kept = [0, 2]
    want = metric_adv([protos[(k, 0)] for k in kept], [advs[(k, 0)] for k in kept])
    assert rep.m_adv == pytest.approx(want, abs=1e-12)
    assert rep.excluded_attack_failures == 1
    assert np.isnan(rep.per_class_adv_similarity[1])
    text = format_report(rep)
    assert "1 of 3 attacks failed" in text
    with pytest.raises(ValueError, match="no adversaries available"):
        compute_report(protos, {key: None for key in advs}, 3, seeds)


def test_compute_report_flags_negative_features(rng):
    protos = {(k, 0): rng.normal(size=4) for k in range(2)}
    rep = compute_report(protos, dict(protos), 2, (0,))
    assert not rep.nonnegative_features
    assert "negative activations" in format_report(rep)


def test_report_text_layout(rng):
    rep = compute_report(_features(rng, 2, (0,)), _features(rng, 2, (0,)), 2, (0,))
    text = format_report(rep, {"model": "abc"}, timestamp="2026-01-01T00:00:00")
    lines = text.splitlines()
    assert lines[1] == "# generated=2026-01-01T00:00:00"
    assert "# model=abc" in lines
    assert lines[-1].startswith("M_g=") and " M_adv=" in lines[-1] and " verdicts=" in lines[-1]
    assert "[gram]" in lines and "[adversary]" in lines
