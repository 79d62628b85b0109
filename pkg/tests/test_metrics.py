import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pabnet.errors import InvalidInputError, ProtocolError
from pabnet.metrics import (
    ScoreSet,
    best_threshold,
    cosine_similarity,
    eer,
    gar_at_far,
    kfold_stats,
    rank_k_identification,
    rates_at,
    roc_curve,
    similarity_histogram,
    verification_accuracy,
)


def test_cosine_cases():
    z = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(z, z) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.8, abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(InvalidInputError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), a=st.floats(0.01, 100), b=st.floats(0.01, 100))
def test_cosine_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=6), rng.normal(size=6)
    assert cosine_similarity(a * z1, b * z2) == pytest.approx(cosine_similarity(z1, z2), abs=1e-12)


def test_rates_perfect():
    s = ScoreSet([1.0, 1.0], [0.0, 0.0])
    assert rates_at(s, 0.5) == (0.0, 1.0)


def test_rates_identical():
    s = ScoreSet([0.5], [0.5])
    assert rates_at(s, 0.5) == (1.0, 1.0)
    assert rates_at(s, 0.6) == (0.0, 0.0)


def test_roc_monotone():
    rng = np.random.default_rng(0)
    roc = roc_curve(ScoreSet(rng.normal(1, 1, 50), rng.normal(0, 1, 70)))
    assert np.all(np.diff(roc.far) <= 0) and np.all(np.diff(roc.gar) <= 0)
    assert roc.far[0] == 1.0 and roc.gar[0] == 1.0
    assert roc.far[-1] == 0.0 and roc.gar[-1] == 0.0


def test_eer_perfect_and_identical():
    assert eer(ScoreSet([0.9, 0.8], [0.1, 0.2])) == 0.0
    assert eer(ScoreSet([0.3, 0.5, 0.7], [0.3, 0.5, 0.7])) == pytest.approx(0.5)


def test_eer_small_sweep_oracle():
    g, i = [0.9, 0.8, 0.3], [0.7, 0.2, 0.1]
    lo, hi = oracles.eer_bracket(g, i)
    value = eer(ScoreSet(g, i))
    assert lo <= value <= hi
    assert value == pytest.approx(1 / 3)


def test_gar_perfect():
    for t in (0.001, 0.01, 0.5):
        assert gar_at_far(ScoreSet([0.9, 0.8], [0.1, 0.2]), t) == 1.0


def test_gar_hand_sweep():
    assert gar_at_far(ScoreSet([0.9, 0.8], [0.85, 0.1]), 0.5) == 0.5


def test_gar_far_exactly_at_target():
    # one impostor in ten at FAR = 0.1 exactly does not qualify for target 0.1
    s = ScoreSet([0.9, 0.5], [0.9] + [0.0] * 9)
    assert gar_at_far(s, 0.1) == 0.0


def test_gar_bad_target():
    with pytest.raises(InvalidInputError):
        gar_at_far(ScoreSet([1.0], [0.0]), 0.0)


def _random_scores(rng):
    n_g, n_i = rng.integers(1, 101, size=2)
    # coarse rounding so ties between and within classes are common
    g = np.round(rng.normal(rng.uniform(0, 2), 1, n_g), rng.integers(1, 4))
    i = np.round(rng.normal(0, 1, n_i), rng.integers(1, 4))
    return g.tolist(), i.tolist()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_eer_within_one_step_of_sweep(seed):
    g, i = _random_scores(np.random.default_rng(seed))
    lo, hi = oracles.eer_bracket(g, i)
    value = eer(ScoreSet(g, i))
    assert lo - 1e-12 <= value <= hi + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), target=st.floats(0.001, 0.999))
def test_gar_matches_sweep(seed, target):
    g, i = _random_scores(np.random.default_rng(seed))
    assert gar_at_far(ScoreSet(g, i), target) == oracles.gar_at(g, i, target)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(0.001, 0.999), b=st.floats(0.001, 0.999))
def test_gar_monotone_in_target(seed, a, b):
    s = ScoreSet(*_random_scores(np.random.default_rng(seed)))
    lo, hi = sorted((a, b))
    assert gar_at_far(s, lo) <= gar_at_far(s, hi)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    g, i = _random_scores(rng)
    a = ScoreSet(g, i)
    b = ScoreSet(rng.permutation(g), rng.permutation(i))
    assert eer(a) == eer(b)
    assert gar_at_far(a, 0.1) == gar_at_far(b, 0.1)
    assert best_threshold(a) == best_threshold(b)


def test_cmc_identical_probes():
    rng = np.random.default_rng(0)
    gallery = rng.normal(size=(6, 8))
    labels = list("abcdef")
    cmc = rank_k_identification(gallery, labels, gallery, labels, 3)
    assert cmc.at(1) == 1.0


def test_cmc_full_rank():
    rng = np.random.default_rng(1)
    cmc = rank_k_identification(rng.normal(size=(9, 4)), list("abcabcabc"),
                                rng.normal(size=(3, 4)), list("abc"), 3)
    assert cmc.at(3) == 1.0


def test_cmc_small_oracle():
    rng = np.random.default_rng(42)
    probe, gallery = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
    probe_labels, gallery_labels = [0, 1, 2, 3, 1], [0, 1, 2, 3]
    cmc = rank_k_identification(probe, probe_labels, gallery, gallery_labels, 4)
    ref = oracles.cmc(probe.tolist(), probe_labels, gallery.tolist(), gallery_labels, 4)
    np.testing.assert_allclose(cmc.accuracy, ref, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_gallery=st.integers(1, 8), n_probe=st.integers(1, 12))
def test_cmc_monotone_and_oracle(seed, n_gallery, n_probe):
    rng = np.random.default_rng(seed)
    gallery = rng.normal(size=(n_gallery, 5))
    labels = list(range(n_gallery))
    probe_labels = rng.integers(n_gallery, size=n_probe).tolist()
    probe = gallery[probe_labels] + rng.normal(scale=1.0, size=(n_probe, 5))
    cmc = rank_k_identification(probe, probe_labels, gallery, labels, n_gallery)
    assert np.all(np.diff(cmc.accuracy) >= 0)
    assert cmc.at(n_gallery) == 1.0
    ref = oracles.cmc(probe.tolist(), probe_labels, gallery.tolist(), labels, n_gallery)
    np.testing.assert_allclose(cmc.accuracy, ref, atol=1e-12)


def test_cmc_protocol_errors():
    z = np.eye(3)
    with pytest.raises(ProtocolError):
        rank_k_identification(z, ["a", "b", "z"], z, ["a", "b", "c"], 1)
    with pytest.raises(ProtocolError):
        rank_k_identification(z, ["a", "b", "a"], z, ["a", "b", "a"], 1)


def test_kfold_hand_values():
    mean, std = kfold_stats([0.9, 1.0])
    assert mean == pytest.approx(0.95, abs=1e-15)
    assert std == pytest.approx(0.0707107, abs=1e-7)
    assert kfold_stats([0.8] * 10) == (pytest.approx(0.8), 0.0)
    assert math.isnan(kfold_stats([0.7])[1])


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.floats(0, 1), min_size=2, max_size=12), seed=st.integers(0, 2**16))
def test_kfold_permutation_invariant(vals, seed):
    perm = np.random.default_rng(seed).permutation(vals)
    a, b = kfold_stats(vals), kfold_stats(perm)
    assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)


def test_histogram_all_ones():
    edges, g, i = similarity_histogram(ScoreSet([1.0] * 5, [1.0] * 3), 10)
    assert g[-1] == 1.0 and g[:-1].sum() == 0.0
    assert i[-1] == 1.0


def test_histogram_counting_oracle():
    rng = np.random.default_rng(3)
    g, i = rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 300)
    edges, gd, idn = similarity_histogram(ScoreSet(g, i), 8)
    assert gd.sum() == pytest.approx(1.0) and idn.sum() == pytest.approx(1.0)
    for b in range(8):
        lo, hi = edges[b], edges[b + 1]
        last = b == 7
        count = sum((lo <= s < hi) or (last and s == hi) for s in g)
        assert gd[b] == pytest.approx(count / 500, abs=1e-15)


def test_threshold_and_accuracy():
    s = ScoreSet([0.9, 0.8, 0.7], [0.1, 0.75])
    t = best_threshold(s)
    assert verification_accuracy(s, t) == pytest.approx(0.8)
