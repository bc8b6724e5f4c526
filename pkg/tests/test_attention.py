import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ebama.attention import (
    CrossAttentionRecord,
    aggregate,
    aggregate_backward,
    merge_columns,
    renormalize_without_sot,
)
from ebama.errors import ConfigurationError, InputError


def rec(logits, res=16, layer="l", head=0):
    return CrossAttentionRecord(layer, head, res, np.asarray(logits, dtype=np.float64))


def test_identical_records_average_to_themselves(rng):
    x = rng.standard_normal((256, 4))
    agg = aggregate([rec(x), rec(x, layer="m")])
    np.testing.assert_array_equal(agg.features, x[:, 1:].T)


def test_two_records_average_hand_fixture():
    v = np.zeros((4, 3))
    w = np.zeros((4, 3))
    v[:, 1:] = [[1, 2], [3, 4], [5, 6], [7, 8]]
    w[:, 1:] = [[3, 0], [1, 0], [1, 2], [-7, 0]]
    agg = aggregate([rec(v, res=2), rec(w, res=2)], resolution=2)
    expected = np.array([[2, 1], [2, 2], [3, 4], [0, 4]], dtype=float).T
    np.testing.assert_array_equal(agg.features, expected)


def test_no_16x16_records_is_configuration_error(rng):
    with pytest.raises(ConfigurationError):
        aggregate([rec(rng.standard_normal((1024, 3)), res=32)])


def test_other_resolutions_are_ignored(rng):
    x = rng.standard_normal((256, 3))
    agg = aggregate([rec(x), rec(rng.standard_normal((1024, 3)), res=32)])
    np.testing.assert_array_equal(agg.features, x[:, 1:].T)


def test_renormalize_equal_logits():
    s = renormalize_without_sot(np.zeros((5, 3)))
    np.testing.assert_allclose(s, 0.5)


def test_renormalize_hand_softmax():
    s = renormalize_without_sot(np.array([[9.0, 1.0, 0.0]]))
    e = math.e
    assert s[0, 0] == pytest.approx(e / (e + 1), abs=1e-12)
    assert s[0, 1] == pytest.approx(1 / (e + 1), abs=1e-12)
    assert s[0, 0] == pytest.approx(0.731, abs=5e-4)


def test_renormalize_single_token():
    np.testing.assert_array_equal(renormalize_without_sot(np.array([[5.0, -2.0], [0.0, 3.0]])), 1.0)


def test_renormalize_needs_two_columns():
    with pytest.raises(InputError):
        renormalize_without_sot(np.zeros((4, 1)))


def test_record_shape_checked():
    with pytest.raises(InputError):
        rec(np.zeros((10, 3)))


def test_token_count_drops_padding(rng):
    x = rng.standard_normal((256, 10))
    agg = aggregate([rec(x)], token_count=3)
    assert agg.features.shape == (3, 256)
    np.testing.assert_allclose(agg.scores.sum(axis=0), 1.0, atol=1e-12)
    with pytest.raises(InputError):
        aggregate([rec(x)], token_count=10)


def test_k_copies_equal_one(rng):
    x = rng.standard_normal((256, 5))
    a1 = aggregate([rec(x)])
    a3 = aggregate([rec(x)] * 3)
    np.testing.assert_allclose(a3.features, a1.features, atol=1e-15)
    np.testing.assert_allclose(a3.scores, a1.scores, atol=1e-15)


def test_permutation_equivariance(rng):
    x = rng.standard_normal((256, 5))
    perm = np.array([2, 0, 3, 1])
    xp = x.copy()
    xp[:, 1:] = x[:, 1:][:, perm]
    a, b = aggregate([rec(x)]), aggregate([rec(xp)])
    np.testing.assert_allclose(b.features, a.features[perm], atol=1e-15)
    np.testing.assert_allclose(b.scores, a.scores[perm], atol=1e-14)


def test_subtoken_merge_averages_and_stays_normalised(rng):
    x = rng.standard_normal((256, 6))
    spans = [[0], [1, 2, 3], [4]]
    agg = aggregate([rec(x)], token_count=5, spans=spans)
    np.testing.assert_allclose(agg.features[1], x[:, 2:5].mean(axis=1), atol=1e-15)
    np.testing.assert_allclose(agg.scores.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(merge_columns(x, None), x)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (16, 5), elements=st.floats(-30, 30)))
def test_scores_always_normalised(x):
    agg = aggregate([rec(x, res=4)], resolution=4)
    np.testing.assert_allclose(agg.scores.sum(axis=0), 1.0, atol=1e-6)


@pytest.mark.parametrize("spans", [None, [[0, 1], [2], [3, 4]]])
def test_backward_matches_finite_differences(rng, spans):
    recs = [rec(rng.standard_normal((16, 7)), res=4, layer=str(i)) for i in range(2)]
    gf = rng.standard_normal((3 if spans else 5, 16))
    gs = rng.standard_normal(gf.shape)
    n = 5

    def objective(records):
        a = aggregate(records, token_count=n, spans=spans, resolution=4)
        return float((a.features * gf).sum() + (a.scores * gs).sum())

    agg = aggregate(recs, token_count=n, spans=spans, resolution=4)
    grads = aggregate_backward(recs, agg, gf, gs, n, spans)
    h = 1e-6
    for k, r in enumerate(recs):
        num = np.zeros_like(r.logits)
        for idx in np.ndindex(r.logits.shape):
            plus, minus = r.logits.copy(), r.logits.copy()
            plus[idx] += h
            minus[idx] -= h
            rp = [rec(plus, 4) if j == k else recs[j] for j in range(2)]
            rm = [rec(minus, 4) if j == k else recs[j] for j in range(2)]
            num[idx] = (objective(rp) - objective(rm)) / (2 * h)
        np.testing.assert_allclose(grads[k], num, atol=1e-7)
