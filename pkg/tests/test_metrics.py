import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dystab.metrics import canonical_foreground, f_alpha_binary, flip_rate, mean_iou, miou, precision_recall
from dystab.static import f_measure


def oracle_iou(p, g):
    inter = union = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def oracle_f(p, g, alpha2):
    tp = sum(a * b for a, b in zip(p.ravel().tolist(), g.ravel().tolist()))
    npred, ngt = int(p.sum()), int(g.sum())
    prec = tp / npred if npred else 0.0
    rec = tp / ngt if ngt else 0.0
    if prec == 0 and rec == 0:
        return 0.0
    return (1 + alpha2) * prec * rec / (alpha2 * prec + rec)


def random_pairs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        density = rng.uniform(0.05, 0.95)
        p = rng.random((8, 8)) < density
        g = rng.random((8, 8)) < rng.uniform(0.05, 0.95)
        if i % 50 == 0:
            p = g.copy()
        yield p, g


def test_miou_matches_oracle():
    for p, g in random_pairs():
        assert miou(p, g) == pytest.approx(oracle_iou(p, g), abs=1e-12)


def test_f_measure_matches_oracle():
    for p, g in random_pairs(seed=1):
        expect = oracle_f(p, g, 1.5)
        assert f_alpha_binary(p, g, 1.5) == pytest.approx(expect, abs=1e-12)
        # the soft version on binary inputs differs only by its 1e-8 stabilizers
        assert f_measure(p, g, 1.5) == pytest.approx(expect, abs=1e-5)


def test_f_measure_worked_example():
    target = np.ones((8, 8))
    pred = np.zeros((8, 8))
    pred[:, :4] = 1
    assert f_alpha_binary(pred, target, 1.5) == pytest.approx(0.625, abs=1e-12)
    assert f_measure(pred, target, 1.5) == pytest.approx(0.625, abs=1e-6)


def test_miou_edge_cases():
    z = np.zeros((4, 4), bool)
    o = np.ones((4, 4), bool)
    assert miou(z, z) == 1.0
    assert miou(z, o) == 0.0
    with pytest.raises(ValueError):
        miou(z, np.zeros((3, 3)))
    assert np.isnan(mean_iou([], []))


def test_precision_recall_example():
    p = np.array([[1, 1, 0, 0]], bool)
    g = np.array([[1, 0, 1, 1]], bool)
    assert precision_recall(p, g) == (0.5, pytest.approx(1 / 3))


masks = arrays(np.bool_, (6, 6))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_miou_symmetric_and_bounded(p, g):
    v = miou(p, g)
    assert 0.0 <= v <= 1.0
    assert v == miou(g, p)
    assert miou(p, p) == 1.0


def test_canonical_foreground_flips_border_owned_maps():
    m = np.zeros((8, 8), np.float32)
    m[3:5, 3:5] = 1
    np.testing.assert_array_equal(canonical_foreground(m), m)
    np.testing.assert_array_equal(canonical_foreground(1 - m), m)
    batch = np.stack([m, 1 - m])
    np.testing.assert_array_equal(canonical_foreground(batch), np.stack([m, m]))


def test_flip_rate_counts_label_swaps():
    m = np.zeros((8, 8), np.float32)
    m[2:5, 2:5] = 1
    zero = np.zeros((8, 8, 2), np.float32)
    assert flip_rate([m, m, m], [zero, zero]) == 0.0
    assert flip_rate([m, 1 - m, 1 - m], [zero, zero]) == 0.5
