import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxelforge import segloss as sl


def _frac_iou(p, y):
    """Exact rational IOU loss for binary/rational inputs."""
    p = [Fraction(v).limit_denominator(10**9) for v in p]
    inter = sum(a * b for a, b in zip(p, y))
    union = sum(p) + sum(y) - inter
    return Fraction(0) if union == 0 else 1 - inter / union


# --------------------------------------------------------------------------
# examples


def test_iou_examples():
    assert sl.iou_loss([1, 0, 1, 0], [1, 0, 1, 0]).value == 0
    assert sl.iou_loss([0, 1], [1, 0]).value == 1
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    assert sl.iou_loss(0.5 * y, y).value == pytest.approx(0.5, abs=1e-15)


def test_pure_fn_fp_examples():
    y = np.zeros(105)
    y[:100] = 1
    p = y.copy()
    p[95:100] = 0
    assert sl.iou_loss(p, y).value == pytest.approx(0.05, abs=1e-12)
    assert sl.iou_loss(np.ones(105), y).value == pytest.approx(5 / 105, abs=1e-12)


def test_dice_examples():
    assert sl.dice_loss([1, 0, 1], [1, 0, 1]).value == 0
    assert sl.dice_loss([0, 1], [1, 0]).value == 1
    assert sl.dice_loss([0, 1], [1, 1]).value == pytest.approx(1 / 3, abs=1e-15)
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    assert sl.dice_loss(0.5 * y, y).value == pytest.approx(1 / 3, abs=1e-15)


def test_power_examples(rng):
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    assert sl.iou_loss_power(0.5 * y, y, 2).value == pytest.approx(0.75, abs=1e-15)
    for _ in range(100):
        p = rng.uniform(size=20)
        yy = (rng.uniform(size=20) < 0.5).astype(float)
        assert sl.iou_loss_power(p, yy, 1).value == pytest.approx(sl.iou_loss(p, yy).value, abs=1e-15)
    with pytest.raises(ValueError):
        sl.iou_loss_power(y, y, 0)


def test_general_examples(rng):
    p = rng.uniform(size=30)
    y = (rng.uniform(size=30) < 0.5).astype(float)
    assert sl.iou_loss_general(p, y, lambda t: t).value == pytest.approx(sl.iou_loss(p, y).value, abs=1e-15)
    sq = sl.iou_loss_general(p, y, np.square).value
    assert sq == pytest.approx(sl.iou_loss_power(p, y, 2).value, abs=1e-15)
    pb = (rng.uniform(size=30) < 0.5).astype(float)
    smooth = sl.iou_loss_general(pb, y, lambda t: 3 * t**2 - 2 * t**3).value
    assert smooth == pytest.approx(float(_frac_iou(pb, y)), abs=1e-15)
    per_voxel = [lambda t: t] * 15 + [lambda t: t**3] * 15
    mixed = sl.iou_loss_general(p, y, per_voxel).value
    q = np.concatenate([p[:15], p[15:] ** 3])
    assert mixed == pytest.approx(sl.iou_loss(q, y).value, abs=1e-15)


def test_general_endpoint_check():
    with pytest.raises(ValueError, match="f\\(0\\)"):
        sl.iou_loss_general([0.5], [1], lambda t: t + 0.1)
    with pytest.raises(ValueError):
        sl.iou_loss_general([0.5], [1], lambda t: 0.9 * t)


def test_general_gradient():
    p = np.array([0.2, 0.7, 0.4])
    y = np.array([1.0, 0.0, 1.0])
    rep = sl.iou_loss_general(p, y, np.square, fprime=lambda t: 2 * t, grad=True)
    ref = sl.iou_loss_power(p, y, 2, grad=True)
    assert np.allclose(rep.gradient, ref.gradient, atol=1e-15)


def test_wce_examples():
    rep = sl.weighted_cross_entropy([0.5, 0.5], [1, 0])
    assert rep.value == pytest.approx(0.5 * math.log(2), abs=1e-15)
    assert sl.weighted_cross_entropy(np.zeros(4), np.zeros(4)).value < 1e-6


def test_wce_weight_ratio():
    # w = 0.1: one FN voxel among the foreground, one FP voxel in background
    y = np.zeros(10)
    y[0] = 1
    p_fn = np.zeros(10)  # foreground missed: p=0 where y=1
    p_fn[0] = 0.2
    p_fp = y.copy()
    p_fp[1] = 0.8  # background predicted 0.8
    per_voxel = -math.log(0.2)
    fn = sl.weighted_cross_entropy(p_fn, y).value
    fp = sl.weighted_cross_entropy(p_fp, y).value
    clip = -math.log(1 - sl.CE_CLIP)
    assert fn == pytest.approx((0.1 * per_voxel + 9 * 0.9 * clip) / 10, rel=1e-12)
    assert fp == pytest.approx((0.9 * per_voxel + 0.1 * clip + 8 * 0.9 * clip) / 10, rel=1e-12)
    inv = sl.weighted_cross_entropy(p_fn, y, "inverse-frequency").value
    assert inv == pytest.approx((0.9 * per_voxel + 9 * 0.1 * clip) / 10, rel=1e-12)
    with pytest.raises(ValueError):
        sl.weighted_cross_entropy(p_fn, y, "bogus")


def test_multiclass_examples(rng):
    labels = rng.integers(0, 6, size=(4, 5, 3))
    onehot = np.stack([(labels == c).astype(float) for c in range(6)])
    rep = sl.multiclass_loss(onehot, labels)
    assert rep.value == 0 and all(v == 0 for v in rep.per_class.values())
    # swap classes 0 and 1 everywhere in the prediction
    wrong = onehot.copy()
    wrong[[0, 1]] = wrong[[1, 0]]
    rep = sl.multiclass_loss(wrong, labels)
    assert rep.value == pytest.approx((rep.per_class[0] + rep.per_class[1]) / 6)
    # absent class contributes 0
    labels[labels == 5] = 4
    onehot = np.stack([(labels == c).astype(float) for c in range(6)])
    assert sl.multiclass_loss(onehot, labels).per_class[5] == 0


def test_multiclass_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        sl.multiclass_loss(np.full((6, 4), 0.5), np.zeros(4, int))
    with pytest.raises(ValueError):
        sl.multiclass_loss(np.full((6, 4), 1 / 6), np.zeros(5, int))


def test_input_validation():
    with pytest.raises(ValueError, match="mismatch"):
        sl.iou_loss([0.5, 0.5], [1])
    with pytest.raises(ValueError):
        sl.iou_loss([np.nan], [1])
    with pytest.raises(ValueError):
        sl.iou_loss([1.5], [1])
    with pytest.raises(ValueError):
        sl.dice_loss([0.5], [0.5])


def test_degenerate_convention():
    assert sl.iou_loss([0, 0], [0, 0]).value == 0
    assert sl.dice_loss([0, 0], [0, 0]).value == 0
    assert np.all(sl.iou_loss([0, 0], [0, 0], grad=True).gradient == 0)


# --------------------------------------------------------------------------
# metric, restriction, penalties


def test_jaccard_metric():
    for n in (1, 2, 3):
        assert sl.check_jaccard_metric(n)["passed"]


def test_dice_counterexample():
    rep = sl.check_jaccard_metric(2, kind="dice")
    assert not rep["passed"]
    ce = rep["counterexample"]
    assert (ce["p"], ce["y"], ce["r"]) == ([0, 1], [1, 0], [1, 1])
    assert ce["lhs"] == pytest.approx(1.0, abs=1e-12)
    assert ce["rhs"] == pytest.approx(2 / 3, abs=1e-12)


def test_restriction_examples(rng):
    p = rng.uniform(size=16) < 0.5
    g = rng.uniform(size=16) < 0.5
    lhs, rhs, ok = sl.restriction_bound(p, g, np.ones(16, bool))
    assert ok and lhs == pytest.approx(rhs, abs=1e-15)
    p[0] = g[0] = True
    lhs, rhs, ok = sl.restriction_bound(p, g, np.zeros(16, bool))
    assert ok and rhs >= 2
    rep = sl.restriction_trials(2000, 12, rng)
    assert rep["passed"] and rep["violations"] == 0


def test_penalty_examples():
    rows = sl.penalty_curves(100, [0, 5])
    assert (rows[0]["L_FN"], rows[0]["L_FP"]) == (0, 0)
    assert rows[1]["L_FN"] == 0.05 and rows[1]["L_FP"] == 5 / 105
    assert all(r["match"] for r in rows)
    with pytest.raises(ValueError):
        sl.penalty_curves(10, [11])


# --------------------------------------------------------------------------
# gradients and properties


@pytest.mark.parametrize("kind,power", [("iou", None), ("dice", None), ("iou-pow", 2.0), ("wce", None)])
def test_grad_check(kind, power):
    rep = sl.grad_check(kind, trials=20, n=16, power=power)
    assert rep["passed"], rep


def test_iou_gradient_closed_form(rng):
    p = rng.uniform(0.1, 0.9, 10)
    y = (rng.uniform(size=10) < 0.5).astype(float)
    inter = np.sum(p * y)
    union = p.sum() + y.sum() - inter
    expect = (inter * (1 - y) - union * y) / union**2
    assert np.allclose(sl.iou_loss(p, y, grad=True).gradient, expect, rtol=1e-14)


def test_gradient_sign_monotone():
    rng = np.random.default_rng(7)
    for _ in range(10**4 // 100):
        p = rng.uniform(0.01, 0.99, size=(100,))
        y = (rng.uniform(size=100) < 0.5).astype(float)
        y[0] = 1
        g = sl.iou_loss(p, y, grad=True).gradient
        assert np.all(g[y == 1] < 0) and np.all(g[y == 0] > 0)


binary = arrays(np.float64, st.integers(1, 12), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_binary_agreement(data):
    y = data.draw(binary)
    p = data.draw(arrays(np.float64, y.shape, elements=st.sampled_from([0.0, 1.0])))
    inter = np.sum(p * y)
    union = np.sum(np.maximum(p, y))
    total = p.sum() + y.sum()
    iou = 0.0 if union == 0 else 1 - inter / union
    dice = 0.0 if total == 0 else 1 - 2 * inter / total
    assert sl.iou_loss(p, y).value == pytest.approx(iou, abs=1e-15)
    assert sl.dice_loss(p, y).value == pytest.approx(dice, abs=1e-15)
    for m in (0.5, 2.0, 3.0):
        assert sl.iou_loss_power(p, y, m).value == pytest.approx(iou, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_bounds_and_iou_dominates_dice(data):
    y = data.draw(binary)
    p = data.draw(arrays(np.float64, y.shape, elements=st.floats(0, 1)))
    iou = sl.iou_loss(p, y).value
    dice = sl.dice_loss(p, y).value
    assert 0 <= dice <= iou + 1e-15 <= 1 + 1e-15


def test_iou_dominates_dice_bulk():
    rng = np.random.default_rng(11)
    for _ in range(10**5 // 1000):
        p = rng.uniform(size=(1000, 8))
        y = (rng.uniform(size=(1000, 8)) < 0.5).astype(float)
        for pi, yi in zip(p, y):
            assert sl.iou_loss(pi, yi).value >= sl.dice_loss(pi, yi).value - 1e-15


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_extremes(data):
    y = data.draw(binary)
    if not y.any():
        y[0] = 1.0
    # values below ~1e-16 relative vanish in 1 - I/U, so keep p away from them
    probs = st.one_of(st.just(0.0), st.floats(1e-6, 1))
    p = data.draw(arrays(np.float64, y.shape, elements=probs))
    value = sl.iou_loss(p, y).value
    assert (value == 0) == np.array_equal(p, y)
    assert (value == 1) == (not np.any(p * y))
    assert sl.iou_loss(1 - y, y).value == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(6)))
def test_multiclass_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 6, size=(5, 4))
    logits = rng.normal(size=(6, 5, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0)
    base = sl.multiclass_loss(probs, labels).value
    inverse = np.argsort(perm)
    permuted = sl.multiclass_loss(probs[list(perm)], inverse[labels]).value
    assert permuted == pytest.approx(base, abs=1e-14)


def test_dice_score():
    assert sl.dice_score([1, 0, 1], [1, 1, 0]) == 0.5
    assert sl.dice_score([0, 0], [0, 0]) == 1.0
