import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcelanm.objective import (
    LossWeights,
    MetricReport,
    TverskyParams,
    combined_loss,
    hard_pixel_weights,
    metrics,
    mse_loss,
    sample_scores,
    tversky_coeff,
    tversky_loss,
)
from dcelanm.tensor import ShapeError, Tensor


def set_counts(pred, target):
    """Brute-force set sizes from pixel coordinate sets."""
    a = {tuple(i) for i in np.argwhere(pred > 0.5)}
    b = {tuple(i) for i in np.argwhere(target > 0.5)}
    return len(a & b), len(a - b), len(b - a), len(a | b)


def test_perfect_prediction_zero_loss():
    g = np.zeros((1, 1, 4, 4))
    g[0, 0, 1:3, 1:3] = 1
    assert tversky_loss(Tensor(g), g).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_and_jaccard_reductions_on_random_pairs():
    rng = np.random.default_rng(0)
    s = 1.0
    for _ in range(100):
        shape = (1, 1, *rng.integers(2, 9, size=2))
        pred = (rng.random(shape) < rng.random()).astype(np.float64)
        target = (rng.random(shape) < rng.random()).astype(np.float64)
        inter, a_only, b_only, union = set_counts(pred, target)
        size_a, size_b = inter + a_only, inter + b_only
        dice = (2 * inter + 2 * s) / (size_a + size_b + 2 * s)
        jacc = (inter + s) / (union + s)
        p = Tensor(pred, dtype=np.float64)
        assert abs(tversky_coeff(p, target, TverskyParams(0.5, 0.5, s)).item() - dice) <= 1e-12
        assert abs(tversky_coeff(p, target, TverskyParams(1.0, 1.0, s)).item() - jacc) <= 1e-12


def test_alpha_weights_false_positives():
    target = np.array([[1.0, 0.0, 0.0, 0.0]])
    pred = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]), dtype=np.float64)
    lo = tversky_loss(pred, target, TverskyParams(0.1, 0.9)).item()
    hi = tversky_loss(pred, target, TverskyParams(0.9, 0.1)).item()
    assert hi > lo


def test_target_validation():
    with pytest.raises(ShapeError):
        tversky_loss(Tensor(np.zeros((1, 4))), np.zeros((1, 5)))
    with pytest.raises(ValueError, match="binary"):
        tversky_loss(Tensor(np.zeros((1, 4))), np.full((1, 4), 0.5))


def test_params_validation():
    with pytest.raises(ValueError):
        TverskyParams(-1.0, 0.5)
    with pytest.raises(ValueError):
        TverskyParams(smooth=0.0)
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.2)


@given(st.floats(0.0, 1.0), st.floats(0.0, 100.0))
@settings(max_examples=100, deadline=None)
def test_combined_loss_is_linear(tl_target, mse):
    # build a prediction whose Tversky loss is known, then compare
    rng = np.random.default_rng(int(tl_target * 1e6) % 2**31)
    pred = Tensor(rng.random((2, 1, 4, 4)), dtype=np.float64)
    target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    tl = tversky_loss(pred, target, per_sample=True).item()
    total = combined_loss(pred, target, Tensor(np.array([mse])), LossWeights(0.8, 0.2)).item()
    assert abs(total - (0.8 * tl + 0.2 * mse)) <= 1e-12


def test_mse_loss():
    a = Tensor(np.array([1.0, 2.0, 3.0]), dtype=np.float64)
    assert mse_loss(a, np.array([1.0, 0.0, 0.0])).item() == pytest.approx((4 + 9) / 3)
    with pytest.raises(ShapeError):
        mse_loss(a, np.zeros(2))


def test_hard_pixel_weights_peak_at_boundary():
    g = np.zeros((1, 64, 64))
    g[:, 16:48, 16:48] = 1
    w = hard_pixel_weights(g)
    assert w.min() >= 1.0
    assert w[0, 16, 32] > w[0, 32, 32] and w[0, 16, 32] > w[0, 2, 2]


def test_weighted_tversky_runs_and_differs():
    rng = np.random.default_rng(3)
    g = (rng.random((1, 1, 32, 32)) > 0.7).astype(np.float64)
    p = Tensor(rng.random((1, 1, 32, 32)), dtype=np.float64)
    w = hard_pixel_weights(g)
    assert tversky_loss(p, g, weight=w).item() != tversky_loss(p, g).item()


def test_metrics_perfect_and_empty():
    g = np.zeros((3, 1, 8, 8))
    g[0, 0, 2:5, 2:5] = 1
    g[1, 0, 0, 0] = 1
    rep = metrics(g.copy(), g)
    assert (rep.mDice, rep.mIOU, rep.mPre) == (1.0, 1.0, 1.0)
    assert sample_scores(0, 0, 0) == (1.0, 1.0, 1.0)


def test_metrics_hand_case():
    pred = np.array([[0.9, 0.6], [0.4, 0.1]])
    target = np.array([[1.0, 0.0], [1.0, 0.0]])
    rep = metrics(pred[None], target[None], threshold=0.5)
    # tp=1, fp=1, fn=1
    assert rep.dice == [pytest.approx(0.5)]
    assert rep.iou == [pytest.approx(1 / 3)]
    assert rep.precision == [pytest.approx(0.5)]


def test_threshold_is_inclusive():
    rep = metrics(np.array([[[0.5]]]), np.array([[[1.0]]]), threshold=0.5)
    assert rep.mDice == 1.0


def test_report_roundtrip_and_schema():
    rep = metrics(np.random.default_rng(0).random((2, 1, 4, 4)), np.ones((2, 1, 4, 4)), ids=["a", "b"])
    text = rep.to_text()
    head = [line.split("\t")[0] for line in text.split("\n\n")[0].splitlines() if not line.startswith("#")]
    assert head[:3] == ["mDice", "mIOU", "mPre"]
    back = MetricReport.from_text(text)
    assert back.ids == ["a", "b"]
    assert back.mDice == pytest.approx(rep.mDice, abs=1e-6)
    assert set(rep.summary()) == {"mDice", "mIOU", "mPre"}
