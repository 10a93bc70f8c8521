"""Segmentation losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import ShapeError, Tensor, reduce_sum


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.smooth <= 0:
            raise ValueError(f"smooth must be > 0, got {self.smooth}")


@dataclass(frozen=True)
class LossWeights:
    x: float = 0.8  # segmentation (Tversky) term
    z: float = 0.2  # reconstruction (MSE) term

    def __post_init__(self):
        if self.x < 0 or self.z < 0:
            raise ValueError(f"loss weights must be >= 0, got x={self.x}, z={self.z}")


def _check_target(pred: Tensor, target) -> np.ndarray:
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.shape != pred.shape:
        raise ShapeError(f"prediction shape {list(pred.shape)} != target shape {list(target.shape)}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target must be binary (values in {0, 1})")
    return target.astype(pred.dtype)


def hard_pixel_weights(target: np.ndarray, window: int = 31, strength: float = 5.0) -> np.ndarray:
    """``1 + strength * |local_mean(target) - target|`` per spatial map.

    Pixels near mask boundaries get larger weights. ``target`` is
    [..., H, W]; the box filter runs over the last two axes only.
    """
    target = np.asarray(target, dtype=np.float64)
    size = (1,) * (target.ndim - 2) + (window, window)
    local = uniform_filter(target, size=size, mode="reflect")
    return 1.0 + strength * np.abs(local - target)


def _soft_counts(pred: Tensor, g: np.ndarray, weight, axes):
    gw = g if weight is None else g * weight
    inv = 1.0 - g
    invw = inv if weight is None else inv * weight
    inter = reduce_sum(pred * Tensor(gw), axes)
    false_pos = reduce_sum(pred * Tensor(invw), axes)
    # sum((1 - p) * g * w) = sum(g * w) - sum(p * g * w)
    false_neg = Tensor(np.asarray(gw.sum(axis=axes), dtype=pred.dtype)) - inter
    return inter, false_pos, false_neg


def tversky_coeff(pred: Tensor, target, params: TverskyParams = TverskyParams(), weight=None, per_sample: bool = False) -> Tensor:
    """Soft Tversky index ``(I + s) / (I + alpha*FP + beta*FN + s)``.

    ``pred`` holds probabilities (the predicted set A), ``target`` the
    binary ground truth (B); FP = |A - B|, FN = |B - A|. With
    ``per_sample`` the counts are taken per leading-axis sample and the
    indices averaged.
    """
    g = _check_target(pred, target)
    if weight is not None:
        weight = np.asarray(weight, dtype=pred.dtype)
    axes = tuple(range(1, pred.ndim)) if per_sample else None
    inter, fp, fn = _soft_counts(pred, g, weight, axes)
    s = params.smooth
    t = (inter + s) / (inter + fp * params.alpha + fn * params.beta + s)
    return t.mean() if per_sample else t


def tversky_loss(pred: Tensor, target, params: TverskyParams = TverskyParams(), weight=None, per_sample: bool = False) -> Tensor:
    return 1.0 - tversky_coeff(pred, target, params, weight, per_sample)


def mse_loss(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    d = a - b
    return (d * d).mean()


def combined_loss(seg_pred: Tensor, seg_target, recon_loss, weights: LossWeights = LossWeights(),
                  params: TverskyParams = TverskyParams(), weight=None, per_sample: bool = True) -> Tensor:
    """``x * tversky_loss + z * recon_loss``."""
    seg = tversky_loss(seg_pred, seg_target, params, weight, per_sample)
    if not isinstance(recon_loss, Tensor):
        recon_loss = Tensor(np.asarray(recon_loss, dtype=seg.dtype))
    return seg * weights.x + recon_loss * weights.z


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    mDice: float
    mIOU: float
    mPre: float
    threshold: float
    ids: list = field(default_factory=list)
    dice: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    precision: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"mDice": self.mDice, "mIOU": self.mIOU, "mPre": self.mPre}

    def to_text(self) -> str:
        """Tab-separated report: a ``#`` comment with the threshold, the three
        means, then one row per sample."""
        lines = [
            f"# threshold\t{self.threshold:g}",
            f"mDice\t{self.mDice:.6f}",
            f"mIOU\t{self.mIOU:.6f}",
            f"mPre\t{self.mPre:.6f}",
            "",
            "id\tdice\tiou\tprecision",
        ]
        for i, d, j, p in zip(self.ids, self.dice, self.iou, self.precision):
            lines.append(f"{i}\t{d:.6f}\t{j:.6f}\t{p:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        head, _, table = text.partition("\n\n")
        values = dict(line.lstrip("# ").split("\t") for line in head.splitlines())
        rows = [r.split("\t") for r in table.splitlines()[1:] if r]
        return cls(
            mDice=float(values["mDice"]),
            mIOU=float(values["mIOU"]),
            mPre=float(values["mPre"]),
            threshold=float(values["threshold"]),
            ids=[r[0] for r in rows],
            dice=[float(r[1]) for r in rows],
            iou=[float(r[2]) for r in rows],
            precision=[float(r[3]) for r in rows],
        )


def confusion_counts(pred_mask: np.ndarray, target: np.ndarray) -> tuple[int, int, int]:
    p = pred_mask.astype(bool)
    g = target.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def sample_scores(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(dice, iou, precision); an empty prediction on an empty target scores 1."""
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dice = 2 * tp / (2 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    return dice, iou, precision


def metrics(pred_batch, target_batch, threshold: float = 0.5, ids=None) -> MetricReport:
    """Threshold probability maps and average per-sample Dice, IoU and precision."""
    pred = np.asarray(pred_batch.data if isinstance(pred_batch, Tensor) else pred_batch)
    target = np.asarray(target_batch.data if isinstance(target_batch, Tensor) else target_batch)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {list(pred.shape)} != target shape {list(target.shape)}")
    if pred.ndim < 3:
        pred, target = pred[None], target[None]
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pred))]
    dice, iou, prec = [], [], []
    for p, g in zip(pred, target):
        d, j, pr = sample_scores(*confusion_counts(p >= threshold, g > 0.5))
        dice.append(d)
        iou.append(j)
        prec.append(pr)
    return MetricReport(
        mDice=float(np.mean(dice)),
        mIOU=float(np.mean(iou)),
        mPre=float(np.mean(prec)),
        threshold=threshold,
        ids=ids,
        dice=dice,
        iou=iou,
        precision=prec,
    )
