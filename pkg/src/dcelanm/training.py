"""MAE pretraining, joint segmentation training, evaluation and prediction."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_into, make_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import (
    DataError,
    SegSample,
    draw_scale,
    load_png,
    multiscale_resize,
    pad_to_square_resize,
    restore_geometry,
    save_png,
    stack_batch,
)
from .layers import BatchNorm2d
from .network import DCELANMNet, NetworkConfig
from .objective import MetricReport, combined_loss, hard_pixel_weights, metrics
from .optim import Adam, cosine_lr, parameters_of
from .rng import Rng
from .tensor import Tensor, no_grad

LOG_HEADER = "epoch\tloss\tseg_loss\trecon_loss\tlr\tmDice\tmIOU\tmPre"


@dataclass
class EpochLog:
    epoch: int
    loss: float
    seg_loss: float = float("nan")
    recon_loss: float = float("nan")
    lr: float = float("nan")
    mDice: float = float("nan")
    mIOU: float = float("nan")
    mPre: float = float("nan")
    seconds: float = 0.0

    def line(self) -> str:
        vals = (self.loss, self.seg_loss, self.recon_loss, self.lr, self.mDice, self.mIOU, self.mPre)
        return f"{self.epoch}\t" + "\t".join(f"{v:.8g}" for v in vals)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)

    @property
    def final(self) -> EpochLog | None:
        return self.history[-1] if self.history else None


class RunLog:
    """Append-only tab-separated progress log inside a run directory."""

    def __init__(self, run_dir=None, name: str = "train.log", echo=None):
        self.path = None
        self.echo = echo
        if run_dir is not None:
            Path(run_dir).mkdir(parents=True, exist_ok=True)
            self.path = Path(run_dir) / name
            if not self.path.exists():
                self.path.write_text(LOG_HEADER + "\n", encoding="utf-8")

    def write(self, entry: EpochLog) -> None:
        line = entry.line()
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        if self.echo is not None:
            self.echo(line)


def _require(dataset) -> list[SegSample]:
    dataset = list(dataset)
    if not dataset:
        raise DataError("dataset is empty")
    return dataset


def _batches(order, size):
    return [order[i : i + size] for i in range(0, len(order), size)]


def epoch_rng(seed: int, phase: str, epoch: int) -> Rng:
    """Independent stream per (seed, phase, epoch), so resumed runs replay exactly."""
    return Rng(seed).spawn(f"{phase}/{epoch}")


def _restore(net, optimizer, init: Checkpoint | None) -> int:
    if init is None:
        return 0
    load_into(net, init)
    opt_state = init.optimizer_state()
    if optimizer is not None and opt_state:
        optimizer.load_state_dict(opt_state)
    return int(init.config.get("meta.epoch", "0"))


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------

def train_step(net: DCELANMNet, samples, rng: Rng, micro_batch: int, side: int | None):
    """Forward/backward over one batch with gradient accumulation.

    Returns batch-mean ``(loss, seg_loss, recon_loss)``. Gradients are
    accumulated on the parameters; the caller applies the update.
    """
    cfg = net.config
    b = len(samples)
    totals = np.zeros(3)
    for chunk in _batches(list(samples), micro_batch):
        if side is not None:
            chunk = [multiscale_resize(s, side=side) for s in chunk]
        images, masks = stack_batch(chunk)
        if masks is None:
            raise DataError("training samples need masks")
        weight = hard_pixel_weights(masks) if cfg.hard_pixel_weight else None
        prob, recon = net(Tensor(images), rng=rng)
        weights = cfg.loss_weights
        loss = combined_loss(prob, masks, recon, weights, cfg.tversky, weight, per_sample=True)
        frac = len(chunk) / b
        (loss * frac).backward()
        seg = (loss.item() - weights.z * recon.item()) / weights.x if weights.x else float("nan")
        totals += frac * np.array([loss.item(), seg, recon.item()])
    return tuple(float(v) for v in totals)


def recalibrate_bn(net: DCELANMNet, dataset, chunk: int = 8) -> None:
    """Recompute every batch-norm running statistic from the current weights.

    The training set is passed through unmasked in train mode, in chunks of
    ``chunk`` samples, and the per-chunk statistics are averaged with equal
    weight. Weights and momenta are left unchanged.
    """
    dataset = _require(dataset)
    bns = [m for m in net.modules() if isinstance(m, BatchNorm2d)]
    momenta = [m.momentum for m in bns]
    for m in bns:
        m.running_mean[:] = 0.0
        m.running_var[:] = 0.0
    was_training = net.training
    net.train()
    try:
        with no_grad():
            for k, idx in enumerate(_batches(np.arange(len(dataset)), chunk), start=1):
                for m in bns:
                    m.momentum = 1.0 / k
                images, _ = stack_batch([dataset[i] for i in idx])
                net(Tensor(images), mask_ratio=0.0)
    finally:
        for m, mom in zip(bns, momenta):
            m.momentum = mom
        net.train(was_training)


def train(
    net: DCELANMNet,
    dataset,
    train_cfg: TrainConfig,
    init: Checkpoint | None = None,
    val=None,
    run_dir=None,
    stop_epoch: int | None = None,
    echo=None,
    time_budget: float | None = None,
) -> TrainResult:
    """Joint segmentation + reconstruction training with Adam and a per-epoch
    cosine learning rate.

    ``dataset`` holds canonical (square, ``input_side``) samples. ``init``
    resumes weights, optimizer moments and the epoch counter. Metrics are
    computed on ``val`` (default: the training set) every ``eval_every``
    epochs; training stops early once they reach ``target_dice``.
    ``stop_epoch`` ends the run after that many total epochs, leaving a
    resumable checkpoint. ``time_budget`` (seconds) likewise stops after the
    first epoch that ends past the budget.
    """
    dataset = _require(dataset)
    cfg = train_cfg.validate()
    optimizer = Adam(parameters_of(net), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    start = _restore(net, optimizer, init)
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    log = RunLog(run_dir, "train.log", echo)
    history = []
    started = time.perf_counter()
    for epoch in range(start, end):
        t0 = time.perf_counter()
        rng = epoch_rng(cfg.seed, "train", epoch)
        optimizer.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        net.train()
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        for idx in _batches(order, cfg.batch):
            side = draw_scale(rng) if cfg.multiscale else None
            optimizer.zero_grad()
            sums += np.array(train_step(net, [dataset[i] for i in idx], rng, cfg.micro_batch, side)) * len(idx)
            optimizer.step()
        loss, seg, recon = sums / len(dataset)
        entry = EpochLog(epoch, loss, seg, recon, optimizer.lr)
        done = epoch + 1 == end
        evaluating = (epoch + 1) % cfg.eval_every == 0 or done or cfg.target_dice > 0
        calibrated = bool(cfg.bn_recalibrate and evaluating)
        if calibrated:
            recalibrate_bn(net, dataset, cfg.bn_recalibrate)
        if evaluating:
            report = evaluate(net, val if val is not None else dataset, cfg.threshold)
            entry.mDice, entry.mIOU, entry.mPre = report.mDice, report.mIOU, report.mPre
        entry.seconds = time.perf_counter() - t0
        history.append(entry)
        log.write(entry)
        if cfg.target_dice > 0 and entry.mDice >= cfg.target_dice:
            break
        if time_budget is not None and time.perf_counter() - started >= time_budget:
            break
    if history and cfg.bn_recalibrate and not calibrated:
        recalibrate_bn(net, dataset, cfg.bn_recalibrate)
    epochs_done = history[-1].epoch + 1 if history else start
    ckpt = make_checkpoint(net, net.config, cfg, optimizer, {"meta.epoch": epochs_done, "meta.phase": "train"})
    if run_dir is not None:
        save_checkpoint(ckpt, Path(run_dir) / "model.dclm")
    return TrainResult(ckpt, history)


# ---------------------------------------------------------------------------
# MAE pretraining
# ---------------------------------------------------------------------------

def pretrain_mae(
    net: DCELANMNet,
    dataset,
    train_cfg: TrainConfig,
    init: Checkpoint | None = None,
    run_dir=None,
    echo=None,
) -> TrainResult:
    """Optimise the masked-patch reconstruction loss alone.

    By default the CNN encoder trains jointly with Micro-MAE so the
    bottleneck distribution is the one seen downstream. With
    ``freeze_cnn`` only ``mae.*`` weights move; the encoder then runs in
    eval mode and its features are computed once.
    """
    if net.mae is None:
        raise ValueError("pretrain_mae needs a network built with use_mae=True")
    dataset = _require(dataset)
    cfg = train_cfg.validate()
    # position tables stay at their sine-cosine values during pretraining
    net.mae.set_pos_trainable(False)
    try:
        return _pretrain(net, dataset, cfg, init, run_dir, echo)
    finally:
        net.mae.set_pos_trainable(True)


def _pretrain(net, dataset, cfg, init, run_dir, echo) -> TrainResult:
    prefix = "mae." if cfg.freeze_cnn else None
    named = [(n, p) for n, p in parameters_of(net, prefix) if not n.startswith("dec_stages.") and not n.startswith("head.")]
    optimizer = Adam(named, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    start = _restore(net, optimizer, init)
    log = RunLog(run_dir, "pretrain.log", echo)
    ratio = net.config.mask_ratio

    cached = None
    if cfg.freeze_cnn and not cfg.multiscale:
        net.eval()
        with no_grad():
            cached = [net.encode(Tensor(s.image[None]))[0].data[0] for s in dataset]

    history = []
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        rng = epoch_rng(cfg.seed, "pretrain", epoch)
        optimizer.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        net.train()
        if cfg.freeze_cnn:
            for m in net.modules():
                m.training = False
            net.mae.train()
        order = rng.permutation(len(dataset))
        total = 0.0
        for idx in _batches(order, cfg.batch):
            side = draw_scale(rng) if cfg.multiscale else None
            optimizer.zero_grad()
            for chunk in _batches(list(idx), cfg.micro_batch):
                if cached is not None:
                    feat = Tensor(np.stack([cached[i] for i in chunk]))
                else:
                    samples = [dataset[i] for i in chunk]
                    if side is not None:
                        samples = [multiscale_resize(s, side=side) for s in samples]
                    images, _ = stack_batch(samples)
                    if cfg.freeze_cnn:
                        with no_grad():
                            feat = net.encode(Tensor(images))[0].detach()
                    else:
                        feat = net.encode(Tensor(images))[0]
                _, loss, _ = net.mae(feat, ratio, rng)
                (loss * (len(chunk) / len(idx))).backward()
                total += loss.item() * len(chunk)
            optimizer.step()
        entry = EpochLog(epoch, total / len(dataset), recon_loss=total / len(dataset), lr=optimizer.lr)
        entry.seconds = time.perf_counter() - t0
        history.append(entry)
        log.write(entry)
    epochs_done = history[-1].epoch + 1 if history else start
    ckpt = make_checkpoint(net, net.config, cfg, optimizer, {"meta.epoch": epochs_done, "meta.phase": "pretrain"})
    if run_dir is not None:
        save_checkpoint(ckpt, Path(run_dir) / "mae.dclm")
    return TrainResult(ckpt, history)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_proba(net: DCELANMNet, images: np.ndarray, chunk: int = 4) -> np.ndarray:
    """Eval-mode probabilities for a [B,3,H,W] array (mask ratio 0)."""
    was_training = net.training
    net.eval()
    try:
        out = []
        with no_grad():
            for i in range(0, len(images), chunk):
                prob, _ = net(Tensor(np.asarray(images[i : i + chunk], dtype=np.float32)), mask_ratio=0.0)
                out.append(prob.data)
    finally:
        net.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate(net: DCELANMNet, dataset, threshold: float = 0.5) -> MetricReport:
    """Metrics over canonical samples, one deterministic forward each."""
    dataset = _require(dataset)
    if any(s.mask is None for s in dataset):
        missing = [s.id for s in dataset if s.mask is None]
        raise DataError(f"evaluation needs masks; missing for {missing[:5]}")
    images, masks = stack_batch(dataset)
    prob = predict_proba(net, images)
    return metrics(prob, masks, threshold, ids=[s.id for s in dataset])


def predict(net: DCELANMNet, image_path, out_path, threshold: float = 0.5) -> np.ndarray:
    """Write a {0,255} mask PNG at the image's original resolution."""
    image = load_png(image_path)
    h, w = image.shape[1:]
    side = net.config.input_side
    canon = pad_to_square_resize(SegSample(image, None, Path(image_path).stem), side)
    prob = predict_proba(net, canon.image[None])[0]
    mask = (restore_geometry(prob, h, w) >= threshold).astype(np.float32)
    save_png(mask, out_path)
    return mask


def build_from_checkpoint(ckpt: Checkpoint, overrides: NetworkConfig | None = None) -> DCELANMNet:
    net_cfg, _ = ckpt.configs()
    net = DCELANMNet(overrides or net_cfg, Rng(0))
    load_into(net, ckpt)
    return net
