"""Command-line interface: ``dcelanm <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import MAE_PREFIX, CheckpointError, load_checkpoint, load_into
from .config import ConfigError, config_to_text, load_config
from .data import DataError, DatasetManifest, synth_dataset, write_dataset
from .network import DCELANMNet, layer_table, param_count
from .rng import Rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="checkpoint to read")
    p.add_argument("--out", help="output directory (or file for predict)")
    p.add_argument("--block", choices=("elan", "dcelan"))
    p.add_argument("--mae", choices=("on", "off"))
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcelanm", description="DCELANM-Net segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain-mae", help="self-supervised Micro-MAE pretraining")
    _common(p)
    p.add_argument("--data", required=True, help="manifest file or images/+masks/ directory")
    p.add_argument("--freeze-cnn", action="store_true", help="train only the Micro-MAE weights")
    p.add_argument("--micro-batch", type=int)

    p = sub.add_parser("train", help="joint segmentation training")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("auto", "all"), default="auto",
                   help="auto: 80/10/10 id-hash split, validate on val; all: train and validate on everything")
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--multiscale", action="store_true")
    p.add_argument("--target-dice", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")

    p = sub.add_parser("predict", help="write a binary mask at the input's resolution")
    _common(p)
    p.add_argument("--input", required=True, help="image file")

    p = sub.add_parser("gradcheck", help="finite-difference checks of ops and blocks")
    _common(p)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--side", type=int, default=256)

    p = sub.add_parser("info", help="parameter count and layer table")
    _common(p)
    p.add_argument("--table", action="store_true", help="print every parameter tensor")
    return parser


def _overrides(args) -> dict:
    out = {}
    pairs = {
        "seed": "train.seed", "mask_ratio": "net.mask_ratio", "epochs": "train.epochs",
        "batch": "train.batch", "lr": "train.lr", "threshold": "train.threshold",
        "micro_batch": "train.micro_batch", "target_dice": "train.target_dice",
    }
    for attr, key in pairs.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if args.block is not None:
        out["net.block_kind"] = args.block
    if args.mae is not None:
        out["net.use_mae"] = args.mae == "on"
    for flag in ("freeze_cnn", "multiscale"):
        if getattr(args, flag, False):
            out[f"train.{flag}"] = True
    return out


def _configs(args, ckpt=None):
    base = {}
    if ckpt is not None:
        # a training checkpoint carries its schedule too, so resumed runs replay exactly
        scopes = ("net.", "train.") if ckpt.config.get("meta.phase") == "train" else ("net.",)
        base = {k: v for k, v in ckpt.config.items() if k.startswith(scopes)}
    base.update(_overrides(args))
    return load_config(args.config, base)


def _out_dir(args, default: str) -> Path:
    path = Path(args.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print(line: str) -> None:
    print(line, flush=True)


def cmd_synth(args) -> int:
    net_cfg, train_cfg = _configs(args)
    out = _out_dir(args, "synth")
    manifest = write_dataset(synth_dataset(args.n, args.side, Rng(train_cfg.seed)), out)
    _print(f"wrote {args.n} samples to {out} ({manifest.name})")
    return EXIT_OK


def cmd_info(args) -> int:
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    net_cfg, _ = _configs(args, ckpt)
    net = DCELANMNet(net_cfg, Rng(0))
    n = param_count(net)
    _print(f"block\t{net_cfg.block_kind}")
    _print(f"mae\t{'on' if net_cfg.use_mae else 'off'}")
    _print(f"parameters\t{n}\t({n / 1e6:.2f}M)")
    if args.table:
        for name, shape, size in layer_table(net):
            _print(f"{name}\t{'x'.join(map(str, shape))}\t{size}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .training import pretrain_mae

    init = load_checkpoint(args.checkpoint) if args.checkpoint else None
    net_cfg, train_cfg = _configs(args, init)
    if not net_cfg.use_mae:
        raise UsageError("pretrain-mae needs --mae on")
    data = DatasetManifest.open(args.data).load(net_cfg.input_side, require_masks=False)
    net = DCELANMNet(net_cfg, Rng(train_cfg.seed))
    out = _out_dir(args, "runs/pretrain")
    result = pretrain_mae(net, data, train_cfg, init=init, run_dir=out, echo=_print)
    _print(f"checkpoint\t{out / 'mae.dclm'}\tfinal_loss\t{result.final.loss:.8g}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    init = load_checkpoint(args.checkpoint) if args.checkpoint else None
    net_cfg, train_cfg = _configs(args, init)
    manifest = DatasetManifest.open(args.data)
    if args.split == "auto":
        train_set = manifest.select("train").load(net_cfg.input_side)
        val_set = manifest.select("val").load(net_cfg.input_side) or None
    else:
        train_set, val_set = manifest.load(net_cfg.input_side), None
    net = DCELANMNet(net_cfg, Rng(train_cfg.seed))
    resume = init
    if init is not None and init.config.get("meta.phase") == "pretrain":
        # pretraining output seeds the weights; schedule and moments start fresh
        load_into(net, init, None if init.config.get("train.freeze_cnn") == "false" else MAE_PREFIX)
        resume = None
    out = _out_dir(args, "runs/train")
    (out / "config.txt").write_text(config_to_text(net_cfg, train_cfg), encoding="utf-8")
    result = train(net, train_set, train_cfg, init=resume, val=val_set, run_dir=out, echo=_print)
    final = result.final
    _print(f"checkpoint\t{out / 'model.dclm'}\tmDice\t{final.mDice:.6f}" if final else "nothing to do")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import build_from_checkpoint, evaluate

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    net_cfg, train_cfg = _configs(args, ckpt)
    threshold = args.threshold if args.threshold is not None else train_cfg.threshold
    net = build_from_checkpoint(ckpt, net_cfg)
    data = DatasetManifest.open(args.data).select(args.split).load(net_cfg.input_side)
    report = evaluate(net, data, threshold)
    text = report.to_text()
    if args.out:
        out = _out_dir(args, "")
        (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .training import build_from_checkpoint, predict

    if not args.checkpoint:
        raise UsageError("predict needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    net_cfg, train_cfg = _configs(args, ckpt)
    threshold = args.threshold if args.threshold is not None else train_cfg.threshold
    net = build_from_checkpoint(ckpt, net_cfg)
    out = Path(args.out or Path(args.input).with_suffix(".mask.png").name)
    if out.is_dir():
        out = out / (Path(args.input).stem + ".png")
    predict(net, args.input, out, threshold)
    _print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    seed = args.seed if args.seed is not None else 0
    failed = 0
    for name, err, tol in run_gradchecks(Rng(seed)):
        ok = err <= tol
        failed += not ok
        _print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{err:.3e}\t(tol {tol:g})")
    return EXIT_OK if not failed else EXIT_DATA


COMMANDS = {
    "pretrain-mae": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "gradcheck": cmd_gradcheck, "synth": cmd_synth, "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dcelanm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"dcelanm: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"dcelanm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"dcelanm: checkpoint error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
