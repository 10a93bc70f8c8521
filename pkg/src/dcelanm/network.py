"""Full encoder-decoder assembly and its configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .backbone import AggregationBlock, DecoderStage, DownSample
from .layers import Conv2d, Module
from .mae import MicroMAE
from .objective import LossWeights, TverskyParams
from .rng import Rng
from .tensor import ShapeError, Tensor

BLOCK_KINDS = ("dcelan", "elan")


@dataclass
class NetworkConfig:
    encoder_filters: tuple = (16, 32, 64, 128, 256)
    decoder_filters: tuple = (128, 64, 32, 16)
    path_repeats: tuple = (8, 6, 4, 2)
    block_kind: str = "dcelan"
    use_mae: bool = True
    mask_ratio: float = 0.75
    patch_size: int = 4
    mae_dim: int = 384
    mae_depth: int = 4
    mae_dec_dim: int = 128
    mae_dec_depth: int = 2
    mae_heads: int = 4
    mlp_ratio: int = 4
    mae_norm_target: bool = False
    input_side: int = 256
    in_channels: int = 3
    loss_x: float = 0.8
    loss_z: float = 0.2
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5
    tversky_smooth: float = 1.0
    hard_pixel_weight: bool = False

    def __post_init__(self):
        self.encoder_filters = tuple(int(v) for v in self.encoder_filters)
        self.decoder_filters = tuple(int(v) for v in self.decoder_filters)
        self.path_repeats = tuple(int(v) for v in self.path_repeats)

    @property
    def depth(self) -> int:
        return len(self.encoder_filters) - 1

    @property
    def bottleneck_side(self) -> int:
        return self.input_side // 2 ** self.depth

    def validate(self) -> "NetworkConfig":
        d = self.depth
        if d < 1:
            raise ValueError("encoder_filters needs at least two entries")
        if len(self.decoder_filters) != d or len(self.path_repeats) != d:
            raise ValueError(
                f"decoder_filters ({len(self.decoder_filters)}) and path_repeats "
                f"({len(self.path_repeats)}) must both have {d} entries"
            )
        if tuple(self.decoder_filters) != tuple(reversed(self.encoder_filters[:-1])):
            raise ValueError(
                f"decoder_filters {list(self.decoder_filters)} must mirror the encoder skips "
                f"{list(reversed(self.encoder_filters[:-1]))}"
            )
        if any(f % 2 for f in self.encoder_filters):
            raise ValueError("filter counts must be even")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.input_side % 2 ** d:
            raise ValueError(f"input_side {self.input_side} must be divisible by {2 ** d}")
        if self.use_mae and self.bottleneck_side % self.patch_size:
            raise ValueError(
                f"bottleneck side {self.bottleneck_side} is not divisible by patch size {self.patch_size}"
            )
        if self.use_mae and (self.mae_dim % self.mae_heads or self.mae_dec_dim % self.mae_heads):
            raise ValueError("MAE widths must be divisible by the head count")
        return self

    @property
    def tversky(self) -> TverskyParams:
        return TverskyParams(self.tversky_alpha, self.tversky_beta, self.tversky_smooth)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_x, self.loss_z if self.use_mae else 0.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DCELANMNet(Module):
    """U-shaped segmenter: aggregation blocks with dual-branch samplers on the
    way down, an optional Micro-MAE at the bottleneck, and decoder stages that
    fuse upsampled features with path-refined skips."""

    def __init__(self, config: NetworkConfig | None = None, rng: Rng | None = None):
        self.config = cfg = (config or NetworkConfig()).validate()
        rng = rng or Rng(0)
        dual = cfg.block_kind == "dcelan"
        f = cfg.encoder_filters
        self.enc_blocks = []
        self.downs = []
        c_prev = cfg.in_channels
        for i in range(cfg.depth):
            self.enc_blocks.append(AggregationBlock(c_prev, f[i], dual=dual, rng=rng))
            self.downs.append(DownSample(f[i], f[i + 1], rng))
            c_prev = f[i + 1]
        self.bottleneck = AggregationBlock(f[-1], f[-1], dual=dual, rng=rng)
        self.mae = None
        if cfg.use_mae:
            g = cfg.bottleneck_side // cfg.patch_size
            self.mae = MicroMAE(
                channels=f[-1], patch=cfg.patch_size, grid=(g, g), dim=cfg.mae_dim, depth=cfg.mae_depth,
                dec_dim=cfg.mae_dec_dim, dec_depth=cfg.mae_dec_depth, heads=cfg.mae_heads,
                mlp_ratio=cfg.mlp_ratio, norm_target=cfg.mae_norm_target, rng=rng,
            )
            self.mae.set_pos_trainable(True)
        self.dec_stages = []
        c_prev = f[-1]
        # decoder stage j consumes the skip from encoder level depth-1-j
        for j, c_out in enumerate(cfg.decoder_filters):
            repeats = cfg.path_repeats[cfg.depth - 1 - j]
            self.dec_stages.append(DecoderStage(c_prev, c_out, repeats, dual=dual, rng=rng))
            c_prev = c_out
        self.head = Conv2d(c_prev, 1, 1, rng=rng)
        self.last_plan = None

    def encode(self, x: Tensor):
        """Return ``(bottleneck, skips)``; skips ordered shallow to deep."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B,{self.config.in_channels},H,W] input, got {list(x.shape)}")
        side = 2 ** self.config.depth
        if x.shape[2] % side or x.shape[3] % side:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} must be divisible by {side}")
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return self.bottleneck(x), skips

    def reconstruct(self, feat: Tensor, mask_ratio: float, rng: Rng | None):
        if self.mae is None:
            return feat, Tensor(np.zeros(1, dtype=feat.dtype))
        recon, loss, plan = self.mae(feat, mask_ratio, rng)
        self.last_plan = plan
        return recon, loss

    def decode(self, feat: Tensor, skips) -> Tensor:
        for stage, skip in zip(self.dec_stages, reversed(skips)):
            feat = stage(feat, skip)
        return F.sigmoid(self.head(feat))

    def forward(self, x: Tensor, mask_ratio: float | None = None, rng: Rng | None = None):
        """Return ``(probabilities [B,1,H,W], reconstruction loss)``.

        ``mask_ratio`` defaults to the configured ratio in train mode and to
        0 in eval mode.
        """
        if mask_ratio is None:
            mask_ratio = self.config.mask_ratio if self.training else 0.0
        feat, skips = self.encode(x)
        feat, recon_loss = self.reconstruct(feat, mask_ratio, rng)
        return self.decode(feat, skips), recon_loss


def build_network(cfg: NetworkConfig, rng: Rng | None = None) -> DCELANMNet:
    return DCELANMNet(cfg, rng)


def param_count(net: Module) -> int:
    """Trainable parameter elements (batch-norm running statistics excluded)."""
    return net.num_parameters(trainable_only=True)


def layer_table(net: Module) -> list[tuple[str, tuple, int]]:
    """(name, shape, size) for every trainable tensor."""
    return [(name, tuple(p.shape), p.size) for name, p in net.named_parameters() if p.requires_grad]
