"""Micro masked autoencoder for the bottleneck feature map.

Feature maps are cut into ``P x P`` patches, a random subset of the
patch tokens is encoded by a ViT encoder, and a lighter decoder
reconstructs every patch from the encoded tokens plus a shared learned
mask token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .layers import Linear, Module, TransformerBlock
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    crop,
    get_default_dtype,
    matmul,
    pad,
    reshape,
    take_along_axis,
    transpose,
)


def patchify(x: Tensor, patch: int) -> Tensor:
    """[B,C,H,W] -> [B, N, C*P*P]; row-major grid, channel-major patches."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"feature map {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (b, c, gh, patch, gw, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (b, gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, grid: tuple[int, int], patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b, n, width = tokens.shape
    gh, gw = grid
    if n != gh * gw:
        raise ShapeError(f"{n} tokens do not fill a {gh}x{gw} grid")
    if width % (patch * patch):
        raise ShapeError(f"token width {width} is not a multiple of {patch}x{patch}")
    c = width // (patch * patch)
    t = reshape(tokens, (b, gh, gw, c, patch, patch))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    return reshape(t, (b, c, gh * patch, gw * patch))


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = pos.reshape(-1, 1) * omega[None, :]
    emb = np.empty((pos.size, dim))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table, shape [grid_h*grid_w, dim].

    Half of the channels encode the row index and half the column index;
    within each half, sin/cos pairs are interleaved over frequencies
    ``10000 ** (-2j / (dim / 2))``.
    """
    if dim % 4:
        raise ShapeError(f"position embedding dim must be divisible by 4, got {dim}")
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    half = dim // 2
    return np.concatenate([_sincos_1d(half, rows.ravel()), _sincos_1d(half, cols.ravel())], axis=1)


@dataclass
class MaskPlan:
    """Per-sample shuffle bookkeeping; arrays are [B, N]."""

    shuffle: np.ndarray
    ids_restore: np.ndarray
    n_visible: int
    mask_flags: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.shuffle.shape[1]

    @property
    def n_masked(self) -> int:
        return self.n_tokens - self.n_visible


def visible_count(n_tokens: int, ratio: float) -> int:
    return n_tokens - int(np.floor(ratio * n_tokens + 0.5))


def make_mask_plan(batch: int, n_tokens: int, ratio: float, rng: Rng | None) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_vis = visible_count(n_tokens, ratio)
    if n_vis < 1:
        raise ValueError(f"mask ratio {ratio} leaves no visible token out of {n_tokens}")
    if n_vis == n_tokens:
        shuffle = np.tile(np.arange(n_tokens), (batch, 1))
    else:
        if rng is None:
            raise ValueError("an rng is required when the mask ratio is positive")
        shuffle = np.stack([rng.permutation(n_tokens) for _ in range(batch)])
    ids_restore = np.argsort(shuffle, axis=1, kind="stable")
    mask_flags = np.ones((batch, n_tokens), dtype=bool)
    np.put_along_axis(mask_flags, shuffle[:, :n_vis], False, axis=1)
    return MaskPlan(shuffle, ids_restore, n_vis, mask_flags)


def random_masking(tokens: Tensor, ratio: float, rng: Rng | None) -> tuple[Tensor, MaskPlan]:
    """Keep the first ``N - round(ratio * N)`` tokens of a random shuffle.

    Masked tokens are dropped, not zero-filled.
    """
    b, n, _ = tokens.shape
    plan = make_mask_plan(b, n, ratio, rng)
    keep = plan.shuffle[:, : plan.n_visible, None]
    return take_along_axis(tokens, keep, axis=1), plan


def restore_order(full_shuffled: Tensor, plan: MaskPlan) -> Tensor:
    """Undo the shuffle of a [B, N, D] sequence laid out visible-first."""
    return take_along_axis(full_shuffled, plan.ids_restore[:, :, None], axis=1)


def _resample_table(table: Tensor, base_grid, grid) -> Tensor:
    if tuple(grid) == tuple(base_grid):
        return table
    m = np.kron(F.interpolation_matrix(base_grid[0], grid[0]), F.interpolation_matrix(base_grid[1], grid[1]))
    return matmul(Tensor(m.astype(table.dtype)), table)


class MicroMAE(Module):
    """Asymmetric ViT autoencoder over bottleneck patches."""

    def __init__(
        self,
        channels: int = 256,
        patch: int = 4,
        grid: tuple[int, int] = (4, 4),
        dim: int = 192,
        depth: int = 4,
        dec_dim: int = 128,
        dec_depth: int = 2,
        heads: int = 4,
        mlp_ratio: int = 4,
        norm_target: bool = False,
        rng: Rng | None = None,
    ):
        rng = rng or Rng(0)
        self.channels = channels
        self.patch = patch
        self.grid = tuple(grid)
        self.dim = dim
        self.dec_dim = dec_dim
        self.norm_target = norm_target
        width = patch * patch * channels
        dtype = get_default_dtype()
        self.patch_proj = Linear(width, dim, rng=rng)
        self.enc_pos = Tensor(sincos_pos_embed(*self.grid, dim).astype(dtype))
        self.encoder_blocks = [TransformerBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.enc_to_dec = Linear(dim, dec_dim, rng=rng)
        self.mask_token = Tensor(rng.truncated_normal(dec_dim, std=0.02).astype(dtype), requires_grad=True)
        self.dec_pos = Tensor(sincos_pos_embed(*self.grid, dec_dim).astype(dtype))
        self.decoder_blocks = [TransformerBlock(dec_dim, heads, mlp_ratio, rng) for _ in range(dec_depth)]
        self.pred_head = Linear(dec_dim, width, rng=rng)

    def set_pos_trainable(self, flag: bool) -> None:
        """Fixed sine-cosine tables for pretraining, learnable downstream."""
        self.enc_pos.requires_grad = flag
        self.dec_pos.requires_grad = flag

    def embed(self, tokens: Tensor, grid) -> Tensor:
        return self.patch_proj(tokens) + _resample_table(self.enc_pos, self.grid, grid)

    def encode(self, visible: Tensor) -> Tensor:
        for block in self.encoder_blocks:
            visible = block(visible)
        return visible

    def decode(self, encoded: Tensor, plan: MaskPlan, grid=None) -> Tensor:
        b, n_vis, _ = encoded.shape
        if n_vis != plan.n_visible or b != plan.shuffle.shape[0]:
            raise ShapeError(
                f"encoded sequence [{b},{n_vis}] does not match mask plan "
                f"[{plan.shuffle.shape[0]},{plan.n_visible}]"
            )
        x = self.enc_to_dec(encoded)
        if plan.n_masked:
            dec_dim = x.shape[-1]
            blank = Tensor(np.zeros((b, plan.n_masked, dec_dim), dtype=x.dtype))
            x = concat([x, add(blank, self.mask_token)], axis=1)
        x = restore_order(x, plan)
        x = x + _resample_table(self.dec_pos, self.grid, grid or self.grid)
        for block in self.decoder_blocks:
            x = block(x)
        return self.pred_head(x)

    def _target_stats(self, tokens: Tensor):
        """Per-patch (mean, std) used when ``norm_target`` is on."""
        t = tokens.data
        if not self.norm_target:
            return None
        return t.mean(axis=-1, keepdims=True), np.sqrt(t.var(axis=-1, keepdims=True) + 1e-6)

    def forward(self, feat: Tensor, ratio: float = 0.75, rng: Rng | None = None):
        """Return ``(recon_feat, recon_loss, plan)``.

        ``recon_feat`` keeps the original values at visible patches and the
        decoder predictions at masked ones. ``recon_loss`` is the mean
        squared error over masked patches; the target is the (detached)
        input feature patch. With ``ratio == 0`` nothing is masked, the map
        is returned unchanged and the loss is zero.
        """
        if feat.ndim != 4 or feat.shape[1] != self.channels:
            raise ShapeError(f"MicroMAE expects [B,{self.channels},H,W], got {list(feat.shape)}")
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
        b, _, h, w = feat.shape
        p = self.patch
        n = -(-h // p) * -(-w // p)
        if visible_count(n, ratio) == n:
            plan = make_mask_plan(b, n, 0.0, None)
            return feat, Tensor(np.zeros(1, dtype=feat.dtype)), plan

        pad_h, pad_w = -h % p, -w % p
        padded = pad(feat, ((0, 0), (0, 0), (0, pad_h), (0, pad_w))) if pad_h or pad_w else feat
        grid = ((h + pad_h) // p, (w + pad_w) // p)
        tokens = patchify(padded, p)
        visible, plan = random_masking(self.embed(tokens, grid), ratio, rng)
        pred = self.decode(self.encode(visible), plan, grid)

        masked = plan.mask_flags[:, :, None].astype(feat.dtype)
        stats = self._target_stats(tokens)
        target = tokens.data if stats is None else (tokens.data - stats[0]) / stats[1]
        diff = pred - Tensor(target)
        per_elem = diff * diff * Tensor(masked)
        recon_loss = per_elem.sum() * (1.0 / (plan.n_masked * b * tokens.shape[-1]))

        if stats is not None:
            pred = pred * Tensor(stats[1]) + Tensor(stats[0])
        mixed = tokens * Tensor(1.0 - masked) + pred * Tensor(masked)
        recon = unpatchify(mixed, grid, p)
        if pad_h or pad_w:
            recon = crop(recon, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
        return recon, recon_loss, plan


def mae_encode(state: MicroMAE, visible: Tensor) -> Tensor:
    return state.encode(visible)


def mae_decode(state: MicroMAE, encoded: Tensor, plan: MaskPlan) -> Tensor:
    return state.decode(encoded, plan)


def mae_forward(state: MicroMAE, feat: Tensor, ratio: float, rng: Rng | None):
    recon, loss, _ = state(feat, ratio, rng)
    return recon, loss
