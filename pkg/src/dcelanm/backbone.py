"""CNN building blocks: CBS units, ELAN/DCELAN blocks, the dual-branch
samplers and the DCELAN PATH skip refiners."""

from __future__ import annotations

from . import functional as F
from .layers import BatchNorm2d, Conv2d, Module
from .rng import Rng
from .tensor import ShapeError, Tensor, concat

# kind -> (kernel, stride)
CBS_KINDS = {"CBS1": (1, 1), "CBS2": (3, 1), "CBS3": (3, 2)}


class CBS(Module):
    """Convolution -> batch norm -> SiLU."""

    def __init__(self, kind: str, c_in: int, c_out: int, rng: Rng | None = None):
        if kind not in CBS_KINDS:
            raise ValueError(f"unknown CBS kind {kind!r}; expected one of {sorted(CBS_KINDS)}")
        k, s = CBS_KINDS[kind]
        self.kind = kind
        self.c_in = c_in
        self.c_out = c_out
        self.conv = Conv2d(c_in, c_out, k, s, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"{self.kind} expects {self.c_in} channels, got {x.shape[1]}")
        return F.silu(self.bn(self.conv(x)))


def cbs_forward(spec: CBS, x: Tensor) -> Tensor:
    return spec(x)


class AggregationBlock(Module):
    """ELAN (``dual=False``) or DCELAN (``dual=True``) block.

    A 1x1 stem reduces to ``hidden`` channels; one (ELAN) or two (DCELAN)
    chains of four 3x3 CBS units run on the stem output with taps after
    units 2 and 4. DCELAN also adds a 1x1 residual projection of the raw
    input. Everything is concatenated and a final 1x1 CBS maps to
    ``c_out``::

        ELAN:   fuse([h, a2, a4])               width 3 * hidden
        DCELAN: fuse([h, a2, a4, b2, b4, r])    width 6 * hidden
    """

    taps = (1, 3)

    def __init__(self, c_in: int, c_out: int, dual: bool = True, chain: int = 4, rng: Rng | None = None):
        if max(c_in, c_out) % 2:
            raise ShapeError(f"block channel count must be even, got {max(c_in, c_out)}")
        hidden = max(c_in, c_out) // 2
        rng = rng or Rng(0)
        self.c_in, self.c_out, self.hidden, self.dual = c_in, c_out, hidden, dual
        self.stem = CBS("CBS1", c_in, hidden, rng)
        self.branch_a = [CBS("CBS2", hidden, hidden, rng) for _ in range(chain)]
        if dual:
            self.branch_b = [CBS("CBS2", hidden, hidden, rng) for _ in range(chain)]
            self.residual_proj = CBS("CBS1", c_in, hidden, rng)
        width = hidden * (6 if dual else 3)
        self.fuse = CBS("CBS1", width, c_out, rng)

    def _chain(self, units, h):
        taps = []
        for i, unit in enumerate(units):
            h = unit(h)
            if i in self.taps:
                taps.append(h)
        return taps

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"block expects [B,{self.c_in},H,W], got {list(x.shape)}")
        h = self.stem(x)
        parts = [h] + self._chain(self.branch_a, h)
        if self.dual:
            parts += self._chain(self.branch_b, h)
            parts.append(self.residual_proj(x))
        return self.fuse(concat(parts, axis=1))


def DCELANBlock(c_in, c_out, rng=None):
    return AggregationBlock(c_in, c_out, dual=True, rng=rng)


def ELANBlock(c_in, c_out, rng=None):
    return AggregationBlock(c_in, c_out, dual=False, rng=rng)


def dcelan_block(state: AggregationBlock, x: Tensor) -> Tensor:
    return state(x)


def elan_block(state: AggregationBlock, x: Tensor) -> Tensor:
    return state(x)


class DownSample(Module):
    """``concat[CBS1(maxpool(x)), CBS3(CBS1(x))]``; each branch emits ``c_out / 2``."""

    def __init__(self, c_in: int, c_out: int, rng: Rng | None = None):
        if c_out % 2:
            raise ShapeError(f"sampler output channels must be even, got {c_out}")
        half = c_out // 2
        self.pool_branch = CBS("CBS1", c_in, half, rng)
        self.conv_reduce = CBS("CBS1", c_in, half, rng)
        self.conv_branch = CBS("CBS3", half, half, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"down_sample needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
        pooled = self.pool_branch(F.max_pool2d(x))
        strided = self.conv_branch(self.conv_reduce(x))
        return concat([pooled, strided], axis=1)


class UpSample(Module):
    """Bilinear x2, then ``concat[CBS2(u), CBS1(u)]``; each branch ``c_out / 2``."""

    def __init__(self, c_in: int, c_out: int, rng: Rng | None = None):
        if c_out % 2:
            raise ShapeError(f"sampler output channels must be even, got {c_out}")
        half = c_out // 2
        self.branch_a = CBS("CBS2", c_in, half, rng)
        self.branch_b = CBS("CBS1", c_in, half, rng)

    def forward(self, x: Tensor) -> Tensor:
        u = F.bilinear_upsample(x)
        return concat([self.branch_a(u), self.branch_b(u)], axis=1)


def down_sample(state: DownSample, x: Tensor) -> Tensor:
    return state(x)


def up_sample(state: UpSample, x: Tensor) -> Tensor:
    return state(x)


class PathUnit(Module):
    def __init__(self, channels: int, rng: Rng | None = None):
        self.main = CBS("CBS2", channels, channels, rng)
        self.residual = CBS("CBS1", channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.main(x) + self.residual(x)


class DCELANPath(Module):
    """Skip refiner: ``x <- CBS2(x) + CBS1(x)`` repeated ``repeats`` times."""

    def __init__(self, channels: int, repeats: int, rng: Rng | None = None):
        if repeats < 0:
            raise ValueError(f"repeats must be >= 0, got {repeats}")
        self.channels = channels
        self.repeats = repeats
        self.units = [PathUnit(channels, rng) for _ in range(repeats)]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"path expects {self.channels} channels, got {x.shape[1]}")
        for unit in self.units:
            x = unit(x)
        return x


def dcelan_path(state: DCELANPath, x: Tensor) -> Tensor:
    return state(x)


def decoder_fuse(up: Tensor, skip: Tensor, path: DCELANPath) -> Tensor:
    """``concat[up, path(skip)]`` along channels."""
    if up.shape != skip.shape:
        raise ShapeError(f"decoder_fuse: upsampled {list(up.shape)} vs skip {list(skip.shape)}")
    return concat([up, path(skip)], axis=1)


class DecoderStage(Module):
    """Upsample, fuse with the refined skip, aggregate, add a projected residual."""

    def __init__(self, c_in: int, c_out: int, repeats: int, dual: bool = True, rng: Rng | None = None):
        self.up = UpSample(c_in, c_out, rng)
        self.path = DCELANPath(c_out, repeats, rng)
        self.block = AggregationBlock(2 * c_out, c_out, dual=dual, rng=rng)
        self.up_proj = CBS("CBS1", c_out, c_out, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        u = self.up(x)
        return self.block(decoder_fuse(u, skip, self.path)) + self.up_proj(u)
