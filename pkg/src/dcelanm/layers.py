"""Parameterised layers: a small ``Module`` container plus conv, norm,
dense and transformer layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .rng import Rng
from .tensor import ShapeError, Tensor, get_default_dtype, reshape, transpose, matmul


def kaiming_normal(rng: Rng, shape, fan_in: int, dtype=None) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(shape, std=std).astype(dtype or get_default_dtype()), requires_grad=True)


def zeros(shape, dtype=None, requires_grad=True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=True) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)


class Module:
    """Attribute-walking container for parameters, buffers and children.

    Parameters are ``Tensor`` attributes; buffers are numpy arrays whose
    attribute names appear in ``_buffer_names``. Children may be held
    directly or in lists.
    """

    _buffer_names: tuple = ()
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Snapshot (copies) of parameters and buffers."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy matching entries in; returns the names that were loaded."""
        loaded = []
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, value in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            elif strict:
                raise KeyError(f"unexpected state entry {name!r}")
            else:
                continue
            value = np.asarray(value)
            if value.shape != target.shape:
                raise ShapeError(f"{name}: stored shape {list(value.shape)} != model shape {list(target.shape)}")
            target[...] = value
            loaded.append(name)
        if strict:
            missing = (set(params) | set(buffers)) - set(loaded)
            if missing:
                raise KeyError(f"missing state entries: {sorted(missing)[:5]}")
        return loaded

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer to ``dtype`` in place."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int | None = None, rng: Rng | None = None):
        if k not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {k}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        rng = rng or Rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = kaiming_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros((c_out,))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = ones((channels,))
        self.beta = zeros((channels,))
        self.running_mean = np.zeros(channels, dtype=get_default_dtype())
        self.running_var = np.ones(channels, dtype=get_default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.weight = kaiming_normal(rng, (d_in, d_out), d_in)
        self.bias = zeros((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = ones((dim,))
        self.beta = zeros((dim,))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    """Unmasked multi-head self-attention over [B, N, D] token sequences."""

    def __init__(self, dim: int, heads: int, rng: Rng | None = None):
        if dim % heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
        rng = rng or Rng(0)
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = kaiming_normal(rng, (dim, dim), dim)
        self.w_k = kaiming_normal(rng, (dim, dim), dim)
        self.w_v = kaiming_normal(rng, (dim, dim), dim)
        self.w_o = kaiming_normal(rng, (dim, dim), dim)

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return transpose(reshape(t, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attention_weights(self, x: Tensor) -> Tensor:
        """Softmax weights, shape [B, heads, N, N]."""
        q = self._split(F.linear(x, self.w_q))
        k = self._split(F.linear(x, self.w_k))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        return F.softmax(scores, axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"attention expects [B,N,D], got {list(x.shape)}")
        b, n, d = x.shape
        attn = self.attention_weights(x)
        v = self._split(F.linear(x, self.w_v))
        ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
        return F.linear(reshape(ctx, (b, n, d)), self.w_o)


class TransformerBlock(Module):
    """Pre-norm block: ``z' = MSA(LN(z)) + z``; ``out = MLP(LN(z')) + z'``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng=rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.attn(self.norm1(x)) + x
        return self.fc2(F.gelu(self.fc1(self.norm2(x)))) + x
