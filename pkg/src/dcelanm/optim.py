"""Adam optimizer and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def cosine_lr(lr0: float, t: float, total: float) -> float:
    """``lr0 * (1 + cos(pi * t / total)) / 2``; no warmup, no restarts."""
    if total <= 0:
        raise ValueError(f"total must be positive, got {total}")
    t = min(max(t, 0.0), total)
    return lr0 * (1.0 + math.cos(math.pi * t / total)) / 2.0


class Adam:
    """Adam with bias correction over a list of named parameters.

    Parameters without a gradient are skipped (their moments are left
    untouched), which lets a frozen sub-network share the optimizer.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None or not p.requires_grad:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array([self.t], dtype=np.float64), "lr": np.array([self.lr], dtype=np.float64)}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(np.asarray(state["t"]).ravel()[0])
        self.lr = float(np.asarray(state["lr"]).ravel()[0])
        for k in self.params:
            if f"m.{k}" in state:
                self.m[k] = np.array(state[f"m.{k}"], dtype=self.params[k].data.dtype).reshape(self.m[k].shape)
                self.v[k] = np.array(state[f"v.{k}"], dtype=self.params[k].data.dtype).reshape(self.v[k].shape)


def parameters_of(module, prefix: str | None = None) -> list[tuple[str, Tensor]]:
    """Trainable named parameters, optionally restricted to a name prefix."""
    return [
        (n, p) for n, p in module.named_parameters()
        if p.requires_grad and (prefix is None or n.startswith(prefix))
    ]
