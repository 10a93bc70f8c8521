"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, index):
        super().__init__(f"non-finite value in {what} at index {index}")
        self.what = what
        self.index = index


def _scalar(out: Tensor, what: str) -> float:
    if out.size != 1:
        raise ValueError(f"{what} must be scalar-valued, got shape {list(out.shape)}")
    value = float(out.data.ravel()[0])
    if not np.isfinite(value):
        raise NonFiniteError(what, ())
    return value


def _first_bad(arr: np.ndarray):
    return tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every element of ``t`` (perturbed in place)."""
    grad = np.zeros(t.data.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = _scalar(f(), "f(x + eps)")
        flat[i] = orig - eps
        down = _scalar(f(), "f(x - eps)")
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def finite_diff_check_many(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error over all elements of ``tensors``; ``f`` closes over them."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f()
    _scalar(out, "f(x)")
    out.backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        if not np.isfinite(analytic).all():
            raise NonFiniteError(f"analytic gradient of input {k}", _first_bad(analytic))
        numeric = numeric_grad(f, t, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """``max |analytic - central| / (|central| + 1e-8)`` for scalar ``f(x)``.

    Use fp64 inputs; fp32 differences are too noisy for tight tolerances.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if not np.isfinite(x.data).all():
        raise NonFiniteError("x", _first_bad(x.data))
    probe = Tensor(x.data.copy(), requires_grad=True)
    return finite_diff_check_many(lambda: f(probe), [probe], eps)
