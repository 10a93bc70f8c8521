"""The finite-difference suite behind ``dcelanm gradcheck``.

Every case is a scalar function of small fp64 tensors (64 elements or
fewer per input). Outputs are contracted with a fixed random tensor so no
gradient is structurally zero. Smooth ops get the tight tolerance; ops
with branches (abs, max, pooling) and deep composites get the loose one.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import CBS, AggregationBlock, DCELANPath, DownSample, UpSample
from .gradcheck import finite_diff_check_many
from .layers import LayerNorm, Linear, MultiHeadSelfAttention, TransformerBlock
from .mae import MicroMAE
from .objective import LossWeights, TverskyParams, combined_loss, mse_loss, tversky_loss
from .rng import Rng
from .tensor import Tensor, default_dtype

SMOOTH_TOL = 1e-5
BRANCH_TOL = 1e-3
EPS = 1e-6


def _t(rng: Rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(shape, low=low, high=high), requires_grad=True)


def _contract(out: Tensor, probe: np.ndarray) -> Tensor:
    return (out * Tensor(probe.reshape(out.shape))).sum()


def _case(rng: Rng, fn, inputs):
    """Wrap ``fn(*inputs)`` into a scalar by a fixed random contraction."""
    probe = {}

    def f():
        out = fn(*inputs)
        if out.size == 1:
            return out
        if "p" not in probe:
            probe["p"] = rng.uniform(out.shape, low=0.5, high=1.5)
        return _contract(out, probe["p"])

    return f, list(inputs)


def _trainable(module, skip_pre_bn_bias: bool = True):
    """Module weights to check. Conv biases directly followed by batch norm
    have an identically zero gradient and are left out."""
    out = []
    for name, p in module.named_parameters():
        if skip_pre_bn_bias and name.endswith("conv.bias"):
            continue
        if p.requires_grad:
            out.append(p)
    return out


def op_cases(rng: Rng):
    pos = lambda shape: _t(rng, shape, 0.5, 2.0)  # noqa: E731
    yield "add", SMOOTH_TOL, _case(rng, T.add, [_t(rng, (3, 4)), _t(rng, (4,))])
    yield "sub", SMOOTH_TOL, _case(rng, T.sub, [_t(rng, (2, 3, 4)), _t(rng, (3, 4))])
    yield "mul", SMOOTH_TOL, _case(rng, T.mul, [_t(rng, (4, 4)), _t(rng, (4, 4))])
    yield "div", SMOOTH_TOL, _case(rng, T.div, [_t(rng, (4, 4)), pos((4,))])
    yield "pow", SMOOTH_TOL, _case(rng, T.power, [pos((2, 8)), pos((8,))])
    yield "pow_scalar", SMOOTH_TOL, _case(rng, lambda a: T.power(a, 2.5), [pos((16,))])
    yield "exp", SMOOTH_TOL, _case(rng, T.exp, [_t(rng, (16,))])
    yield "log", SMOOTH_TOL, _case(rng, T.log, [pos((16,))])
    yield "sqrt", SMOOTH_TOL, _case(rng, T.sqrt, [pos((16,))])
    yield "tanh", SMOOTH_TOL, _case(rng, T.tanh, [_t(rng, (16,))])
    yield "abs", BRANCH_TOL, _case(rng, T.abs_, [_t(rng, (16,))])
    yield "matmul", SMOOTH_TOL, _case(rng, T.matmul, [_t(rng, (2, 3, 4)), _t(rng, (4, 5))])
    yield "sum", SMOOTH_TOL, _case(rng, lambda x: T.reduce_sum(x, (0, 2), keepdims=True), [_t(rng, (2, 3, 4))])
    yield "mean", SMOOTH_TOL, _case(rng, lambda x: T.reduce_mean(x, 1), [_t(rng, (2, 3, 4))])
    yield "max", BRANCH_TOL, _case(rng, lambda x: T.reduce_max(x, -1), [_t(rng, (4, 8))])
    yield "reshape", SMOOTH_TOL, _case(rng, lambda x: T.reshape(x, (4, 6)), [_t(rng, (2, 3, 4))])
    yield "transpose", SMOOTH_TOL, _case(rng, lambda x: T.transpose(x, (2, 0, 1)), [_t(rng, (2, 3, 4))])
    yield "concat", SMOOTH_TOL, _case(rng, lambda a, b: T.concat([a, b], 1), [_t(rng, (1, 2, 3, 3)), _t(rng, (1, 3, 3, 3))])
    yield "slice", SMOOTH_TOL, _case(rng, lambda x: T.slice_axis(x, 1, 1, 3), [_t(rng, (2, 4, 4))])
    yield "getitem", SMOOTH_TOL, _case(rng, lambda x: x[:, np.array([0, 2, 2])], [_t(rng, (3, 4))])
    yield "pad", SMOOTH_TOL, _case(rng, lambda x: T.pad(x, ((0, 0), (1, 2), (2, 0))), [_t(rng, (2, 3, 3))])
    yield "crop", SMOOTH_TOL, _case(rng, lambda x: T.crop(x, ((0, 0), (1, 1), (0, 2))), [_t(rng, (2, 5, 5))])
    yield "take_along_axis", SMOOTH_TOL, _case(
        rng, lambda x: T.take_along_axis(x, np.array([[[2], [0], [1]]]), 1), [_t(rng, (1, 3, 4))]
    )
    yield "sigmoid", SMOOTH_TOL, _case(rng, F.sigmoid, [_t(rng, (16,), -4, 4)])
    yield "silu", SMOOTH_TOL, _case(rng, F.silu, [_t(rng, (16,), -4, 4)])
    yield "gelu", SMOOTH_TOL, _case(rng, F.gelu, [_t(rng, (16,), -3, 3)])
    yield "softmax", SMOOTH_TOL, _case(rng, lambda x: F.softmax(x, -1), [_t(rng, (3, 5))])
    for k, s, p in ((1, 1, 0), (3, 1, 1), (3, 2, 1)):
        yield f"conv2d_k{k}s{s}p{p}", SMOOTH_TOL, _case(
            rng, lambda x, w, b, s=s, p=p: F.conv2d(x, w, b, s, p),
            [_t(rng, (1, 2, 4, 4)), _t(rng, (3, 2, k, k)), _t(rng, (3,))],
        )
    yield "batch_norm", SMOOTH_TOL, _case(
        rng, lambda x, g, b: F.batch_norm(x, g, b, np.zeros(2), np.ones(2), True),
        [_t(rng, (2, 2, 3, 3)), pos((2,)), _t(rng, (2,))],
    )
    # distinct values so every window has a unique maximum
    pool_in = Tensor(rng.permutation(32).reshape(1, 2, 4, 4) / 8.0, requires_grad=True)
    yield "max_pool2d", BRANCH_TOL, _case(rng, F.max_pool2d, [pool_in])
    yield "bilinear_upsample", SMOOTH_TOL, _case(rng, F.bilinear_upsample, [_t(rng, (1, 2, 3, 4))])
    lin = Linear(4, 3, rng=rng)
    yield "linear", SMOOTH_TOL, _case(rng, lambda x, *_: lin(x), [_t(rng, (2, 4)), lin.weight, lin.bias])
    ln = LayerNorm(6)
    ln.gamma.data[:] = rng.uniform(6, low=0.5, high=1.5)
    yield "layer_norm", SMOOTH_TOL, _case(rng, lambda x, *_: ln(x), [_t(rng, (2, 6)), ln.gamma, ln.beta])
    mha = MultiHeadSelfAttention(8, 2, rng)
    yield "attention", SMOOTH_TOL, _case(rng, lambda x, *_: mha(x), [_t(rng, (1, 4, 8)), *_trainable(mha)])


def block_cases(rng: Rng):
    def module_case(module, x):
        return _case(rng, lambda x, *_: module(x), [x, *_trainable(module)])

    yield "transformer_block", BRANCH_TOL, module_case(TransformerBlock(4, 2, 2, rng), _t(rng, (1, 4, 4)))
    for kind in ("CBS1", "CBS2", "CBS3"):
        yield f"cbs_{kind}", BRANCH_TOL, module_case(CBS(kind, 2, 2, rng), _t(rng, (1, 2, 4, 4)))
    yield "dcelan_block", BRANCH_TOL, module_case(AggregationBlock(4, 4, dual=True, rng=rng), _t(rng, (1, 4, 4, 4)))
    yield "elan_block", BRANCH_TOL, module_case(AggregationBlock(4, 4, dual=False, rng=rng), _t(rng, (1, 4, 4, 4)))
    pool_in = Tensor(rng.permutation(64).reshape(1, 4, 4, 4) / 16.0 - 2.0, requires_grad=True)
    yield "down_sample", BRANCH_TOL, module_case(DownSample(4, 4, rng), pool_in)
    yield "up_sample", BRANCH_TOL, module_case(UpSample(4, 2, rng), _t(rng, (1, 4, 2, 2)))
    yield "dcelan_path", BRANCH_TOL, module_case(DCELANPath(2, 2, rng), _t(rng, (1, 2, 4, 4)))

    target = (rng.uniform((1, 1, 4, 4)) > 0.5).astype(np.float64)
    target[0, 0, 0, 0], target[0, 0, 0, 1] = 1.0, 0.0
    probs = _t(rng, (1, 1, 4, 4), 0.05, 0.95)
    for a, b in ((0.5, 0.5), (0.3, 0.7), (1.0, 1.0)):
        yield f"tversky_a{a}_b{b}", SMOOTH_TOL, _case(
            rng, lambda p, a=a, b=b: tversky_loss(p, target, TverskyParams(a, b)), [probs]
        )
    yield "mse", SMOOTH_TOL, _case(rng, lambda a, b: mse_loss(a, b), [_t(rng, (4, 4)), _t(rng, (4, 4))])

    mae = MicroMAE(
        channels=4, patch=2, grid=(2, 2), dim=4, depth=1, dec_dim=4, dec_depth=1, heads=2, mlp_ratio=2, rng=rng
    )

    # the reconstruction target is a stop-gradient copy of the feature map,
    # so the features are held fixed and only predictions and MAE weights vary
    feat = Tensor(rng.uniform((1, 4, 4, 4), low=-1.0, high=1.0))

    def objective(p, *_):
        _, recon, _ = mae(feat, 0.5, Rng(11))
        return combined_loss(p, target, recon, LossWeights(0.8, 0.2), TverskyParams())

    yield "combined_objective", BRANCH_TOL, _case(rng, objective, [probs, *_trainable(mae)])


def gradcheck_cases(rng: Rng | None = None, blocks: bool = True):
    """``(name, tolerance, (f, inputs))`` for every case, built in fp64."""
    rng = rng or Rng(0)
    with default_dtype(np.float64):
        cases = list(op_cases(rng.spawn("ops")))
        if blocks:
            cases += list(block_cases(rng.spawn("blocks")))
    return cases


def run_gradchecks(rng: Rng | None = None, blocks: bool = True):
    """Yield ``(name, max_rel_err, tolerance)`` for every case."""
    cases = gradcheck_cases(rng, blocks)
    with default_dtype(np.float64):
        for name, tol, (f, inputs) in cases:
            yield name, finite_diff_check_many(f, inputs, EPS), tol
