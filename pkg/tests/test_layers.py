import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from dcelanm import functional as F
from dcelanm.gradcheck import finite_diff_check, finite_diff_check_many
from dcelanm.layers import BatchNorm2d, Conv2d, LayerNorm, Linear, MultiHeadSelfAttention, TransformerBlock
from dcelanm.rng import Rng
from dcelanm.tensor import ShapeError, Tensor


def conv_reference(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[-1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,ocij->bohw", win, w) + b[None, :, None, None]


@pytest.mark.parametrize("k,s,p,h", [(1, 1, 0, 5), (3, 1, 1, 7), (3, 2, 1, 8), (3, 2, 1, 7), (3, 1, 0, 6)])
def test_conv2d_matches_einsum(fp64, k, s, p, h):
    rng = np.random.default_rng(k + s + h)
    x = rng.normal(size=(2, 3, h, h + 1))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), s, p)
    assert out.shape[2] == (h + 2 * p - k) // s + 1
    assert np.allclose(out.data, conv_reference(x, w, b, s, p), atol=1e-12)


def test_conv2d_identity_pointwise():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 4)).astype(np.float32))
    w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
    assert np.array_equal(F.conv2d(x, w, Tensor(np.zeros(3, np.float32))).data, x.data)


def test_conv2d_stride2_shape():
    layer = Conv2d(3, 8, 3, 2, rng=Rng(0))
    assert layer(Tensor(np.zeros((1, 3, 256, 256), np.float32))).shape == (1, 8, 128, 128)


def test_conv2d_ones_kernel_constant_input():
    out = F.conv2d(Tensor(np.full((1, 1, 5, 5), 2.0)), Tensor(np.ones((1, 1, 3, 3))))
    assert np.allclose(out.data, 18.0)


def test_conv2d_errors():
    with pytest.raises(ShapeError, match="channel"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="smaller"):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_silu_values_and_gradient(fp64):
    x = Tensor([0.0, 10.0], requires_grad=True)
    y = F.silu(x)
    assert y.data[0] == 0.0
    assert abs(y.data[1] - 10.0 * expit(10.0)) < 1e-12
    assert abs(y.data[1] - 9.99955) < 1e-5
    y.sum().backward()
    assert abs(x.grad[0] - 0.5) < 1e-12


def test_sigmoid_matches_scipy_and_stays_finite():
    x = np.linspace(-800, 800, 1001)
    assert np.allclose(F.sigmoid(Tensor(x, dtype=np.float64)).data, expit(x), atol=1e-15)
    s = F.sigmoid(Tensor(np.array([-1e4, 1e4], np.float32))).data
    assert np.isfinite(s).all()


def test_batchnorm_train_statistics():
    bn = BatchNorm2d(3)
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(4, 3, 5, 5)), dtype=np.float64)
    out = bn(x).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-4
    assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() <= 1e-3


def test_batchnorm_running_mean_momentum():
    bn = BatchNorm2d(1)
    bn.running_mean[:] = 2.0
    x = Tensor(np.array([1.0, 3.0, 5.0, 7.0]).reshape(2, 1, 1, 2))
    bn(x)
    assert np.isclose(bn.running_mean[0], 0.9 * 2.0 + 0.1 * 4.0)
    assert np.isclose(bn.running_var[0], 0.9 * 1.0 + 0.1 * np.var([1, 3, 5, 7], ddof=1))


def test_batchnorm_eval_is_near_identity_and_frozen():
    bn = BatchNorm2d(2).eval()
    x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 3, 3)))
    before = bn.running_mean.copy(), bn.running_var.copy()
    out = bn(x)
    assert np.allclose(out.data, x.data / np.sqrt(1 + 1e-5), atol=1e-6)
    assert np.array_equal(before[0], bn.running_mean) and np.array_equal(before[1], bn.running_var)


def test_batchnorm_single_element_rejected():
    with pytest.raises(ValueError):
        BatchNorm2d(2)(Tensor(np.zeros((1, 2, 1, 1))))


def test_max_pool_basic():
    out = F.max_pool2d(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)))
    assert out.data.ravel().tolist() == [4.0]
    assert np.array_equal(F.max_pool2d(Tensor(np.full((1, 2, 4, 4), 7.0))).data, np.full((1, 2, 2, 2), 7.0))


def test_max_pool_tie_routes_to_first(fp64):
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    F.max_pool2d(x).sum().backward()
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_max_pool_one_element_per_window(fp64):
    x = Tensor(np.random.default_rng(2).permutation(64).reshape(1, 4, 4, 4).astype(float), requires_grad=True)
    F.max_pool2d(x).sum().backward()
    per_window = x.grad.reshape(1, 4, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 4, 2, 2, 4)
    assert np.array_equal((per_window != 0).sum(-1), np.ones((1, 4, 2, 2)))


def test_max_pool_odd_rejected():
    with pytest.raises(ShapeError):
        F.max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_bilinear_upsample_row():
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2), dtype=np.float64)
    out = F.bilinear_upsample(x)
    assert np.allclose(out.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


def test_bilinear_upsample_constant_and_single_pixel():
    c = F.bilinear_upsample(Tensor(np.full((1, 2, 3, 5), 1.5)))
    assert np.allclose(c.data, 1.5) and c.shape == (1, 2, 6, 10)
    one = F.bilinear_upsample(Tensor(np.array([[[[4.0]]]])))
    assert np.allclose(one.data, 4.0) and one.shape == (1, 1, 2, 2)


def test_bilinear_matches_interpolation_matrix(fp64):
    x = np.random.default_rng(3).normal(size=(1, 1, 3, 5))
    m_h, m_w = F.interpolation_matrix(3, 6), F.interpolation_matrix(5, 10)
    assert np.allclose(F.bilinear_upsample(Tensor(x)).data[0, 0], m_h @ x[0, 0] @ m_w.T)


def test_linear_identity_and_bias():
    lin = Linear(3, 3, rng=Rng(0))
    lin.weight.data[:] = np.eye(3)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.allclose(lin(x).data, x.data)
    lin.weight.data[:] = 0
    lin.bias.data[:] = [1, 2, 3]
    assert np.allclose(lin(x).data, [[1, 2, 3], [1, 2, 3]])


def test_linear_gradient(fp64):
    lin = Linear(4, 3, rng=Rng(1))
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4)))
    probe = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    assert finite_diff_check_many(lambda: (lin(x) * probe).sum(), [x, lin.weight, lin.bias]) <= 1e-5


def test_layer_norm_properties(fp64):
    ln = LayerNorm(16)
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(4, 16))
    out = ln(Tensor(x)).data
    assert np.abs(out.mean(-1)).max() <= 1e-4
    assert np.abs(out.var(-1) - 1).max() <= 1e-4
    assert np.allclose(ln(Tensor(10 * x)).data, out, atol=1e-3)
    z = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    assert np.allclose(ln(Tensor(z)).data, z, atol=1e-4)


def test_attention_rows_sum_to_one():
    mha = MultiHeadSelfAttention(8, 2, Rng(0))
    w = mha.attention_weights(Tensor(np.random.default_rng(0).normal(size=(2, 5, 8))))
    assert w.shape == (2, 2, 5, 5)
    assert np.abs(w.data.sum(-1) - 1).max() <= 1e-6


def test_attention_single_token(fp64):
    mha = MultiHeadSelfAttention(4, 2, Rng(0))
    x = np.random.default_rng(0).normal(size=(1, 1, 4))
    assert np.allclose(mha(Tensor(x)).data, x @ mha.w_v.data @ mha.w_o.data)


def test_attention_hand_case(fp64):
    mha = MultiHeadSelfAttention(2, 1, Rng(0))
    for w, val in ((mha.w_q, [[1, 0], [0, 1]]), (mha.w_k, [[1, 1], [0, 1]]), (mha.w_v, [[2, 0], [1, 1]]), (mha.w_o, [[1, 0], [0, 1]])):
        w.data[:] = val
    x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    q, k, v = x[0] @ mha.w_q.data, x[0] @ mha.w_k.data, x[0] @ mha.w_v.data
    s = q @ k.T / np.sqrt(2.0)
    a = np.exp(s) / np.exp(s).sum(-1, keepdims=True)
    assert np.allclose(mha(Tensor(x)).data[0], a @ v)


def test_attention_indivisible_heads():
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(6, 4)


def test_transformer_permutation_equivariant(fp64):
    block = TransformerBlock(8, 2, 4, Rng(3))
    x = np.random.default_rng(0).normal(size=(1, 5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    assert np.allclose(block(Tensor(x[:, perm])).data, block(Tensor(x)).data[:, perm], atol=1e-12)


def test_transformer_zero_projections_is_identity(fp64):
    block = TransformerBlock(8, 2, 4, Rng(3))
    block.attn.w_o.data[:] = 0
    block.fc2.weight.data[:] = 0
    x = np.random.default_rng(0).normal(size=(2, 3, 8))
    assert np.allclose(block(Tensor(x)).data, x)


def test_transformer_gradient(fp64):
    block = TransformerBlock(8, 2, 4, Rng(5))
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 8)))
    probe = np.random.default_rng(1).normal(size=(1, 4, 8))
    assert finite_diff_check(lambda t: (block(t) * Tensor(probe)).sum(), x) <= 1e-3


def test_silu_conv_composite_gradient(fp64):
    w = Tensor(np.random.default_rng(0).normal(size=(2, 2, 3, 3)))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 4, 4)))
    assert finite_diff_check(lambda t: F.silu(F.conv2d(t, w, padding=1)).sum(), x) <= 1e-3


def test_module_state_roundtrip():
    a, b = Conv2d(2, 3, 3, rng=Rng(0)), Conv2d(2, 3, 3, rng=Rng(1))
    assert not np.array_equal(a.weight.data, b.weight.data)
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.weight.data, b.weight.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})
