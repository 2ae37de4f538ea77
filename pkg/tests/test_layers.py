"""Module-level backward passes through the shared finite-difference checker."""
import numpy as np
import pytest

from lightreseg.errors import ConfigError
from lightreseg.nn import (GELU, AsymConvPair, BatchNorm2d, Conv2d, ConvBNReLU, DepthwiseConv2d,
                           DSConvBlock, LayerNorm, Linear, MultiHeadSelfAttention, ReLU, Sequential,
                           Upsample2x, ds_conv_param_count, gradcheck, no_grad)
from lightreseg.tensor import Rng

from helpers import assert_gradients


def _layers(rng):
    return {
        "conv3x3": (Conv2d(2, 3, 3, rng), (2, 2, 5, 5)),
        "conv_stride2": (Conv2d(2, 3, 3, rng, stride=2), (2, 2, 6, 5)),
        "depthwise": (DepthwiseConv2d(3, 3, rng), (2, 3, 5, 4)),
        "batchnorm": (BatchNorm2d(3), (3, 3, 3, 3)),
        "relu": (ReLU(), (2, 3, 4)),
        "gelu": (GELU(), (2, 3, 4)),
        "linear": (Linear(4, 5, rng), (2, 3, 4)),
        "layernorm": (LayerNorm(5), (2, 3, 5)),
        "mhsa": (MultiHeadSelfAttention(4, rng, heads=2, dim_head=3), (2, 5, 4)),
        "upsample": (Upsample2x(), (1, 2, 3, 4)),
        "conv_bn_relu": (ConvBNReLU(2, 3, rng), (2, 2, 4, 4)),
        "ds_block": (DSConvBlock(2, 3, rng, stride=2), (2, 2, 6, 6)),
        "asym_pair": (AsymConvPair(2, 7, rng), (2, 2, 5, 6)),
    }


@pytest.mark.parametrize("name", list(_layers(Rng(0))))
def test_layer_gradcheck(name, f64):
    rng = Rng(11)
    layer, shape = _layers(rng)[name]
    report = gradcheck(layer, [rng.normal(shape)], rng, n_coords=40)
    assert_gradients(report, tol=1e-5)


def test_batchnorm_eval_mode_gradcheck(f64):
    rng = Rng(12)
    bn = BatchNorm2d(3)
    bn(rng.normal((4, 3, 3, 3)) * 2 + 1)  # populate running statistics
    bn.eval()
    assert gradcheck(bn, [rng.normal((2, 3, 3, 3))], rng).max_rel_error <= 1e-6


def test_batchnorm_running_stats_update():
    bn = BatchNorm2d(1, momentum=0.5)
    x = np.array([1.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1)
    bn(x)
    np.testing.assert_allclose(bn.running_mean, [1.0])
    np.testing.assert_allclose(bn.running_var, [0.5 + 0.5 * 2.0])  # unbiased var of {1,3} is 2


def test_parameters_accumulate_and_zero():
    rng = Rng(0)
    lin = Linear(3, 2, rng)
    x = rng.normal((4, 3)).astype(np.float32)
    lin(x)
    lin.backward(np.ones((4, 2), np.float32))
    first = lin.weight.grad.copy()
    lin(x)
    lin.backward(np.ones((4, 2), np.float32))
    np.testing.assert_allclose(lin.weight.grad, 2 * first)
    lin.zero_grad()
    assert not lin.weight.grad.any()


def test_no_grad_drops_caches():
    conv = Conv2d(1, 1, 3, Rng(0))
    with no_grad():
        conv(np.ones((1, 1, 4, 4), np.float32))
    assert conv._cache is None


def test_sequential_names_and_counts():
    rng = Rng(0)
    seq = Sequential(Conv2d(2, 3, 3, rng), BatchNorm2d(3), ReLU())
    names = [n for n, _ in seq.named_parameters()]
    assert names == ["0.weight", "0.bias", "1.gamma", "1.beta"]
    assert seq.num_parameters() == 2 * 3 * 9 + 3 + 6
    assert [n for n, _ in seq.named_buffers()] == ["1.running_mean", "1.running_var"]


def test_ds_block_count_and_cost():
    assert ds_conv_param_count(4, 8) == 4 * 9 + 4 + 4 * 8 + 8
    block = DSConvBlock(4, 8, Rng(0))
    assert block.num_parameters() == ds_conv_param_count(4, 8) + 2 * 8
    # far fewer scalars than the dense 3x3 equivalent
    assert ds_conv_param_count(64, 64) < 0.15 * (64 * 64 * 9 + 64)


def test_asym_pair_preserves_shape_and_rejects_even_kernels():
    pair = AsymConvPair(3, 11, Rng(0))
    assert pair(np.zeros((1, 3, 6, 6), np.float32)).shape == (1, 3, 6, 6)
    with pytest.raises(ConfigError):
        AsymConvPair(3, 4, Rng(0))


def test_astype_converts_parameters_and_buffers():
    block = ConvBNReLU(2, 2, Rng(0)).astype(np.float64)
    assert all(p.data.dtype == np.float64 and p.grad.dtype == np.float64 for p in block.parameters())
    assert block.bn.running_var.dtype == np.float64


def test_gradcheck_skips_relu_kinks(f64):
    rng = Rng(3)
    # inputs near zero make kinks likely; the report must still be exact elsewhere
    relu = ReLU()
    x = rng.normal((50,)) * 1e-5
    report = gradcheck(relu, [x], rng, n_coords=30)
    assert report.kinks_skipped > 0
    assert report.max_rel_error <= 1e-8
