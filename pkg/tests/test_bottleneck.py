import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lightreseg.bottleneck import (Bottleneck, TransformerLayer, detokenize, param_count_bottleneck,
                                   tokenize, transformer_layer_param_count)
from lightreseg.config import BottleneckConfig
from lightreseg.errors import DimensionError, ShapeError
from lightreseg.nn import gradcheck
from lightreseg.tensor import Rng


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_tokenize_roundtrip(p, gh, gw, c):
    x = np.arange(c * gh * p * gw * p, dtype=np.float64).reshape(c, gh * p, gw * p)
    t = tokenize(x, p)
    assert t.shape == (gh * gw, p * p * c)
    np.testing.assert_array_equal(detokenize(t, (gh, gw), p, c), x)


def test_tokenize_layout_is_row_major_channel_fastest():
    x = np.arange(2 * 2 * 4).reshape(2, 2, 4)  # C=2, h=2, w=4
    t = tokenize(x, 2)
    # first token: patch (0,0); entries (row, col, channel) with channel fastest
    np.testing.assert_array_equal(t[0], [x[0, 0, 0], x[1, 0, 0], x[0, 0, 1], x[1, 0, 1],
                                         x[0, 1, 0], x[1, 1, 0], x[0, 1, 1], x[1, 1, 1]])
    with pytest.raises(ShapeError):
        tokenize(x, 3)
    with pytest.raises(DimensionError):
        detokenize(t, (2, 2), 2, 2)


def test_zero_transformer_layer_is_identity(f64):
    layer = TransformerLayer(6, Rng(0), heads=2, dim_head=3)
    for p in (layer.attn.w_out, layer.attn.b_out, layer.mlp.fc2.weight, layer.mlp.fc2.bias):
        p.data[...] = 0.0
    z = Rng(1).normal((2, 5, 6))
    assert np.array_equal(layer(z), z)


def test_empty_bottleneck_with_identity_projections_reproduces_input(f64):
    cfg = BottleneckConfig(embed_dim=4, layers=0)
    bott = Bottleneck(cfg, 4, (3, 2), Rng(0))
    bott.proj.data[...] = np.eye(4)
    bott.detok.data[...] = np.eye(4)
    bott.pos_embed.data[...] = 0.0
    x = Rng(2).normal((2, 4, 3, 2))
    assert np.array_equal(bott(x), x)


def test_bottleneck_gradcheck(f64):
    rng = Rng(3)
    bott = Bottleneck(BottleneckConfig(patch_size=2, embed_dim=5, layers=2, heads=2, dim_head=3), 3,
                      (2, 2), rng)
    # the class token starts near zero, where layer norm is sharply curved: small step
    report = gradcheck(bott, [rng.normal((2, 3, 4, 4))], rng, n_coords=80, h=1e-5)
    assert report.max_rel_error <= 1e-5


def test_bottleneck_resampled_position_table(f64):
    rng = Rng(4)
    bott = Bottleneck(BottleneckConfig(embed_dim=5, layers=1, heads=2, dim_head=3), 3, (2, 3), rng)
    table = bott.position_table((4, 5))
    assert table.shape == (21, 5)
    np.testing.assert_array_equal(table[0], bott.pos_embed.data[0])
    assert bott(rng.normal((1, 3, 4, 5))).shape == (1, 3, 4, 5)
    report = gradcheck(bott, [rng.normal((1, 3, 4, 5))], rng, n_coords=60)
    assert any(n.startswith("pos_embed") for n in report.names)
    assert report.max_rel_error <= 1e-5


def test_bottleneck_rejects_wrong_channels():
    bott = Bottleneck(BottleneckConfig(embed_dim=4, layers=0), 4, (2, 2), Rng(0))
    with pytest.raises(DimensionError):
        bott(np.zeros((1, 3, 2, 2), np.float32))


def test_parameter_counts():
    cfg = BottleneckConfig(embed_dim=8, layers=2, heads=2, dim_head=3, patch_size=2)
    bott = Bottleneck(cfg, 3, (2, 3), Rng(0))
    assert bott.num_parameters() == param_count_bottleneck(cfg, 3, (2, 3))
    layer = TransformerLayer(8, Rng(0), heads=2, dim_head=3)
    assert layer.num_parameters() == transformer_layer_param_count(8, 2, 3)
