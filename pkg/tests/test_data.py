import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lightreseg.data import (SPLITS, ClassPalette, LabeledSample, SyntheticConfig, background_fraction,
                             crop_back, decode_mask, encode_mask, generate_synthetic, image_to_array,
                             array_to_image, load_split, pad_amounts, pad_to_multiple, read_rgb,
                             write_dataset, write_rgb, write_synthetic)
from lightreseg.errors import ConfigError, DataError
from lightreseg.tensor import Rng


@given(st.integers(2, 15), st.integers(1, 12), st.integers(1, 12), st.integers(0, 10**6))
def test_palette_codec_bijective(k, h, w, seed):
    pal = ClassPalette.default(k)
    mask = Rng(seed).integers(0, k, (h, w))
    rgb = encode_mask(mask, pal)
    assert rgb.dtype == np.uint8 and rgb.shape == (h, w, 3)
    np.testing.assert_array_equal(decode_mask(rgb, pal), mask)


def test_palette_rejects_off_palette_pixels():
    rgb = encode_mask(np.zeros((3, 4), int))
    rgb[1, 2] = (1, 2, 3)
    with pytest.raises(DataError, match=r"\(1, 2, 3\) at pixel \(row=1, col=2\)"):
        decode_mask(rgb)
    with pytest.raises(DataError):
        encode_mask(np.array([[7]]))


def test_palette_text_roundtrip_and_validation():
    pal = ClassPalette.default(9)
    assert ClassPalette.from_text(pal.to_text()) == pal
    assert len(set(pal.colours)) == 9
    with pytest.raises(ConfigError):
        ClassPalette(("a", "b"), ((0, 0, 0), (0, 0, 0)))
    with pytest.raises(ConfigError):
        ClassPalette.default(1)
    with pytest.raises(DataError):
        ClassPalette.from_text("bg 0 0\n")


@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([1, 4, 8, 16]))
def test_pad_then_crop_is_identity(h, w, m):
    img = Rng(h * 41 + w).normal((3, h, w))
    sample = pad_to_multiple(LabeledSample(img, np.ones((h, w), int)), m)
    ph, pw = sample.extent
    assert ph % m == 0 and pw % m == 0 and ph - h < m and pw - w < m
    np.testing.assert_array_equal(crop_back(sample.image, sample.pad), img)
    np.testing.assert_array_equal(crop_back(sample.mask, sample.pad), 1)
    logits = np.zeros((7, ph, pw))
    assert crop_back(logits, sample.pad).shape == (7, h, w)


def test_pad_amounts_dataset_extents():
    assert pad_amounts(300, 660) == (2, 2, 2, 2)
    assert pad_amounts(496, 768) == (0, 0, 0, 0)
    assert pad_amounts(1, 1, 8) == (3, 3, 4, 4)


def test_sample_validation():
    with pytest.raises(DataError):
        LabeledSample(np.zeros((3, 4, 4)), np.zeros((4, 5), int))
    with pytest.raises(DataError):
        LabeledSample(np.zeros((1, 4, 4)), None)


def test_image_conversion_roundtrip(tmp_path):
    rgb = Rng(0).integers(0, 256, (5, 6, 3)).astype(np.uint8)
    np.testing.assert_array_equal(array_to_image(image_to_array(rgb)), rgb)
    write_rgb(tmp_path / "x.png", rgb)
    np.testing.assert_array_equal(read_rgb(tmp_path / "x.png"), rgb)
    (tmp_path / "bad.png").write_text("nope")
    with pytest.raises(DataError):
        read_rgb(tmp_path / "bad.png")


SMALL = SyntheticConfig(height=96, width=160, num_images=6, split_sizes=(3, 2, 1), seed=4)


def test_synthetic_is_deterministic_and_well_formed():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    assert [s.name for s in a] == [f"synth_{i:03d}" for i in range(6)]
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
        assert x.image.shape == (3, 96, 160) and x.image.dtype == np.float32
        assert 0.0 <= x.image.min() and x.image.max() <= 1.0
        assert set(np.unique(x.mask)) == set(range(7))
    c = generate_synthetic(SyntheticConfig(**{**SMALL.__dict__, "seed": 5}))
    assert not np.array_equal(a[0].mask, c[0].mask)


def test_synthetic_layers_are_ordered_top_to_bottom():
    s = generate_synthetic(SMALL)[0]
    for col in s.mask.T:
        labels = col[col > 0]
        assert np.all(np.diff(labels) >= 0)
        assert col[0] == 0 and col[-1] == 0


def test_default_background_fraction_near_target():
    cfg = SyntheticConfig(num_images=10, split_sizes=(10, 0, 0))
    assert abs(background_fraction(generate_synthetic(cfg)) - 0.7506) <= 0.05


@pytest.mark.parametrize("change", [
    {"height": 20, "width": 20},
    {"split_sizes": (1, 1, 1)},
    {"background_fraction": 1.2},
    {"band_fractions": ((0.5, 0.6), (0.4, 0.5))},
    {"intensities": (0.1, 0.2)},
])
def test_synthetic_config_validation(change):
    with pytest.raises(ConfigError):
        SyntheticConfig(**{**SMALL.__dict__, **change}).validate()


def test_dataset_roundtrip_and_split_filter(tmp_path):
    samples = write_synthetic(tmp_path / "ds", SMALL)
    loaded = load_split(tmp_path / "ds")
    assert [len(loaded[s]) for s in SPLITS] == [3, 2, 1]
    by_name = {s.name: s for s in samples}
    for s in loaded["val"]:
        ref = by_name[s.name]
        np.testing.assert_array_equal(s.mask, ref.mask)
        np.testing.assert_array_equal(s.image, ref.image)
    only_test = load_split(tmp_path / "ds", ("test",))
    assert list(only_test) == ["test"] and [s.name for s in only_test["test"]] == ["synth_005"]


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_split(tmp_path / "absent")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError):
        load_split(tmp_path / "empty")
    root = tmp_path / "ds"
    write_dataset(root, generate_synthetic(SMALL)[:2], ["train", "test"])
    (root / "masks" / "synth_001.png").unlink()
    with pytest.raises(DataError, match="no mask"):
        load_split(root)
    (root / "split.txt").write_text("synth_000.png holdout\n")
    with pytest.raises(DataError, match="split.txt:1"):
        load_split(root)
