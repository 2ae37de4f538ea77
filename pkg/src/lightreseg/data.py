"""Palette-coded label masks, dataset I/O, padding and a synthetic retina generator.

On-disk layout::

    root/images/<stem>.png   8-bit RGB B-scan
    root/masks/<stem>.png    8-bit RGB, one palette colour per class
    root/split.txt           "<stem>.png <train|val|test>" per line
    root/palette.txt         "<name> R G B" per line, background first
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .tensor import Rng

SPLITS = ("train", "val", "test")

_LAYER_PALETTE = (
    ("background", (0, 0, 0)),
    ("NFL", (255, 0, 0)),
    ("GCL/IPL", (255, 255, 0)),
    ("INL/OPL", (0, 255, 0)),
    ("ONL", (0, 180, 255)),
    ("OS", (0, 0, 160)),
    ("RPE", (255, 105, 180)),
)
# extra colours for datasets with more than seven classes
_EXTRA_COLOURS = (
    (128, 0, 255), (255, 128, 0), (0, 128, 64), (128, 128, 128),
    (255, 255, 255), (128, 64, 0), (64, 0, 64), (0, 64, 128),
)


@dataclass(frozen=True)
class ClassPalette:
    names: tuple[str, ...]
    colours: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "colours", tuple(tuple(int(v) for v in c) for c in self.colours))
        if len(self.names) != len(self.colours):
            raise ConfigError("palette needs one colour per class name")
        if len(set(self.colours)) != len(self.colours):
            raise ConfigError("palette colours must be unique")
        if any(not 0 <= v <= 255 for c in self.colours for v in c):
            raise ConfigError("palette colours must be 8-bit RGB")

    @classmethod
    def default(cls, num_classes: int = 7) -> "ClassPalette":
        entries = list(_LAYER_PALETTE)
        for i, c in enumerate(_EXTRA_COLOURS):
            entries.append((f"class{len(_LAYER_PALETTE) + i}", c))
        if not 2 <= num_classes <= len(entries):
            raise ConfigError(f"default palette covers 2..{len(entries)} classes, got {num_classes}")
        names, colours = zip(*entries[:num_classes])
        return cls(names, colours)

    def __len__(self) -> int:
        return len(self.names)

    def to_text(self) -> str:
        return "".join(f"{n} {r} {g} {b}\n" for n, (r, g, b) in zip(self.names, self.colours))

    @classmethod
    def from_text(cls, text: str) -> "ClassPalette":
        names, colours = [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.rsplit(None, 3)
            if len(parts) != 4:
                raise DataError(f"palette line {lineno}: expected 'name R G B', got {line!r}")
            try:
                rgb = tuple(int(v) for v in parts[1:])
            except ValueError:
                raise DataError(f"palette line {lineno}: non-integer colour in {line!r}") from None
            names.append(parts[0])
            colours.append(rgb)
        return cls(tuple(names), tuple(colours))


def _pack(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def encode_mask(mask, palette: ClassPalette | None = None) -> np.ndarray:
    """``(H, W)`` class indices -> ``(H, W, 3)`` uint8 RGB."""
    palette = palette or ClassPalette.default()
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= len(palette)):
        raise DataError(f"mask labels outside [0, {len(palette)})")
    table = np.asarray(palette.colours, dtype=np.uint8)
    return table[mask.astype(np.intp)]


def decode_mask(rgb, palette: ClassPalette | None = None) -> np.ndarray:
    """Inverse of :func:`encode_mask`; every pixel must be an exact palette colour."""
    palette = palette or ClassPalette.default()
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise DataError(f"expected an (H, W, 3) RGB mask, got shape {rgb.shape}")
    keys = _pack(np.asarray(palette.colours))
    order = np.argsort(keys)
    packed = _pack(rgb)
    pos = np.clip(np.searchsorted(keys[order], packed), 0, len(keys) - 1)
    hit = keys[order][pos] == packed
    if not hit.all():
        r, c = np.argwhere(~hit)[0]
        raise DataError(f"off-palette colour {tuple(int(v) for v in rgb[r, c])} at pixel (row={r}, col={c})")
    return order[pos].astype(np.int64)


# -- samples and padding -----------------------------------------------------

@dataclass
class LabeledSample:
    """``image`` is ``(3, H, W)`` in [0, 1]; ``mask`` is ``(H, W)`` class indices.

    ``pad`` records ``(top, left, bottom, right)`` padding applied so far.
    """

    image: np.ndarray
    mask: np.ndarray | None
    name: str = ""
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.name or 'sample'}: image must be (3, H, W), got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise DataError(f"{self.name or 'sample'}: image extents {self.image.shape[1:]} "
                            f"!= mask extents {self.mask.shape}")

    @property
    def extent(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def pad_amounts(h: int, w: int, m: int = 8) -> tuple[int, int, int, int]:
    if m < 1:
        raise ConfigError("pad multiple must be at least 1")
    ph, pw = -h % m, -w % m
    return ph // 2, pw // 2, ph - ph // 2, pw - pw // 2


def pad_image(image: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    top, left, bottom, right = pad
    if not any(pad):
        return image
    h, w = image.shape[-2:]
    mode = "reflect" if max(top, bottom) < h and max(left, right) < w else "symmetric"
    widths = [(0, 0)] * (image.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(image, widths, mode=mode)


def pad_to_multiple(sample: LabeledSample, m: int = 8) -> LabeledSample:
    """Reflect-pad the image and background-pad the mask up to multiples of ``m``."""
    pad = pad_amounts(*sample.extent, m)
    top, left, bottom, right = pad
    image = pad_image(sample.image, pad)
    mask = sample.mask
    if mask is not None and any(pad):
        mask = np.pad(mask, ((top, bottom), (left, right)), constant_values=0)
    total = tuple(a + b for a, b in zip(sample.pad, pad))
    return LabeledSample(image, mask, sample.name, total)


def crop_back(arr: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    """Undo :func:`pad_to_multiple` on the last two axes."""
    top, left, bottom, right = pad
    h, w = arr.shape[-2:]
    return arr[..., top:h - bottom, left:w - right]


# -- I/O -------------------------------------------------------------------

def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def write_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def image_to_array(rgb: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float32 in [0, 1]."""
    return (np.transpose(rgb, (2, 0, 1)).astype(np.float32) / np.float32(255.0))


def array_to_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)


def read_manifest(path) -> list[tuple[str, str]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise DataError(f"{path}:{lineno}: expected '<file> <train|val|test>', got {line!r}")
        entries.append((parts[0], parts[1]))
    return entries


def load_palette(root) -> ClassPalette:
    path = Path(root) / "palette.txt"
    if not path.exists():
        return ClassPalette.default()
    return ClassPalette.from_text(path.read_text())


def load_split(root, splits=SPLITS, palette: ClassPalette | None = None) -> dict[str, list[LabeledSample]]:
    """Read the samples tagged with each of ``splits`` in ``root/split.txt``.

    Each split is ordered lexicographically by file name.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    if not any(root.iterdir()):
        raise ConfigError(f"dataset root is empty: {root}")
    manifest = root / "split.txt"
    if not manifest.exists():
        raise DataError(f"missing split manifest: {manifest}")
    palette = palette or load_palette(root)
    wanted = set(splits)
    out: dict[str, list[LabeledSample]] = {s: [] for s in splits}
    for fname, tag in sorted(read_manifest(manifest)):
        if tag not in wanted:
            continue
        img_path = root / "images" / fname
        mask_path = root / "masks" / fname
        if not img_path.exists():
            raise DataError(f"image listed in manifest is missing: {img_path}")
        if not mask_path.exists():
            raise DataError(f"no mask for image {fname}: expected {mask_path}")
        rgb = read_rgb(img_path)
        mask_rgb = read_rgb(mask_path)
        if rgb.shape != mask_rgb.shape:
            raise DataError(f"{fname}: image extents {rgb.shape[:2]} != mask extents {mask_rgb.shape[:2]}")
        try:
            mask = decode_mask(mask_rgb, palette)
        except DataError as exc:
            raise DataError(f"{mask_path}: {exc}") from None
        out[tag].append(LabeledSample(image_to_array(rgb), mask, Path(fname).stem))
    return out


def write_dataset(root, samples: list[LabeledSample], tags: list[str],
                  palette: ClassPalette | None = None) -> None:
    """Write ``samples`` in the on-disk layout with the given split tags."""
    palette = palette or ClassPalette.default()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s, tag in zip(samples, tags, strict=True):
        fname = f"{s.name}.png"
        write_rgb(root / "images" / fname, array_to_image(s.image))
        write_rgb(root / "masks" / fname, encode_mask(s.mask, palette))
        lines.append(f"{fname} {tag}\n")
    (root / "split.txt").write_text("".join(lines))
    (root / "palette.txt").write_text(palette.to_text())


# -- synthetic retina ----------------------------------------------------------

_DEFAULT_BANDS = (
    (0.050, 0.070),  # NFL
    (0.025, 0.035),  # GCL/IPL
    (0.035, 0.045),  # INL/OPL
    (0.050, 0.065),  # ONL
    (0.015, 0.025),  # OS
    (0.030, 0.040),  # RPE
)
# mean reflectivity: background, then the layers top to bottom
_DEFAULT_INTENSITY = (0.08, 0.85, 0.55, 0.35, 0.22, 0.75, 0.95)


@dataclass(frozen=True)
class SyntheticConfig:
    """Stacked wavy bands on a dark background.

    ``band_fractions`` are per-layer thickness ranges as fractions of the image
    height. They are rescaled jointly so the expected layer coverage equals
    ``1 - background_fraction``. ``waviness`` is the boundary amplitude as a
    fraction of height and ``frequency`` the number of cycles across the width.
    ``speckle`` is the coefficient of variation of the multiplicative noise.
    """

    height: int = 300
    width: int = 660
    num_images: int = 105
    split_sizes: tuple[int, int, int] = (75, 15, 15)
    band_fractions: tuple[tuple[float, float], ...] = _DEFAULT_BANDS
    intensities: tuple[float, ...] = _DEFAULT_INTENSITY
    background_fraction: float = 0.75
    waviness: float = 0.03
    frequency: float = 1.5
    thickness_jitter: float = 0.15
    speckle: float = 0.25
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.band_fractions) + 1

    def scale(self) -> float:
        mid = sum((lo + hi) / 2 for lo, hi in self.band_fractions)
        return (1.0 - self.background_fraction) / mid

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("synthetic images must be at least 8x8")
        if not self.band_fractions:
            raise ConfigError("need at least one band")
        if any(lo <= 0 or hi < lo for lo, hi in self.band_fractions):
            raise ConfigError(f"band thickness ranges must satisfy 0 < lo <= hi: {self.band_fractions}")
        if not 0 < self.background_fraction < 1:
            raise ConfigError("background_fraction must lie in (0, 1)")
        if len(self.intensities) != self.num_classes:
            raise ConfigError(f"need {self.num_classes} intensities, got {len(self.intensities)}")
        if not 0 <= self.thickness_jitter < 1:
            raise ConfigError("thickness_jitter must lie in [0, 1)")
        if sum(self.split_sizes) != self.num_images or any(s < 0 for s in self.split_sizes):
            raise ConfigError(f"split sizes {self.split_sizes} do not add up to {self.num_images}")
        stack = self.scale() * sum(hi for _, hi in self.band_fractions) * (1 + self.thickness_jitter)
        if stack + 2 * self.waviness > 0.9:
            raise ConfigError(
                f"band stack ({stack:.3f} of height) plus waviness does not fit inside the image")
        if self.scale() * min(lo for lo, _ in self.band_fractions) * (1 - self.thickness_jitter) * self.height < 1:
            raise ConfigError("thinnest band would be under one pixel tall")

    def split_tags(self) -> list[str]:
        return [tag for tag, n in zip(SPLITS, self.split_sizes) for _ in range(n)]


def _boundaries(cfg: SyntheticConfig, rng: Rng) -> np.ndarray:
    """``(n_bands + 1, W)`` boundary rows (real-valued), strictly increasing down each column."""
    h, w = cfg.height, cfg.width
    x = np.arange(w) / w
    s = cfg.scale()
    thick = np.array([rng.uniform(lo, hi) for lo, hi in cfg.band_fractions]) * s * h
    stack = thick.sum() * (1 + cfg.thickness_jitter)
    amp = cfg.waviness * h
    margin = 0.05 * h
    top_lo = margin + amp
    top_hi = max(top_lo, h - margin - amp - stack)
    top = rng.uniform(top_lo, top_hi)
    phase = rng.uniform(0, 2 * np.pi)
    curve = top + amp * np.sin(2 * np.pi * cfg.frequency * x + phase)
    rows = [curve]
    for t in thick:
        ph = rng.uniform(0, 2 * np.pi)
        local = t * (1 + cfg.thickness_jitter * np.sin(2 * np.pi * 2 * cfg.frequency * x + ph))
        rows.append(rows[-1] + local)
    return np.stack(rows)


def synth_sample(cfg: SyntheticConfig, rng: Rng, name: str = "") -> LabeledSample:
    bounds = _boundaries(cfg, rng)
    centres = np.arange(cfg.height)[:, None] + 0.5
    # layer index = number of boundaries above the pixel centre, 0 and n+1 are background
    layer = (centres[None] >= bounds[:, None, :]).sum(axis=0)
    n = len(cfg.band_fractions)
    mask = np.where(layer > n, 0, layer).astype(np.int64)
    base = np.asarray(cfg.intensities)[mask]
    noise = rng.normal(size=mask.shape) * cfg.speckle
    speckle = np.clip(1.0 + noise, 0.0, None)
    img = np.clip(base * speckle, 0.0, 1.0)
    image = np.broadcast_to(img, (3,) + img.shape).astype(np.float32)
    image = np.round(image * 255.0) / 255.0
    return LabeledSample(np.ascontiguousarray(image, dtype=np.float32), mask, name)


def generate_synthetic(cfg: SyntheticConfig | None = None) -> list[LabeledSample]:
    """Deterministic list of ``cfg.num_images`` samples; sample ``i`` uses rng child ``i``."""
    cfg = cfg or SyntheticConfig()
    cfg.validate()
    root = Rng(cfg.seed)
    width = max(3, len(str(cfg.num_images - 1)))
    return [synth_sample(cfg, root.child(i), f"synth_{i:0{width}d}") for i in range(cfg.num_images)]


def write_synthetic(root, cfg: SyntheticConfig | None = None) -> list[LabeledSample]:
    cfg = cfg or SyntheticConfig()
    samples = generate_synthetic(cfg)
    write_dataset(root, samples, cfg.split_tags(), ClassPalette.default(cfg.num_classes))
    return samples


def background_fraction(samples) -> float:
    total = sum(s.mask.size for s in samples)
    return float(sum(int((s.mask == 0).sum()) for s in samples) / total)


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))
