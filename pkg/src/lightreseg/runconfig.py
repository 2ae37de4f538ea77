"""INI run configuration: defaults < file < ``--key value`` overrides.

Sections and keys::

    [run]    seed, out
    [data]   root
    [model]  variant, channel_multiplier, min_channels, num_classes, image_size
    [train]  lr0, halve_every, epochs, batch_size, max_steps, augment, dtype
    [synth]  height, width, num_images, split_sizes, background_fraction,
             waviness, frequency, thickness_jitter, speckle

``num_classes`` and ``image_size`` default to ``auto`` (taken from the dataset).
An override is ``--section.key value`` or ``--key value`` when the key names a
single section. ``seed`` is the only source of randomness.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

from .config import VARIANTS, ModelConfig
from .data import SyntheticConfig
from .errors import ConfigError
from .training import AugmentConfig, TrainConfig

AUTO = "auto"

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "out": "runs/default"},
    "data": {"root": "data"},
    "model": {"variant": "base_maa_trans3", "channel_multiplier": "1.0", "min_channels": "16",
              "num_classes": AUTO, "image_size": AUTO},
    "train": {"lr0": "0.001", "halve_every": "40", "epochs": "120", "batch_size": "4",
              "max_steps": "none", "augment": "true", "dtype": "float32"},
    "synth": {"height": "300", "width": "660", "num_images": "105", "split_sizes": "75,15,15",
              "background_fraction": "0.75", "waviness": "0.03", "frequency": "1.5",
              "thickness_jitter": "0.15", "speckle": "0.25"},
}


def _key_index() -> dict[str, list[str]]:
    idx: dict[str, list[str]] = {}
    for section, keys in DEFAULTS.items():
        for key in keys:
            idx.setdefault(key, []).append(section)
    return idx


def parse_overrides(tokens: list[str]) -> dict[tuple[str, str], str]:
    """``["--variant", "base", "--train.epochs", "3"]`` -> ``{("model", "variant"): "base", ...}``."""
    index = _key_index()
    out: dict[tuple[str, str], str] = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        name = tok[2:].replace("-", "_")
        if "=" in name:
            name, value = name.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"override {tok} needs a value") from None
        if "." in name:
            section, key = name.split(".", 1)
            if key not in DEFAULTS.get(section, {}):
                raise ConfigError(f"unknown config key {name!r}")
        else:
            sections = index.get(name, [])
            if len(sections) != 1:
                raise ConfigError(f"unknown config key {name!r}" if not sections
                                  else f"key {name!r} is ambiguous; use one of "
                                       + ", ".join(f"--{s}.{name}" for s in sections))
            section, key = sections[0], name
        out[(section, key)] = value
    return out


def load(path=None, overrides: dict[tuple[str, str], str] | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        file_cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                file_cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in file_cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in file_cp.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                cp.set(section, key, value)
    for (section, key), value in (overrides or {}).items():
        cp.set(section, key, value)
    return cp


def dump(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _get(cp, section, key, conv, what):
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {what}") from None


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())


def _opt_int(raw: str):
    return None if raw.strip().lower() in ("none", "") else int(raw)


def seed(cp) -> int:
    return _get(cp, "run", "seed", int, "integer")


def min_channels(cp) -> int:
    return _get(cp, "model", "min_channels", int, "integer")


def channel_multiplier(cp) -> float:
    return _get(cp, "model", "channel_multiplier", float, "number")


def num_classes(cp) -> int | None:
    raw = cp.get("model", "num_classes").strip().lower()
    return None if raw == AUTO else _get(cp, "model", "num_classes", int, "integer")


def image_size(cp) -> tuple[int, int] | None:
    raw = cp.get("model", "image_size").strip().lower()
    if raw == AUTO:
        return None
    size = _get(cp, "model", "image_size", _ints, "pair of integers")
    if len(size) != 2:
        raise ConfigError(f"[model] image_size needs two integers, got {raw!r}")
    return size


def model_config(cp, num_classes_: int, image_size_: tuple[int, int]) -> ModelConfig:
    variant = cp.get("model", "variant").strip()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return ModelConfig.for_variant(
        variant,
        channel_multiplier=channel_multiplier(cp),
        min_channels=min_channels(cp),
        num_classes=num_classes_,
        image_size=image_size_,
    )


def train_config(cp) -> TrainConfig:
    return TrainConfig(
        lr0=_get(cp, "train", "lr0", float, "number"),
        halve_every=_get(cp, "train", "halve_every", int, "integer"),
        epochs=_get(cp, "train", "epochs", int, "integer"),
        batch_size=_get(cp, "train", "batch_size", int, "integer"),
        seed=seed(cp),
        max_steps=_get(cp, "train", "max_steps", _opt_int, "integer or 'none'"),
        augment=AugmentConfig(enabled=_get(cp, "train", "augment", _bool, "boolean")),
    )


def dtype(cp) -> str:
    name = cp.get("train", "dtype").strip()
    if name not in ("float32", "float64"):
        raise ConfigError(f"[train] dtype must be float32 or float64, got {name!r}")
    return name


def synth_config(cp) -> SyntheticConfig:
    splits = _get(cp, "synth", "split_sizes", _ints, "list of three integers")
    if len(splits) != 3:
        raise ConfigError("[synth] split_sizes needs three integers (train,val,test)")
    return SyntheticConfig(
        height=_get(cp, "synth", "height", int, "integer"),
        width=_get(cp, "synth", "width", int, "integer"),
        num_images=_get(cp, "synth", "num_images", int, "integer"),
        split_sizes=splits,
        background_fraction=_get(cp, "synth", "background_fraction", float, "number"),
        waviness=_get(cp, "synth", "waviness", float, "number"),
        frequency=_get(cp, "synth", "frequency", float, "number"),
        thickness_jitter=_get(cp, "synth", "thickness_jitter", float, "number"),
        speckle=_get(cp, "synth", "speckle", float, "number"),
        seed=seed(cp),
    )


@dataclass
class Resolved:
    """Everything a run needs, with ``auto`` values filled in from the dataset."""

    parser: configparser.ConfigParser
    model: ModelConfig
    train: TrainConfig
    dtype: str

    def echo(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict({s: dict(self.parser.items(s)) for s in self.parser.sections()})
        cp.set("model", "num_classes", str(self.model.num_classes))
        cp.set("model", "image_size", f"{self.model.image_size[0]},{self.model.image_size[1]}")
        return dump(cp)
