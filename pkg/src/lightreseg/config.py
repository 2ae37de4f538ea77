"""Architecture hyperparameters with pinned defaults."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError

#: (use_maa, transformer layers) per ablation variant
VARIANTS: dict[str, tuple[bool, int]] = {
    "base": (False, 0),
    "base_maa": (True, 0),
    "base_trans3": (False, 3),
    "base_maa_trans3": (True, 3),
    "base_maa_trans6": (True, 6),
}
CUSTOM = "custom"
MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _scaled(value: int, multiplier: float, floor: int = 1) -> int:
    """``round(value * multiplier)``, but never below ``min(value, floor)``."""
    return max(1, min(value, floor), int(round(value * multiplier)))


@dataclass(frozen=True)
class EncoderConfig:
    num_scales: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    use_ds_conv: bool = True
    block_depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.num_scales:
            raise ConfigError(f"{self.num_scales} scales need {self.num_scales} widths, got {self.channels}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"encoder widths must not decrease: {self.channels}")
        if self.channels[0] < 1 or self.block_depth < 1:
            raise ConfigError("encoder widths and block depth must be positive")

    @property
    def downsample(self) -> int:
        return 2 ** (self.num_scales - 1)


@dataclass(frozen=True)
class BottleneckConfig:
    patch_size: int = 1
    embed_dim: int = 160
    layers: int = 3
    heads: int = 8
    dim_head: int = 64
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.patch_size < 1 or self.embed_dim < 1 or self.layers < 0:
            raise ConfigError("invalid bottleneck configuration")
        if self.heads < 1 or self.dim_head < 1 or self.mlp_ratio < 1:
            raise ConfigError("invalid attention configuration")


@dataclass(frozen=True)
class ModelConfig:
    """Full network configuration.

    ``encoder`` and ``bottleneck`` hold the unscaled widths; the effective widths
    are multiplied by ``channel_multiplier`` but never drop below
    ``min_channels`` (see :meth:`effective_encoder`).
    ``image_size`` is the padded training resolution the position table is
    bound to.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    use_maa: bool = True
    variant: str = "base_maa_trans3"
    num_classes: int = 7
    channel_multiplier: float = 1.0
    min_channels: int = 16
    input_pad_to: int = 8
    image_size: tuple[int, int] = (304, 664)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.variant != CUSTOM:
            if self.variant not in VARIANTS:
                raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
            maa, layers = VARIANTS[self.variant]
            if maa != self.use_maa or layers != self.bottleneck.layers:
                raise ConfigError(
                    f"variant {self.variant} requires use_maa={maa}, layers={layers}; "
                    f"got use_maa={self.use_maa}, layers={self.bottleneck.layers}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.channel_multiplier <= 0:
            raise ConfigError("channel multiplier must be positive")
        if self.min_channels < 1:
            raise ConfigError("min_channels must be at least 1")
        step = self.encoder.downsample
        if self.input_pad_to % step:
            raise ConfigError(f"input_pad_to must be a multiple of {step}")
        if any(s % (step * self.bottleneck.patch_size) for s in self.image_size):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by {step * self.bottleneck.patch_size}")

    @classmethod
    def for_variant(cls, variant: str = "base_maa_trans3", **kwargs) -> "ModelConfig":
        """Config with ``use_maa`` and transformer depth set from the variant name."""
        maa, layers = VARIANTS[variant] if variant in VARIANTS else (None, None)
        if maa is None:
            raise ConfigError(f"unknown variant {variant!r}")
        bottleneck = kwargs.pop("bottleneck", BottleneckConfig())
        return cls(bottleneck=replace(bottleneck, layers=layers), use_maa=maa,
                   variant=variant, **kwargs)

    @property
    def use_transformer(self) -> bool:
        return self.bottleneck.layers > 0

    def effective_encoder(self) -> EncoderConfig:
        m, floor = self.channel_multiplier, self.min_channels
        return replace(self.encoder, channels=tuple(_scaled(c, m, floor) for c in self.encoder.channels))

    def effective_bottleneck(self) -> BottleneckConfig:
        d = _scaled(self.bottleneck.embed_dim, self.channel_multiplier, self.min_channels)
        return replace(self.bottleneck, embed_dim=d)

    def token_grid(self) -> tuple[int, int]:
        step = self.encoder.downsample * self.bottleneck.patch_size
        return self.image_size[0] // step, self.image_size[1] // step

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**{**d.pop("encoder", {})})
        bott = BottleneckConfig(**d.pop("bottleneck", {}))
        return cls(encoder=enc, bottleneck=bott, **d)
