"""Loss, Adam, data augmentation and the epoch loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .data import LabeledSample, pad_to_multiple
from .errors import ConfigError, DataError, DimensionError
from .metrics import confusion, metrics
from .nn import Module, Parameter, no_grad
from .nn import functional as F
from .tensor import Rng

LOG_NAME = "train.log"
BEST_NAME = "best.lrsg"
LAST_NAME = "last.lrsg"


def lr_at(epoch: int, lr0: float = 1e-3, halve_every: int = 40) -> float:
    """Step schedule ``lr0 * 0.5 ** (epoch // halve_every)``."""
    return lr0 * 0.5 ** (epoch // halve_every)


def cross_entropy(logits, target) -> tuple[float, np.ndarray]:
    """Mean pixel cross-entropy and its gradient w.r.t. ``logits``.

    Accepts ``(K, H, W)`` with ``(H, W)`` or the batched ``(B, K, H, W)`` with ``(B, H, W)``.
    """
    target = np.asarray(target)
    k = logits.shape[-3]
    if target.size and (target.min() < 0 or target.max() >= k):
        bad = target[(target < 0) | (target >= k)].flat[0]
        raise DataError(f"target class {bad} outside [0, {k})")
    if logits.ndim == 3:
        loss, grad = F.cross_entropy(logits[None], target[None])
        return loss, grad[0]
    return F.cross_entropy(logits, target)


# -- optimiser -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params) -> OptimizerState:
    return OptimizerState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of the arrays in ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("parameter, gradient and state lists differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over a list of :class:`Parameter` objects."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = adam_init([p.data for p in self.params])

    def step(self, lr: float | None = None) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_p: float = 0.5
    rotate_p: float = 0.5
    max_angle: float = 20.0
    blur_p: float = 0.5
    median_size: int = 3
    motion_length: int = 5
    noise_p: float = 0.5
    noise_max_std: float = 0.02
    intensity_p: float = 0.5
    intensity_range: tuple[float, float] = (0.8, 1.2)


def hflip(sample: LabeledSample) -> LabeledSample:
    mask = None if sample.mask is None else sample.mask[:, ::-1].copy()
    return LabeledSample(sample.image[:, :, ::-1].copy(), mask, sample.name, sample.pad)


def rotation_geometry(angle_deg: float, shape) -> tuple[np.ndarray, np.ndarray]:
    """Output-to-input ``(matrix, offset)`` for a rotation about the image centre."""
    h, w = shape
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    return rot, centre - rot @ centre


def rotate(sample: LabeledSample, angle_deg: float) -> LabeledSample:
    """Bilinear on the image, nearest on the mask; exposed corners become 0 / background."""
    mat, off = rotation_geometry(angle_deg, sample.extent)
    image = np.stack([ndimage.affine_transform(ch, mat, off, order=1, mode="constant", cval=0.0)
                      for ch in sample.image]).astype(sample.image.dtype)
    mask = sample.mask
    if mask is not None:
        mask = ndimage.affine_transform(mask, mat, off, order=0, mode="constant", cval=0)
    return LabeledSample(image, mask, sample.name, sample.pad)


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    a = math.radians(angle_deg)
    for t in np.linspace(-c, c, 4 * length):
        r = int(round(c - t * math.sin(a)))
        q = int(round(c + t * math.cos(a)))
        k[r, q] = 1.0
    return k / k.sum()


def augment(sample: LabeledSample, rng: Rng, cfg: AugmentConfig = AugmentConfig()) -> LabeledSample:
    """Random flip, rotation, blur, noise and brightness/contrast.

    Geometric steps move image and mask together; photometric steps touch the
    image only. Scalar draws happen in a fixed order whether or not a step fires.
    """
    if not cfg.enabled:
        return sample
    out = sample
    if rng.random() < cfg.flip_p:
        out = hflip(out)
    do_rot, angle = rng.random() < cfg.rotate_p, rng.uniform(-cfg.max_angle, cfg.max_angle)
    if do_rot:
        out = rotate(out, angle)
    do_blur, use_median, blur_angle = rng.random() < cfg.blur_p, rng.random() < 0.5, rng.uniform(0.0, 180.0)
    img = out.image
    if do_blur:
        if use_median:
            img = ndimage.median_filter(img, size=(1, cfg.median_size, cfg.median_size), mode="reflect")
        else:
            kern = motion_kernel(cfg.motion_length, blur_angle)
            img = np.stack([ndimage.convolve(ch, kern, mode="reflect") for ch in img])
    do_noise, std = rng.random() < cfg.noise_p, rng.uniform(0.0, cfg.noise_max_std)
    noise = rng.normal(img.shape, std) if do_noise else None
    if noise is not None:
        img = img + noise
    do_int = rng.random() < cfg.intensity_p
    lo, hi = cfg.intensity_range
    brightness, contrast = rng.uniform(lo, hi), rng.uniform(lo, hi)
    if do_int:
        mean = img.mean()
        img = ((img - mean) * contrast + mean) * brightness
    img = np.clip(img, 0.0, 1.0).astype(sample.image.dtype)
    return LabeledSample(img, out.mask, out.name, out.pad)


# -- loop ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr0: float = 1e-3
    halve_every: int = 40
    epochs: int = 120
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr0 <= 0 or self.halve_every < 1:
            raise ConfigError("lr0 must be positive and halve_every at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")

    def lr(self, epoch: int) -> float:
        return lr_at(epoch, self.lr0, self.halve_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_miou: float

    def log_line(self) -> str:
        return f"epoch={self.epoch} lr={self.lr:.10g} loss={self.loss:.6f} val_miou={self.val_miou:.6f}"


def _batch(samples: list[LabeledSample], dtype) -> tuple[np.ndarray, np.ndarray]:
    extents = {s.extent for s in samples}
    if len(extents) != 1:
        raise DataError(f"a batch needs equal extents, got {sorted(extents)}")
    return (np.stack([s.image for s in samples]).astype(dtype, copy=False),
            np.stack([s.mask for s in samples]))


def predict_masks(model: Module, samples, batch_size: int = 4) -> list[np.ndarray]:
    """Eval-mode argmax predictions at each sample's original extents."""
    from .data import crop_back

    was_training = model.training
    model.eval()
    m = model.cfg.input_pad_to
    out = []
    try:
        with no_grad():
            for s in samples:
                p = pad_to_multiple(LabeledSample(s.image, None, s.name), m)
                logits = model(p.image[None])[0]
                out.append(np.argmax(crop_back(logits, p.pad), axis=0))
    finally:
        model.train(was_training)
    return out


def evaluate_miou(model: Module, samples) -> float:
    if not samples:
        return float("nan")
    k = model.cfg.num_classes
    cm = sum(confusion(p, s.mask, k) for p, s in zip(predict_masks(model, samples), samples))
    return metrics(cm).miou


def train_step(model: Module, opt: Adam, images, masks, lr: float) -> float:
    model.train()
    logits = model(images)
    loss, g = cross_entropy(logits, masks)
    opt.zero_grad()
    model.backward(g)
    opt.step(lr)
    return loss


def train_loop(model: Module, train: list[LabeledSample], cfg: TrainConfig,
               val: list[LabeledSample] | None = None, run_dir=None,
               on_epoch: Callable[[EpochRecord], None] | None = None,
               checkpoint_extra: dict | None = None) -> list[EpochRecord]:
    """Train ``model`` in place and return one record per epoch.

    Shuffling and augmentation draw from ``Rng(cfg.seed)``: epoch ``e`` shuffles
    with child ``(0, e)`` and augments sample ``i`` with child ``(1, e, i)``.
    With ``run_dir`` the log lines and the best / last checkpoints are written
    there, each checkpoint carrying ``checkpoint_extra`` in its header.
    """
    from .checkpoint import save_checkpoint

    if not train:
        raise ConfigError("training split is empty")
    m = model.cfg.input_pad_to
    train = [pad_to_multiple(s, m) for s in train]
    dtype = model.decoder.head.weight.data.dtype
    root = Rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr0, (cfg.beta1, cfg.beta2), cfg.eps)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / LOG_NAME).write_text("")
    history: list[EpochRecord] = []
    best = -math.inf
    steps = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        order = root.child(0, epoch).permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [augment(train[i], root.child(1, epoch, int(i)), cfg.augment) for i in idx]
            images, masks = _batch(batch, dtype)
            losses.append(train_step(model, opt, images, masks, lr))
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val_miou = evaluate_miou(model, val or [])
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), val_miou)
        history.append(rec)
        if run is not None:
            with open(run / LOG_NAME, "a") as fh:
                fh.write(rec.log_line() + "\n")
            extra = {**(checkpoint_extra or {}), "epoch": epoch,
                     "val_miou": None if math.isnan(val_miou) else val_miou}
            save_checkpoint(model, run / LAST_NAME, extra)
            # without a validation split "best" tracks the latest epoch
            if math.isnan(val_miou) or val_miou > best:
                best = -math.inf if math.isnan(val_miou) else val_miou
                save_checkpoint(model, run / BEST_NAME, extra)
        if on_epoch is not None:
            on_epoch(rec)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return history
