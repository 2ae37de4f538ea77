"""Input checks shared by the estimator, the CLI and the training loop."""
from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to a float ``(N, 3, H, W)`` batch.

    A single ``(3, H, W)`` image is promoted to a batch of one. Channel-last
    ``(N, H, W, 3)`` input is rejected rather than guessed at.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (N, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise DataError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.isfinite(X).all():
        raise DataError(f"{name} contains NaN or infinite values")
    return X


def check_masks(y, num_classes: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce to an int64 ``(N, H, W)`` label batch with values in ``[0, num_classes)``."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise DimensionError(f"{name} must have shape (N, H, W), got {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise DataError(f"{name} must hold integer class labels")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise DataError(f"{name} has negative labels")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise DataError(f"{name} has label {int(y.max())}, expected < {num_classes}")
    return y


def check_consistent(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] != y.shape[0]:
        raise DataError(f"{X.shape[0]} images but {y.shape[0]} masks")
    if X.shape[2:] != y.shape[1:]:
        raise DataError(f"image extents {X.shape[2:]} != mask extents {y.shape[1:]}")
