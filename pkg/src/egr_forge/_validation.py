"""Input checks shared by the estimators and the functional API."""

import numpy as np


def check_image(img, name="img", min_size=1):
    """Return ``img`` as a float64 (H, W, C) array with C in {1, 3}.

    2-d input is treated as single-channel. Values must lie in [0, 1].
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"{name}: expected (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise ValueError(
            f"{name}: image must be at least {min_size}x{min_size}, got {img.shape[:2]}"
        )
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError(f"{name}: values must be finite and lie in [0, 1]")
    return img


def check_images(X, name="X", channels=None):
    """Return a float64 (N, H, W, C) stack; a single image gains a batch axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[3] not in (1, 3):
        raise ValueError(f"{name}: expected (N, H, W, 1|3) images, got shape {X.shape}")
    if channels is not None and X.shape[3] != channels:
        raise ValueError(f"{name}: expected {channels} channels, got {X.shape[3]}")
    if len(X) and (not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{name}: values must be finite and lie in [0, 1]")
    return X


def check_binary_labels(y, n=None, name="y"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name}: expected a 1-d label array, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise ValueError(f"{name}: expected {n} labels, got {len(y)}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name}: labels must be 0 or 1")
    return y.astype(np.int64)
