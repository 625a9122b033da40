"""Sobel edge graphs.

The gradient images are 3x3 cross-correlations (no kernel flip) of the
grayscale intensity with replicate border padding::

    M_x = [[-1, 0, 1],        M_y = [[-1, -2, -1],
           [-2, 0, 2],               [ 0,  0,  0],
           [-1, 0, 1]]               [ 1,  2,  1]]

An edge graph is the gradient magnitude ``sqrt(G_x**2 + G_y**2)`` scaled by
its maximum, or that normalized map thresholded to {0, 1}.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_images

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])

LUMA = np.array([0.299, 0.587, 0.114])

EDGE_MODES = ("magnitude", "binary")


class EdgeConfigError(ValueError):
    pass


@dataclass
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray
    direction: np.ndarray


@dataclass
class EdgeGraph:
    values: np.ndarray
    mode: str = "magnitude"
    threshold: float | None = None


def to_grayscale(img):
    """Luma of an (H, W, 3) image as (H, W, 1); single-channel input passes through."""
    img = check_image(img)
    if img.shape[2] == 1:
        return img
    gray = img[:, :, 0] * LUMA[0] + img[:, :, 1] * LUMA[1] + img[:, :, 2] * LUMA[2]
    return np.clip(gray, 0.0, 1.0)[:, :, None]


def convolve2d(img, kernel):
    """3x3 cross-correlation of a single-channel image, replicate borders.

    Accepts (H, W) or (H, W, 1); returns (H, W). Computed as
    ``sum_ij k_ij * (p_ij - p_center) + sum(k) * p_center`` so a zero-sum
    kernel gives exactly zero on flat regions.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError(f"convolve2d needs a single-channel image, got {img.shape}")
        img = img[:, :, 0]
    kernel = np.asarray(kernel, dtype=np.float64).reshape(3, 3)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            if kernel[i, j] != 0 and (i, j) != (1, 1):
                out += kernel[i, j] * (padded[i : i + h, j : j + w] - img)
    total = kernel.sum()
    if total != 0:
        out += total * img
    return out


def gradient_field(img):
    gray = to_grayscale(check_image(img, min_size=3))
    gx = convolve2d(gray, SOBEL_X)
    gy = convolve2d(gray, SOBEL_Y)
    direction = np.arctan2(gy, gx)
    direction[direction <= -np.pi] = np.pi
    return GradientField(gx, gy, np.sqrt(gx * gx + gy * gy), direction)


def _check_mode(mode, threshold):
    if mode not in EDGE_MODES:
        raise EdgeConfigError(f"edge mode must be one of {EDGE_MODES}, got {mode!r}")
    if mode == "binary":
        if threshold is None:
            raise EdgeConfigError("binary edge mode requires a threshold")
        if not 0.0 < threshold <= 1.0:
            raise EdgeConfigError(f"threshold must lie in (0, 1], got {threshold}")
    elif threshold is not None:
        raise EdgeConfigError("threshold is only meaningful in binary mode")


def normalize_magnitude(magnitude, mode="magnitude", threshold=None):
    peak = magnitude.max()
    values = magnitude / peak if peak > 0 else np.zeros_like(magnitude)
    if mode == "binary":
        values = (values > threshold).astype(np.float64)
    return values


def edge_graph(img, mode="magnitude", threshold=None):
    """Edge graph of an (H, W, C) image; see the module docstring."""
    _check_mode(mode, threshold)
    field = gradient_field(img)
    return EdgeGraph(normalize_magnitude(field.magnitude, mode, threshold), mode, threshold)


class EdgeGraphTransformer(TransformerMixin, BaseEstimator):
    """Map an image stack (N, H, W, C) to edge graphs (N, H, W, n_channels).

    Parameters
    ----------
    mode : {"magnitude", "binary"}, default="magnitude"
        Normalized gradient magnitude, or that map thresholded to {0, 1}.
    threshold : float or None, default=None
        Required in binary mode, in (0, 1].
    n_channels : int, default=3
        The single-channel edge graph is replicated this many times so it
        can be scored by a detector expecting RGB input.
    """

    def __init__(self, mode="magnitude", threshold=None, n_channels=3):
        self.mode = mode
        self.threshold = threshold
        self.n_channels = n_channels

    def fit(self, X, y=None):
        _check_mode(self.mode, self.threshold)
        check_images(X)
        return self

    def transform(self, X):
        _check_mode(self.mode, self.threshold)
        X = check_images(X)
        out = np.empty(X.shape[:3] + (self.n_channels,))
        for i, img in enumerate(X):
            values = edge_graph(img, self.mode, self.threshold).values
            out[i] = values[:, :, None]
        return out


class EdgeCache:
    """On-disk cache of edge graphs keyed by image content and edge settings."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def key(self, img, mode, threshold):
        img = np.ascontiguousarray(img, dtype=np.float64)
        h = hashlib.sha256(img.tobytes())
        h.update(repr((img.shape, mode, threshold)).encode())
        return h.hexdigest()

    def get(self, img, mode="magnitude", threshold=None):
        path = self.directory / f"{self.key(img, mode, threshold)}.npy"
        if path.exists():
            return np.load(path)
        values = edge_graph(img, mode, threshold).values
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, values)
        tmp.replace(path)
        return values

    def transform(self, X, mode="magnitude", threshold=None, n_channels=3):
        X = check_images(X)
        out = np.empty(X.shape[:3] + (n_channels,))
        for i, img in enumerate(X):
            out[i] = self.get(img, mode, threshold)[:, :, None]
        return out
