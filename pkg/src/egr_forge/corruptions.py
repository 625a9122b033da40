"""Post-processing corruptions for robustness evaluation: Gaussian noise,
Gaussian blur, median blur and JPEG compression."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import median_filter
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_images
from .manifest import decode_image, encode_jpeg
from .nn import make_rng

KINDS = ("GN", "GB", "MB", "JPEG")

DEFAULTS = {
    "GN": {"sigma": 0.05},
    "GB": {"radius": 2, "sigma": 1.0},
    "MB": {"radius": 2},
    "JPEG": {"quality": 60},
}


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption setting; unset fields take the per-kind defaults."""

    kind: str
    sigma: float | None = None
    radius: int | None = None
    quality: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CorruptionError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for key, value in DEFAULTS[self.kind].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.sigma is not None and self.sigma < 0:
            raise CorruptionError(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "GB" and not self.sigma > 0:
            raise CorruptionError("Gaussian blur needs sigma > 0")
        if self.radius is not None and (int(self.radius) != self.radius or self.radius < 1):
            raise CorruptionError(f"radius must be an integer >= 1, got {self.radius}")
        if self.quality is not None and not (1 <= int(self.quality) <= 100):
            raise CorruptionError(f"quality must be in [1, 100], got {self.quality}")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"kind", "sigma", "radius", "quality"}
        if unknown:
            raise CorruptionError(f"unknown corruption keys: {sorted(unknown)}")
        return cls(**data)


def gaussian_noise(img, sigma, seed=0):
    """Add i.i.d. N(0, sigma^2) noise and clamp to [0, 1]."""
    img = check_image(img)
    if sigma < 0:
        raise CorruptionError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noise = make_rng(seed).normal(0.0, sigma, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def gaussian_kernel1d(radius, sigma):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img, kernel, axis):
    # out = x + sum_k w_k (x_shift_k - x); equals sum_k w_k x_shift_k since
    # sum(w) == 1, and leaves constant regions bit-identical
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = img.copy()
    for k, weight in enumerate(kernel):
        shifted = np.take(padded, np.arange(k, k + n), axis=axis)
        out += weight * (shifted - img)
    return out


def gaussian_blur(img, radius=2, sigma=1.0):
    """Separable (2*radius+1)-tap Gaussian blur, replicate borders, per channel."""
    img = check_image(img)
    if radius < 1 or not sigma > 0:
        raise CorruptionError("Gaussian blur needs radius >= 1 and sigma > 0")
    kernel = gaussian_kernel1d(int(radius), float(sigma))
    out = _blur_axis(_blur_axis(img, kernel, 0), kernel, 1)
    return np.clip(out, 0.0, 1.0)


def median_blur(img, radius=2):
    """Per-channel median over a (2*radius+1)^2 replicate-padded window."""
    img = check_image(img)
    if radius < 1:
        raise CorruptionError(f"radius must be >= 1, got {radius}")
    size = 2 * int(radius) + 1
    return median_filter(img, size=(size, size, 1), mode="nearest")


def jpeg_roundtrip(img, quality=60):
    """Encode to baseline JPEG at ``quality`` and decode back."""
    img = check_image(img)
    if not 1 <= int(quality) <= 100:
        raise CorruptionError(f"quality must be in [1, 100], got {quality}")
    try:
        return decode_image(encode_jpeg(img, int(quality)))
    except (OSError, ValueError) as exc:
        raise CorruptionError(f"JPEG round trip failed: {exc}") from exc


def apply_corruption(img, spec, seed=0):
    if spec.kind == "GN":
        return gaussian_noise(img, spec.sigma, seed)
    if spec.kind == "GB":
        return gaussian_blur(img, spec.radius, spec.sigma)
    if spec.kind == "MB":
        return median_blur(img, spec.radius)
    return jpeg_roundtrip(img, spec.quality)


def sample_seed(base_seed, index):
    """Per-image seed, independent of how images are scheduled."""
    return int(base_seed) ^ int(index)


class Corruption(TransformerMixin, BaseEstimator):
    """Apply one corruption to every image of an (N, H, W, C) stack.

    Image ``i`` uses noise seed ``seed ^ i`` so results do not depend on
    batching or worker scheduling.
    """

    def __init__(self, kind="GN", sigma=None, radius=None, quality=None, seed=0):
        self.kind = kind
        self.sigma = sigma
        self.radius = radius
        self.quality = quality
        self.seed = seed

    def _spec(self):
        return CorruptionSpec(self.kind, self.sigma, self.radius, self.quality)

    def fit(self, X, y=None):
        self._spec()
        return self

    def transform(self, X):
        spec = self._spec()
        X = check_images(X)
        return np.stack(
            [apply_corruption(img, spec, sample_seed(self.seed, i)) for i, img in enumerate(X)]
        ) if len(X) else X.copy()
