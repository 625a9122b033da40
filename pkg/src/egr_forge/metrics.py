"""Evaluation metrics: ROC/AUC, accuracy, PSNR and Frechet distance / FID."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._validation import check_images


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}, got {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-8:
            raise ValueError("covariance must be positive semidefinite")


def _scores_labels(scores, labels):
    if labels is None:
        pairs = np.asarray(scores, dtype=np.float64)
        scores, labels = pairs[:, 0], pairs[:, 1]
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def auc(scores, labels=None):
    """Area under the ROC curve as the Mann-Whitney statistic.

    ``P(score_pos > score_neg) + 0.5 * P(tie)``, computed from average ranks.
    Either pass ``scores`` and ``labels``, or a sequence of (score, label)
    pairs as ``scores``.
    """
    scores, pos = _scores_labels(scores, labels)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels=None):
    """ROC points from sweeping the threshold over the distinct scores.

    Starts at (0, 0) and ends at (1, 1); the area is the trapezoid integral.
    """
    scores, pos = _scores_labels(scores, labels)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    tp = np.cumsum(pos[order])
    fp = np.cumsum(~pos[order])
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, area)


def accuracy(scores, labels=None, threshold=0.5):
    scores, pos = _scores_labels(scores, labels)
    if len(scores) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean((scores >= threshold) == pos))


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    return psnr_from_mse(mse, peak)


def psnr_from_mse(mse, peak=1.0):
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _sqrtm_psd(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(g1, g2):
    """Frechet distance between two Gaussians.

    ``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``; matrix square
    roots come from symmetric eigendecompositions with negative eigenvalues
    clamped to zero.
    """
    if g1.mean.shape != g2.mean.shape:
        raise ValueError(f"dimension mismatch: {g1.mean.shape[0]} vs {g2.mean.shape[0]}")
    diff = g1.mean - g2.mean
    s1 = _sqrtm_psd(g1.cov)
    inner = s1 @ g2.cov @ s1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * cross)
    return max(value, 0.0)


def fit_gaussian(feats, shrinkage=1e-6):
    """Mean and unbiased covariance of (n, d) features.

    With fewer than d + 1 vectors the covariance is rank deficient and
    ``shrinkage * I`` is added.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError("need a non-empty (n, d) feature array")
    n, d = feats.shape
    mean = feats.mean(axis=0)
    if n > 1:
        centered = feats - mean
        cov = centered.T @ centered / (n - 1)
    else:
        cov = np.zeros((d, d))
    if n < d + 1:
        cov = cov + shrinkage * np.eye(d)
    return GaussianStats(mean, (cov + cov.T) / 2.0)


def pooled_gray_embedder(images, grid=8):
    """Default FID embedder: grayscale images block-averaged to grid x grid.

    Images are (N, H, W, C) with H and W divisible by ``grid``; the result is
    (N, grid * grid).
    """
    images = check_images(images)
    n, h, w, c = images.shape
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} not divisible by {grid}")
    if c == 3:
        gray = images @ np.array([0.299, 0.587, 0.114])
    else:
        gray = images[..., 0]
    pooled = gray.reshape(n, grid, h // grid, grid, w // grid).mean(axis=(2, 4))
    return pooled.reshape(n, grid * grid)


pooled_gray_embedder.label = "pooled-gray-8x8"


def fid(feats_a, feats_b):
    """Frechet distance between Gaussians fitted to two feature sets."""
    if len(feats_a) == 0 or len(feats_b) == 0:
        raise ValueError("FID needs non-empty feature sets on both sides")
    return frechet_distance(fit_gaussian(feats_a), fit_gaussian(feats_b))


def image_fid(images_a, images_b, embedder=pooled_gray_embedder):
    return fid(embedder(images_a), embedder(images_b))
