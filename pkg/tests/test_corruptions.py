import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egr_forge.corruptions import (
    DEFAULTS,
    Corruption,
    CorruptionError,
    CorruptionSpec,
    apply_corruption,
    gaussian_blur,
    gaussian_kernel1d,
    gaussian_noise,
    jpeg_roundtrip,
    median_blur,
    sample_seed,
)
from egr_forge.edges import edge_graph
from egr_forge.metrics import psnr


@pytest.fixture
def textured():
    rng = np.random.default_rng(7)
    yy, xx = np.mgrid[0:64, 0:64] / 64.0
    base = 0.5 + 0.25 * np.sin(6 * xx)[..., None] * np.cos(4 * yy)[..., None]
    return np.clip(base + rng.normal(0, 0.05, (64, 64, 3)), 0, 1)


def test_spec_defaults_and_validation():
    assert CorruptionSpec("GN").sigma == 0.05
    gb = CorruptionSpec("GB")
    assert (gb.radius, gb.sigma) == (2, 1.0)
    assert CorruptionSpec("MB").radius == 2
    assert CorruptionSpec("JPEG").quality == 60
    assert set(DEFAULTS) == {"GN", "GB", "MB", "JPEG"}
    for bad in [dict(kind="XX"), dict(kind="GN", sigma=-1), dict(kind="MB", radius=0), dict(kind="JPEG", quality=101)]:
        with pytest.raises(CorruptionError):
            CorruptionSpec(**bad)
    with pytest.raises(CorruptionError):
        CorruptionSpec.from_dict({"kind": "GN", "strength": 2})
    assert CorruptionSpec.from_dict(CorruptionSpec("GB", sigma=2.0).to_dict()) == CorruptionSpec("GB", sigma=2.0)


def test_noise_zero_sigma_is_identity(textured):
    np.testing.assert_array_equal(gaussian_noise(textured, 0.0, seed=3), textured)


def test_noise_deterministic_and_clt():
    gray = np.full((64, 64, 3), 0.5)
    a = gaussian_noise(gray, 0.05, seed=11)
    np.testing.assert_array_equal(a, gaussian_noise(gray, 0.05, seed=11))
    assert not np.array_equal(a, gaussian_noise(gray, 0.05, seed=12))
    assert abs((a - 0.5).mean()) < 3 * 0.05 / np.sqrt(a.size)


def test_psnr_decreases_with_noise(textured):
    values = [psnr(textured, gaussian_noise(textured, s, seed=1)) for s in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


def test_blur_constant_exact():
    const = np.full((9, 11, 3), 0.123456789)
    np.testing.assert_array_equal(gaussian_blur(const, 2, 1.3), const)
    np.testing.assert_array_equal(median_blur(const, 2), const)


def test_blur_impulse_is_outer_product():
    img = np.zeros((11, 11, 1))
    img[5, 5] = 1.0
    k = gaussian_kernel1d(2, 1.0)
    out = gaussian_blur(img, 2, 1.0)[:, :, 0]
    np.testing.assert_allclose(out[3:8, 3:8], np.outer(k, k), atol=1e-15)
    assert out[:3].sum() == 0 and out[:, 8:].sum() == 0


def test_blur_reduces_variance(textured):
    assert gaussian_blur(textured).var() <= textured.var()


def test_median_salt_and_sorted_window():
    img = np.zeros((5, 5, 1))
    img[2, 2] = 1.0
    assert median_blur(img, 1)[2, 2, 0] == 0.0
    win = (np.arange(9).reshape(3, 3) / 8.0)[:, :, None]
    assert median_blur(win, 1)[1, 1, 0] == 4 / 8


def test_jpeg_shape_quality_and_determinism(textured):
    q90, q30 = jpeg_roundtrip(textured, 90), jpeg_roundtrip(textured, 30)
    assert q90.shape == textured.shape
    assert psnr(textured, q90) > psnr(textured, q30)
    np.testing.assert_array_equal(q30, jpeg_roundtrip(textured, 30))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["GN", "GB", "MB", "JPEG"]), st.integers(0, 1000))
def test_range_shape_and_edge_composability(kind, seed):
    img = np.random.default_rng(seed).random((16, 16, 3))
    out = apply_corruption(img, CorruptionSpec(kind), seed)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1
    edge_graph(out)


def test_transformer_seeds_per_index(textured):
    X = np.stack([textured, textured, textured])
    out = Corruption("GN", seed=9).fit(X).transform(X)
    for i in range(3):
        np.testing.assert_array_equal(out[i], gaussian_noise(textured, 0.05, sample_seed(9, i)))
    # independent of how the stack is cut up
    np.testing.assert_array_equal(Corruption("GN", seed=9).transform(X[:2]), out[:2])
    assert sample_seed(9, 3) == 9 ^ 3
