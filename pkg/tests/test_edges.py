import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egr_forge.edges import (
    SOBEL_X,
    SOBEL_Y,
    EdgeCache,
    EdgeConfigError,
    EdgeGraphTransformer,
    convolve2d,
    edge_graph,
    gradient_field,
    normalize_magnitude,
    to_grayscale,
)


def brute_correlate(img, kernel):
    """Nested-loop 3x3 correlation with clamped (replicate) indexing."""
    h, w = len(img), len(img[0])
    out = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(3):
                for j in range(3):
                    yy = min(max(y + i - 1, 0), h - 1)
                    xx = min(max(x + j - 1, 0), w - 1)
                    acc += float(kernel[i][j]) * float(img[yy][xx])
            out[y][x] = acc
    return np.array(out)


def test_kernels_as_printed():
    assert SOBEL_X.tolist() == [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    assert SOBEL_Y.tolist() == [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    np.testing.assert_array_equal(SOBEL_Y, SOBEL_X.T)


@pytest.mark.parametrize(
    "rgb, expected", [((1, 1, 1), 1.0), ((1, 0, 0), 0.299), ((0, 1, 0), 0.587), ((0, 0, 1), 0.114)]
)
def test_grayscale_weights(rgb, expected):
    img = np.ones((3, 3, 3)) * np.array(rgb, dtype=float)
    assert to_grayscale(img)[1, 1, 0] == pytest.approx(expected, abs=1e-15)


def test_grayscale_passthrough():
    g = np.random.default_rng(0).random((5, 4, 1))
    np.testing.assert_array_equal(to_grayscale(g), g)


def test_matches_nested_loop_oracle(rng):
    for _ in range(10):
        img = rng.random((16, 16))
        for k in (SOBEL_X, SOBEL_Y):
            np.testing.assert_allclose(convolve2d(img, k), brute_correlate(img, k), rtol=0, atol=1e-12)


def test_general_kernel_matches_oracle(rng):
    img, k = rng.random((7, 9)), rng.normal(size=(3, 3))
    np.testing.assert_allclose(convolve2d(img, k), brute_correlate(img, k), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(3, 12), st.integers(3, 12))
def test_flat_images_have_exactly_zero_edges(v, h, w):
    img = np.full((h, w, 3), v)
    f = gradient_field(img)
    assert not f.gx.any() and not f.gy.any()
    assert not edge_graph(img).values.any()


def test_constant_image_zero_gradient():
    img = np.full((8, 9, 3), 0.37)
    f = gradient_field(img)
    assert not f.gx.any() and not f.gy.any()
    assert not edge_graph(img).values.any()


def test_vertical_step_response():
    img = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (4, 1))
    gx = convolve2d(img, SOBEL_X)
    # center column 1 sees columns (0, 0, 1): -1*0 + 1*1 - 2*0 + 2*1 - 1*0 + 1*1
    assert gx[1, 1] == 4.0
    assert gx[1, 0] == 0.0


def test_three_four_five():
    img = np.zeros((3, 3))
    img[1, 2] = 0.75  # x-kernel weight 2 -> G_x 1.5
    img[2, 1] = 1.0  # y-kernel weight 2 -> G_y 2.0
    f = gradient_field(img)
    assert (f.gx[1, 1], f.gy[1, 1]) == (1.5, 2.0)
    assert f.magnitude[1, 1] == 2.5  # the 3-4-5 triple at half scale


def test_magnitude_identity_and_direction_range(rng):
    f = gradient_field(rng.random((12, 10, 3)))
    np.testing.assert_array_equal(f.magnitude, np.sqrt(f.gx**2 + f.gy**2))
    assert np.all(f.direction > -np.pi) and np.all(f.direction <= np.pi)


def test_binary_mode_threshold():
    mag = np.array([[0.2, 0.7], [1.0, 0.0]])
    np.testing.assert_array_equal(normalize_magnitude(mag, "binary", 0.5), [[0, 1], [1, 0]])


def test_mode_validation():
    img = np.zeros((4, 4, 3))
    with pytest.raises(EdgeConfigError):
        edge_graph(img, "binary")
    with pytest.raises(EdgeConfigError):
        edge_graph(img, "binary", 0.0)
    with pytest.raises(EdgeConfigError):
        edge_graph(img, "canny")
    with pytest.raises(ValueError):
        edge_graph(np.zeros((2, 5, 3)))


def test_magnitude_values_in_unit_interval(rng):
    v = edge_graph(rng.random((16, 16, 3))).values
    assert v.min() >= 0 and v.max() == 1.0


def test_horizontal_flip(rng):
    img = rng.random((16, 16, 1))
    a, b = gradient_field(img), gradient_field(img[:, ::-1])
    inner = (slice(1, -1), slice(1, -1))
    np.testing.assert_allclose(b.gx[:, ::-1][inner], -a.gx[inner], atol=1e-12)
    np.testing.assert_allclose(b.magnitude[:, ::-1][inner], a.magnitude[inner], atol=1e-12)


def test_transpose_swaps_gradients(rng):
    img = rng.random((14, 14, 1))
    a, b = gradient_field(img), gradient_field(img.transpose(1, 0, 2))
    np.testing.assert_allclose(b.gx, a.gy.T, atol=1e-12)
    np.testing.assert_allclose(b.gy, a.gx.T, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (10, 10), elements=st.floats(0.05, 0.45)),
    st.floats(0.2, 2.0),
    st.floats(0.0, 0.05),
)
def test_normalized_magnitude_affine_invariant(img, a, b):
    base = edge_graph(img[:, :, None]).values
    moved = edge_graph((a * img + b)[:, :, None]).values
    np.testing.assert_allclose(moved, base, atol=1e-9)


def test_transformer_replicates_channels(rng):
    X = rng.random((3, 16, 16, 3))
    E = EdgeGraphTransformer().fit(X).transform(X)
    assert E.shape == (3, 16, 16, 3)
    np.testing.assert_array_equal(E[..., 0], E[..., 2])
    np.testing.assert_array_equal(E[1, :, :, 0], edge_graph(X[1]).values)
    binary = EdgeGraphTransformer("binary", 0.3, n_channels=1).transform(X)
    assert set(np.unique(binary)) <= {0.0, 1.0}


def test_transformer_get_params():
    t = EdgeGraphTransformer(mode="binary", threshold=0.4)
    assert t.get_params() == {"mode": "binary", "threshold": 0.4, "n_channels": 3}


def test_cache_hits_and_keys(tmp_path, rng):
    cache = EdgeCache(tmp_path)
    img = rng.random((16, 16, 3))
    first = cache.get(img)
    assert len(list(tmp_path.glob("*.npy"))) == 1
    np.testing.assert_array_equal(cache.get(img), first)
    assert len(list(tmp_path.glob("*.npy"))) == 1
    cache.get(img, "binary", 0.5)
    assert len(list(tmp_path.glob("*.npy"))) == 2
    X = np.stack([img, img * 0.5])
    np.testing.assert_array_equal(cache.transform(X), EdgeGraphTransformer().transform(X))
