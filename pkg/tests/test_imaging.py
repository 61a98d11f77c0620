import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mopflow.imaging import (
    backward_warp,
    build_pyramid,
    downsample_half,
    spatial_gradients,
    to_grayscale,
    upsample_flow,
)

unit = st.floats(0, 1, allow_nan=False)


def test_grayscale_white_is_one():
    assert np.allclose(to_grayscale(np.ones((4, 5, 3))), 1.0, rtol=0, atol=1e-15)


def test_grayscale_identity_on_single_channel():
    g = np.random.default_rng(0).random((6, 7))
    out = to_grayscale(g)
    assert out.dtype == g.dtype and np.array_equal(out, g)


def test_grayscale_red_weight():
    img = np.zeros((1, 1, 3))
    img[..., 0] = 1.0
    assert to_grayscale(img)[0, 0] == pytest.approx(0.299, abs=1e-15)


def test_grayscale_rejects_two_channels():
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((3, 3, 2)))


def test_gradients_constant_image():
    ix, iy = spatial_gradients(np.full((5, 6), 0.3))
    assert not ix.any() and not iy.any()


def test_gradients_ramp_and_transpose():
    h, w = 6, 9
    ramp = np.tile(np.arange(w) / (w - 1), (h, 1))
    ix, iy = spatial_gradients(ramp)
    assert np.allclose(ix[:, 1:-1], 1 / (w - 1), atol=1e-15)
    assert np.allclose(iy, 0.0)
    ix, iy = spatial_gradients(ramp.T)
    assert np.allclose(iy[1:-1, :], 1 / (w - 1), atol=1e-15)
    assert np.allclose(ix, 0.0)


def test_gradients_too_small():
    with pytest.raises(ValueError):
        spatial_gradients(np.zeros((2, 5)))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(3, 12), st.integers(3, 12))
def test_gradients_of_plane(a, b, h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    ix, iy = spatial_gradients(a * xs + b * ys)
    assert np.allclose(ix[1:-1, 1:-1], a, rtol=0, atol=1e-12)
    assert np.allclose(iy[1:-1, 1:-1], b, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 10), st.integers(2, 10)), elements=unit))
def test_warp_zero_flow_is_identity(img):
    out = backward_warp(img, np.zeros(img.shape + (2,)))
    assert np.array_equal(out, img)


def test_warp_integer_shift():
    img = np.random.default_rng(1).random((6, 8))
    flow = np.zeros((6, 8, 2))
    flow[..., 0] = 1.0
    out = backward_warp(img, flow)
    assert np.array_equal(out[:, :-1], img[:, 1:])


def test_warp_half_pixel_on_ramp():
    ramp = np.tile(np.arange(4) / 3.0, (4, 1))
    flow = np.zeros((4, 4, 2))
    flow[..., 0] = 0.5
    out = backward_warp(ramp, flow)
    assert np.allclose(out[:, :-1], 0.5 * (ramp[:, :-1] + ramp[:, 1:]), atol=1e-15)


def test_warp_clamps_outside():
    img = np.random.default_rng(2).random((5, 5))
    flow = np.full((5, 5, 2), 100.0)
    assert np.all(backward_warp(img, flow) == img[-1, -1])


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        backward_warp(np.zeros((4, 4)), np.zeros((4, 5, 2)))


def test_downsample_examples():
    assert np.allclose(downsample_half(np.full((6, 4), 0.7)), 0.7)
    assert downsample_half(np.array([[0.0, 1.0], [0.0, 1.0]])).tolist() == [[0.5]]
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    assert np.array_equal(downsample_half(checker), np.full((2, 2), 0.5))


def test_downsample_odd_dims_and_degenerate():
    assert downsample_half(np.zeros((5, 7))).shape == (3, 4)
    with pytest.raises(ValueError):
        downsample_half(np.zeros((1, 1)))


@settings(max_examples=50, deadline=None)
@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 6).map(lambda n: 2 * n), st.integers(1, 6).map(lambda n: 2 * n)),
        elements=unit,
    )
)
def test_downsample_preserves_mean_and_range(img):
    out = downsample_half(img)
    assert abs(out.mean() - img.mean()) < 1e-12
    assert out.min() >= img.min() - 1e-15 and out.max() <= img.max() + 1e-15


def test_upsample_examples():
    flow = np.zeros((3, 4, 2))
    flow[..., 0] = 2.0
    up = upsample_flow(flow, 6, 8)
    assert np.allclose(up[..., 0], 4.0) and np.allclose(up[..., 1], 0.0)
    assert not upsample_flow(np.zeros((2, 3, 2)), 7, 9).any()
    f = np.zeros((2, 2, 2))
    f[..., 0] = [[0.0, 2.0], [0.0, 2.0]]
    u = upsample_flow(f, 2, 4)[..., 0]
    # pixel-centre aligned: outer columns clamp to the source, inner ones interpolate
    assert np.allclose(u, [[0, 1, 3, 4], [0, 1, 3, 4]])
    assert np.all(np.diff(u[0]) > 0)


def test_upsample_rejects_shrinking():
    with pytest.raises(ValueError):
        upsample_flow(np.zeros((4, 4, 2)), 2, 4)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(2, 8), st.integers(2, 8), st.integers(1, 3))
def test_upsample_constant_field_exact(u, v, h, w, k):
    flow = np.empty((h, w, 2))
    flow[..., 0], flow[..., 1] = u, v
    up = upsample_flow(flow, h * k, w * k)
    assert np.allclose(up[..., 0], u * k, rtol=1e-15, atol=1e-12)
    assert np.allclose(up[..., 1], v * k, rtol=1e-15, atol=1e-12)


def test_pyramid_shapes():
    pyr = build_pyramid(np.zeros((64, 90)), 4)
    assert [p.shape for p in pyr] == [(64, 90), (32, 45), (16, 23), (8, 12)]
