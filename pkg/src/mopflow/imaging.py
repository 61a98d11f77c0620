"""Dense-grid primitives: grayscale conversion, derivatives, warping, pyramids.

Conventions used throughout the package:

* an image is a float ``ndarray`` of shape ``(H, W)`` or ``(H, W, 3)`` with
  intensities in ``[0, 1]``;
* a flow field is a float ``ndarray`` of shape ``(H, W, 2)`` holding the
  horizontal ``u`` and vertical ``v`` displacement (pixels) per pixel;
* a mask is a ``bool`` ``ndarray`` of shape ``(H, W)``.
"""
import numpy as np

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_grayscale(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ GRAY_WEIGHTS
    raise ValueError(f"unsupported image shape {img.shape}; expected 1 or 3 channels")


def spatial_gradients(img):
    """Central differences inside the grid, one-sided differences on the border.

    Returns ``(Ix, Iy)`` with the same shape as ``img``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("spatial_gradients expects a single-channel image")
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"image too small for gradients: {h}x{w} (need >= 3x3)")
    ix = np.empty_like(img)
    iy = np.empty_like(img)
    ix[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    ix[:, 0] = img[:, 1] - img[:, 0]
    ix[:, -1] = img[:, -1] - img[:, -2]
    iy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    iy[0, :] = img[1, :] - img[0, :]
    iy[-1, :] = img[-1, :] - img[-2, :]
    return ix, iy


class BilinearSampler:
    """Bilinear lookup at ``(x + u, y + v)`` with clamp-to-edge coordinates.

    The sampling weights depend only on the flow, so one sampler can be reused
    for several images of the same size (the intensity and its gradients).
    ``dx``/``dy`` give the partial derivatives of a sampled image with respect
    to the sample coordinates; they are zero where the coordinate was clamped.
    """

    def __init__(self, flow):
        flow = np.asarray(flow, dtype=np.float64)
        h, w = flow.shape[:2]
        if h < 2 or w < 2:
            raise ValueError("bilinear sampling needs at least a 2x2 grid")
        ys, xs = np.mgrid[0:h, 0:w]
        x = xs + flow[..., 0]
        y = ys + flow[..., 1]
        self.inside_x = (x > 0) & (x < w - 1)
        self.inside_y = (y > 0) & (y < h - 1)
        x = np.clip(x, 0, w - 1)
        y = np.clip(y, 0, h - 1)
        x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
        y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
        self.fx = x - x0
        self.fy = y - y0
        self.x0, self.y0 = x0, y0
        self.shape = (h, w)

    def _corners(self, img):
        x0, y0 = self.x0, self.y0
        return img[y0, x0], img[y0, x0 + 1], img[y0 + 1, x0], img[y0 + 1, x0 + 1]

    def sample(self, img):
        a, b, c, d = self._corners(img)
        fx, fy = self.fx, self.fy
        # weighted form, so integer positions return grid values exactly
        top = (1 - fx) * a + fx * b
        bot = (1 - fx) * c + fx * d
        return (1 - fy) * top + fy * bot

    def sample_with_derivatives(self, img):
        """Return ``(values, d/dx, d/dy)`` of the bilinear interpolant."""
        a, b, c, d = self._corners(img)
        fx, fy = self.fx, self.fy
        top = (1 - fx) * a + fx * b
        bot = (1 - fx) * c + fx * d
        val = (1 - fy) * top + fy * bot
        ddx = (b - a) + fy * ((d - c) - (b - a))
        ddy = bot - top
        return val, np.where(self.inside_x, ddx, 0.0), np.where(self.inside_y, ddy, 0.0)


def _check_flow(img, flow):
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if img.shape[:2] != flow.shape[:2]:
        raise ValueError(f"shape mismatch: image {img.shape[:2]} vs flow {flow.shape[:2]}")


def backward_warp(img, flow):
    """Sample ``img`` at ``(x + u, y + v)``; coordinates are clamped to the frame."""
    img = np.asarray(img, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_flow(img, flow)
    if img.ndim != 2:
        raise ValueError("backward_warp expects a single-channel image")
    return BilinearSampler(flow).sample(img)


def downsample_half(img):
    """2x2 box average followed by stride-2 subsampling.

    Odd dimensions are edge-padded first, so the output is ``ceil(dim / 2)``.
    Works for ``(H, W)`` and ``(H, W, C)`` arrays.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 2 and w < 2:
        raise ValueError("cannot downsample a 1x1 image")
    pad = [(0, h % 2), (0, w % 2)] + [(0, 0)] * (img.ndim - 2)
    if h % 2 or w % 2:
        img = np.pad(img, pad, mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _resize_axis_weights(n_in, n_out):
    # pixel-centre alignment: output index i sits at input coordinate (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), max(n_in - 2, 0))
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def resize_bilinear(grid, new_h, new_w):
    """Pixel-centre aligned bilinear resize of an ``(H, W[, C])`` array."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[:2]
    r0, r1, fr = _resize_axis_weights(h, new_h)
    c0, c1, fc = _resize_axis_weights(w, new_w)
    fr = fr[(slice(None),) + (None,) * (grid.ndim - 1)]
    rows = grid[r0] * (1 - fr) + grid[r1] * fr
    fc = fc[(None, slice(None)) + (None,) * (grid.ndim - 2)]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def upsample_flow(flow, new_h, new_w):
    """Resize a flow field and rescale the vectors to the new pixel units."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    if new_h < h or new_w < w:
        raise ValueError(f"upsample_flow cannot shrink {h}x{w} to {new_h}x{new_w}")
    out = resize_bilinear(flow, new_h, new_w)
    out[..., 0] *= new_w / w
    out[..., 1] *= new_h / h
    return out


def build_pyramid(img, levels):
    """Finest-first list of ``levels`` box-filtered images."""
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(downsample_half(pyr[-1]))
    return pyr
