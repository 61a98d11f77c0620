"""Charbonnier variational energy for optical flow and its analytic gradient.

The energy of a flow ``w = (u, v)`` between frames ``I1`` and ``I2`` is::

    E(w) = lambda * data(w) + smooth(w)

``data`` compares ``I1`` with ``I2`` sampled at ``x + w`` (brightness
constancy) and the spatial gradients of ``I1`` with the sampled gradients of
``I2`` (gradient constancy). ``smooth`` penalises forward differences of ``u``
and ``v``. Every term goes through the Charbonnier penalty
``psi(x) = sqrt(x^2 + eps^2)``. Sums run over the whole grid; pixels flagged
in an optional occlusion mask are dropped from the data term only.
"""
from dataclasses import dataclass

import numpy as np

from .imaging import BilinearSampler, spatial_gradients, to_grayscale

DEFAULT_EPSILON = 0.001


@dataclass(frozen=True)
class EnergyConfig:
    epsilon: float = DEFAULT_EPSILON
    lam: float = 10.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")


@dataclass(frozen=True)
class EnergyBreakdown:
    data: float
    smooth: float
    total: float


def charbonnier(x, epsilon=DEFAULT_EPSILON):
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x * x + epsilon * epsilon)


def charbonnier_derivative(x, epsilon=DEFAULT_EPSILON):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(x * x + epsilon * epsilon)


class FramePair:
    """Grayscale frames plus their cached spatial gradients."""

    def __init__(self, I1, I2):
        self.I1 = to_grayscale(I1)
        self.I2 = to_grayscale(I2)
        if self.I1.shape != self.I2.shape:
            raise ValueError(f"frame shapes differ: {self.I1.shape} vs {self.I2.shape}")
        self.I1x, self.I1y = spatial_gradients(self.I1)
        self.I2x, self.I2y = spatial_gradients(self.I2)

    @property
    def shape(self):
        return self.I1.shape

    def check(self, flow, occl=None):
        if flow.shape != self.shape + (2,):
            raise ValueError(f"flow shape {flow.shape} does not match frames {self.shape}")
        if occl is not None and occl.shape != self.shape:
            raise ValueError(f"occlusion mask shape {occl.shape} does not match frames {self.shape}")


def _as_pair(I1, I2):
    if isinstance(I1, FramePair):
        return I1
    return FramePair(I1, I2)


def _data_residuals(pair, flow, with_derivatives=False):
    sampler = BilinearSampler(flow)
    out = []
    for a, b in ((pair.I1, pair.I2), (pair.I1x, pair.I2x), (pair.I1y, pair.I2y)):
        if with_derivatives:
            val, ddx, ddy = sampler.sample_with_derivatives(b)
            out.append((a - val, ddx, ddy))
        else:
            out.append(a - sampler.sample(b))
    return out


def _data_map(pair, flow, eps, occl):
    total = np.zeros(pair.shape)
    for r in _data_residuals(pair, flow):
        total += charbonnier(r, eps)
    if occl is not None:
        total = np.where(occl, 0.0, total)
    return total


def _smooth_maps(flow, eps):
    dx = charbonnier(flow[:, 1:] - flow[:, :-1], eps)
    dy = charbonnier(flow[1:, :] - flow[:-1, :], eps)
    return dx, dy


def energy_maps(I1, I2, flow, cfg=EnergyConfig(), occl=None):
    """Per-pixel summands: ``(data, smooth_x, smooth_y)``.

    ``data`` is ``(H, W)`` (unweighted, zero on occluded pixels); the smooth
    maps hold the horizontal and vertical difference penalties of both flow
    components, shaped ``(H, W-1, 2)`` and ``(H-1, W, 2)``.
    """
    pair = _as_pair(I1, I2)
    flow = np.asarray(flow, dtype=np.float64)
    pair.check(flow, occl)
    return (_data_map(pair, flow, cfg.epsilon, occl),) + _smooth_maps(flow, cfg.epsilon)


def _data_value(pair, flow, eps, occl):
    return float(_data_map(pair, flow, eps, occl).sum())


def _smooth_value(flow, eps):
    dx, dy = _smooth_maps(flow, eps)
    return float(dx.sum()) + float(dy.sum())


def data_term(I1, I2, flow, cfg=EnergyConfig(), occl=None):
    """Unweighted data term; ``lambda`` is applied by :func:`total_energy`."""
    pair = _as_pair(I1, I2)
    flow = np.asarray(flow, dtype=np.float64)
    pair.check(flow, occl)
    return _data_value(pair, flow, cfg.epsilon, occl)


def smoothness_term(flow, cfg=EnergyConfig()):
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    if h < 2 and w < 2:
        raise ValueError("smoothness term undefined on a 1x1 field")
    return _smooth_value(flow, cfg.epsilon)


def total_energy(I1, I2, flow, cfg=EnergyConfig(), occl=None):
    pair = _as_pair(I1, I2)
    data = data_term(pair, None, flow, cfg, occl)
    smooth = smoothness_term(flow, cfg)
    return EnergyBreakdown(data=data, smooth=smooth, total=cfg.lam * data + smooth)


def energy_and_gradient(I1, I2, flow, cfg=EnergyConfig(), occl=None):
    """Return ``(EnergyBreakdown, gradient)`` with the gradient shaped like ``flow``.

    The data gradient uses the derivative of the bilinear interpolant with
    respect to the sample position, which is zero where the position was
    clamped to the frame.
    """
    pair = _as_pair(I1, I2)
    flow = np.asarray(flow, dtype=np.float64)
    pair.check(flow, occl)
    eps = cfg.epsilon

    data_map = np.zeros(pair.shape)
    grad = np.zeros(flow.shape)
    for r, ddx, ddy in _data_residuals(pair, flow, with_derivatives=True):
        psi = charbonnier(r, eps)
        data_map += psi
        dpsi = r / psi
        # r = a - sample(b), so dr/du = -d sample/dx
        grad[..., 0] -= dpsi * ddx
        grad[..., 1] -= dpsi * ddy
    if occl is not None:
        data_map = np.where(occl, 0.0, data_map)
        grad[occl] = 0.0
    data = float(data_map.sum())
    grad *= cfg.lam

    smooth = 0.0
    for k in range(2):
        c = flow[..., k]
        g = grad[..., k]
        d = c[:, 1:] - c[:, :-1]
        psi = charbonnier(d, eps)
        smooth += float(psi.sum())
        dp = d / psi
        g[:, 1:] += dp
        g[:, :-1] -= dp
        d = c[1:, :] - c[:-1, :]
        psi = charbonnier(d, eps)
        smooth += float(psi.sum())
        dp = d / psi
        g[1:, :] += dp
        g[:-1, :] -= dp

    return EnergyBreakdown(data=data, smooth=smooth, total=cfg.lam * data + smooth), grad


def energy_gradient(I1, I2, flow, cfg=EnergyConfig(), occl=None):
    return energy_and_gradient(I1, I2, flow, cfg, occl)[1]
