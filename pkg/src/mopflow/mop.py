"""Moving-object proposals from a flow field.

Pipeline: flow magnitude -> Otsu (or fixed) threshold -> morphological
opening/closing -> 8-connected components.
"""
import colorsys
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MopConfig:
    threshold_mode: str = "otsu"  # "otsu" or "fixed"
    threshold_value: float = 1.0  # px, used when threshold_mode == "fixed"
    morph_radius: int = 2
    min_area: int = 64

    def __post_init__(self):
        if self.threshold_mode not in ("otsu", "fixed"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if self.morph_radius < 0:
            raise ValueError("morph_radius must be >= 0")


@dataclass
class Proposal:
    mask: np.ndarray
    area: int
    bbox: tuple  # (top, left, height, width)
    mean_motion: tuple  # (u, v) px


def flow_magnitude(flow):
    flow = np.asarray(flow, dtype=np.float64)
    return np.hypot(flow[..., 0], flow[..., 1])


def otsu_threshold(values, bins=256):
    """Otsu threshold over a histogram spanning ``[min, max]`` of ``values``.

    Returns the upper edge of the last bin of the lower class, or ``None``
    when the values are constant. Ties in the between-class variance go to the
    smallest split.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return None
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centers)[:-1]
    total = (hist * centers).sum()
    valid = (w0 > 0) & (w1 > 0)
    m0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    m1 = np.divide(total - s0, w1, out=np.zeros_like(s0), where=valid)
    between = np.where(valid, w0 * w1 * (m0 - m1) ** 2, -1.0)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def foreground_threshold(mag, cfg=MopConfig()):
    mag = np.asarray(mag, dtype=np.float64)
    if cfg.threshold_mode == "fixed":
        return mag > cfg.threshold_value
    t = otsu_threshold(mag)
    if t is None:
        return np.zeros(mag.shape, dtype=bool)
    return mag > t


def disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def refine_mask(mask, cfg=MopConfig()):
    """Opening then closing with a disc; every step replicates the frame border."""
    mask = np.asarray(mask, dtype=bool)
    r = cfg.morph_radius
    if r == 0:
        return mask.copy()
    se = disk(r)
    m = mask.astype(np.uint8)

    def erode(a):
        return ndimage.grey_erosion(a, footprint=se, mode="nearest")

    def dilate(a):
        return ndimage.grey_dilation(a, footprint=se, mode="nearest")

    m = dilate(erode(m))
    m = erode(dilate(m))
    return m.astype(bool)


def extract_proposals(mask, flow, cfg=MopConfig()):
    mask = np.asarray(mask, dtype=bool)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} and flow {flow.shape[:2]} differ in shape")
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    proposals = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels == lab
        area = int(comp.sum())
        if area < cfg.min_area:
            continue
        top, left = sl[0].start, sl[1].start
        bbox = (top, left, sl[0].stop - top, sl[1].stop - left)
        motion = flow[comp].mean(axis=0)
        proposals.append(Proposal(comp, area, bbox, (float(motion[0]), float(motion[1]))))
    # stable sort keeps raster order among equal areas
    proposals.sort(key=lambda p: -p.area)
    return proposals


def proposals_to_mask(proposals, shape):
    out = np.zeros(shape, dtype=bool)
    for p in proposals:
        out |= p.mask
    return out


def segment_flow(flow, cfg=MopConfig()):
    """Full proposal pipeline; returns ``(mask, proposals)``."""
    fg = foreground_threshold(flow_magnitude(flow), cfg)
    refined = refine_mask(fg, cfg)
    props = extract_proposals(refined, flow, cfg)
    return proposals_to_mask(props, refined.shape), props


def flow_to_color(flow, max_mag=None):
    """Render flow as RGB in [0, 1]: hue from direction, saturation from magnitude.

    Hue is ``atan2(v, u)`` mapped onto the colour circle, saturation is the
    magnitude divided by ``max_mag`` (the largest observed magnitude when not
    given), value is 1. Zero flow is white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    mag = flow_magnitude(flow)
    if max_mag is None:
        max_mag = float(mag.max())
    hue = np.mod(np.arctan2(flow[..., 1], flow[..., 0]) / (2 * np.pi), 1.0)
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    # vectorised HSV -> RGB with V = 1
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    choices_r = [one, q, p, p, t, one]
    choices_g = [t, one, one, q, p, p]
    choices_b = [p, p, t, one, one, q]
    rgb = np.stack(
        [np.choose(i, choices_r), np.choose(i, choices_g), np.choose(i, choices_b)], axis=-1
    )
    return rgb


def color_hue(rgb):
    """Hue in [0, 1) of a single RGB triple; helper for inspecting renderings."""
    return colorsys.rgb_to_hsv(*map(float, rgb))[0]
