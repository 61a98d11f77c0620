"""Synthetic frames with known motion, used by the oracles and the smoke fixture."""
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset_io import ANNOTATION_DIR, FRAME_DIR


def texture(shape, rng, sigma=1.5, lo=0.1, hi=0.9):
    """Smoothed white noise stretched to ``[lo, hi]``."""
    t = ndimage.gaussian_filter(rng.random(shape), sigma, mode="reflect")
    t = (t - t.min()) / (t.max() - t.min())
    return lo + (hi - lo) * t


def shift_clamped(img, dx, dy=0):
    """``out(x, y) = img(x - dx, y - dy)`` for integer shifts, clamped at the border.

    With ``I2 = shift_clamped(I1, dx, dy)`` the true flow from ``I1`` to ``I2``
    is ``(dx, dy)`` everywhere away from the border.
    """
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols]


def shift_pair(size=64, dx=1, dy=0, seed=0, sigma=1.5):
    rng = np.random.default_rng(seed)
    I1 = texture((size, size), rng, sigma)
    return I1, shift_clamped(I1, dx, dy)


def moving_square(
    shape=(96, 176), n_frames=3, side=40, start=(24, 40), velocity=(1, 3), seed=0
):
    """Textured square sliding over a static textured background.

    ``velocity`` is ``(dy, dx)`` in pixels per frame. Returns ``(frames,
    masks)``: RGB frames in [0, 1] and the square's boolean support per frame.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    bg = texture(shape, rng, sigma=2.0, lo=0.15, hi=0.55)
    obj = texture((side, side), rng, sigma=1.0, lo=0.5, hi=0.95)
    frames, masks = [], []
    for k in range(n_frames):
        r = start[0] + k * velocity[0]
        c = start[1] + k * velocity[1]
        if not (0 <= r and r + side <= h and 0 <= c and c + side <= w):
            raise ValueError(f"square leaves the frame at frame {k}")
        img = bg.copy()
        img[r : r + side, c : c + side] = obj
        m = np.zeros(shape, dtype=bool)
        m[r : r + side, c : c + side] = True
        frames.append(np.repeat(img[..., None], 3, axis=-1))
        masks.append(m)
    return frames, masks


def write_sequence(root, name, frames, masks):
    """Write frames and masks in the DAVIS layout (lossless PNG frames)."""
    root = Path(root)
    fdir = root / FRAME_DIR / name
    adir = root / ANNOTATION_DIR / name
    fdir.mkdir(parents=True, exist_ok=True)
    adir.mkdir(parents=True, exist_ok=True)
    for k, (img, m) in enumerate(zip(frames, masks)):
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(fdir / f"{k:05d}.png")
        Image.fromarray(m.astype(np.uint8), mode="L").save(adir / f"{k:05d}.png")
    return root
