"""DAVIS-layout ingestion, preprocessing, mask PNGs and the Middlebury ``.flo`` codec."""
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

WORK_SIZE = (448, 832)  # (height, width)
FLO_MAGIC = 202021.25
FRAME_DIR = Path("JPEGImages") / "480p"
ANNOTATION_DIR = Path("Annotations") / "480p"
FRAME_EXTS = (".jpg", ".jpeg", ".png")


@dataclass
class Sequence:
    name: str
    frames: list
    annotations: list = field(default_factory=list)


@dataclass
class DatasetIndex:
    root: Path
    sequences: list

    def get(self, name):
        for s in self.sequences:
            if s.name == name:
                return s
        raise KeyError(f"sequence {name!r} not in index")

    def names(self):
        return [s.name for s in self.sequences]


def read_split(path):
    with open(path) as f:
        return [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]


def load_davis_index(root, split_list=None, sequences=None):
    """Index ``JPEGImages/480p/<seq>/*`` and ``Annotations/480p/<seq>/*.png``.

    ``split_list`` is a file with one sequence name per line; ``sequences`` an
    explicit list of names. Both filter; names are sorted.
    """
    root = Path(root)
    frame_root = root / FRAME_DIR
    if not frame_root.is_dir():
        raise FileNotFoundError(f"no frame directory {frame_root}")
    names = sorted(p.name for p in frame_root.iterdir() if p.is_dir())
    wanted = None
    if split_list is not None:
        wanted = set(read_split(split_list))
    if sequences:
        wanted = set(sequences) if wanted is None else wanted & set(sequences)
    if wanted is not None:
        missing = sorted(wanted - set(names))
        if missing:
            raise FileNotFoundError(f"sequences not found under {frame_root}: {', '.join(missing)}")
        names = [n for n in names if n in wanted]
    out = []
    for name in names:
        frames = sorted(p for p in (frame_root / name).iterdir() if p.suffix.lower() in FRAME_EXTS)
        if not frames:
            raise ValueError(f"sequence {name!r} has no frames")
        ann_dir = root / ANNOTATION_DIR / name
        anns = sorted(ann_dir.glob("*.png")) if ann_dir.is_dir() else []
        if anns and len(anns) != len(frames):
            raise ValueError(
                f"sequence {name!r}: {len(frames)} frames but {len(anns)} annotations"
            )
        out.append(Sequence(name, frames, anns))
    return DatasetIndex(root, out)


def _resize_float(channel, size):
    h, w = size
    if channel.shape == (h, w):
        return channel
    img = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64)


def load_image(path, size=WORK_SIZE):
    """Decode an RGB frame, resize bilinearly to ``size`` and scale to [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot decode frame {path}: {exc}") from exc
    if size is not None:
        rgb = np.stack([_resize_float(rgb[..., c], size) for c in range(3)], axis=-1)
    # bilinear weights are convex, the clip only absorbs float32 rounding
    return np.clip(rgb, 0.0, 1.0)


def load_frame_pair(index, seq, t, size=WORK_SIZE):
    s = index.get(seq) if isinstance(seq, str) else seq
    if not 0 <= t < len(s.frames) - 1:
        raise IndexError(f"frame pair {t} out of range for {s.name!r} ({len(s.frames)} frames)")
    return load_image(s.frames[t], size), load_image(s.frames[t + 1], size)


def binarize_annotation(annotation, size=WORK_SIZE):
    """Foreground = any nonzero label; resized nearest-neighbour to ``size``.

    ``annotation`` is a path or an already-decoded label array.
    """
    if isinstance(annotation, (str, os.PathLike)):
        try:
            with Image.open(annotation) as im:
                labels = np.asarray(im)
        except OSError as exc:
            raise OSError(f"cannot decode annotation {annotation}: {exc}") from exc
    else:
        labels = np.asarray(annotation)
    if labels.ndim == 3:
        labels = labels.any(axis=-1)
    mask = labels != 0
    if size is not None and mask.shape != tuple(size):
        im = Image.fromarray(mask.astype(np.uint8) * 255, mode="L")
        mask = np.asarray(im.resize((size[1], size[0]), Image.NEAREST)) > 0
    return mask


@contextmanager
def atomic_output(path, mode="wb"):
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_flo(path, flow):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("refusing to write a non-finite flow field")
    h, w = flow.shape[:2]
    with atomic_output(path) as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise ValueError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", blob[:12])
    if magic != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic {magic!r}")
    if w < 0 or h < 0:
        raise ValueError(f"{path}: negative dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise ValueError(f"{path}: truncated .flo payload ({len(blob)} of {need} bytes)")
    return np.frombuffer(blob, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).copy()


def write_mask_png(path, mask):
    img = Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, mode="L")
    with atomic_output(path) as f:
        img.save(f, format="PNG")


def read_mask_png(path, size=None):
    return binarize_annotation(path, size)


def write_rgb_png(path, rgb):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    with atomic_output(path) as f:
        Image.fromarray(arr, mode="RGB").save(f, format="PNG")
