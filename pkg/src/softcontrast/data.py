"""Datasets: IDX image files and two synthetic generators.

IDX layout (big-endian), as used by MNIST-style corpora::

    images: u32 magic 0x00000803, u32 count, u32 rows, u32 cols, count·rows·cols u8
    labels: u32 magic 0x00000801, u32 count, count u8

Bytes are scaled by 1/255 and grey images are replicated to three channels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import VideoClip

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPE_NAMES = ("disk", "square", "triangle", "cross")
MOTION_NAMES = ("left", "right", "up", "circular")
VIDEO_FRAME_RATE = 8.0


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    kind: str  # idx-images | synthetic-shapes | synthetic-video
    items: np.ndarray  # N×H×W×3 images or N×T×H×W×3 videos
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.items) == 0:
            raise DatasetError("dataset is empty")
        if len(self.items) != len(self.labels):
            raise DatasetError(f"{len(self.items)} items but {len(self.labels)} labels")
        n_cls = self.num_classes
        if self.labels.min() < 0 or self.labels.max() >= n_cls:
            raise DatasetError("labels must lie in [0, class_count)")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return int(self.metadata.get("classes", int(self.labels.max()) + 1))

    @property
    def is_video(self) -> bool:
        return self.kind == "synthetic-video"

    def video(self, i: int) -> VideoClip:
        return VideoClip(self.items[i], self.metadata.get("frame_rate", VIDEO_FRAME_RATE))

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.kind, self.items[index], self.labels[index], dict(self.metadata))


# IDX ---------------------------------------------------------------------------

def _read_idx(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08X}, expected 0x{magic:08X}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < size:
        raise DatasetError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    return dims, payload[:size]


def load_idx(path_images, path_labels) -> Dataset:
    dims, payload = _read_idx(path_images, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_bytes = _read_idx(path_labels, IDX_LABELS_MAGIC, 1)
    if n_labels != dims[0]:
        raise DatasetError(f"{dims[0]} images but {n_labels} labels")
    gray = np.frombuffer(payload, dtype=np.uint8).reshape(dims).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    items = np.repeat(gray[..., None], 3, axis=-1)
    return Dataset("idx-images", items, labels,
                   {"dims": list(dims[1:]), "classes": int(labels.max()) + 1, "source": str(path_images)})


def write_idx(path_images, path_labels, images: np.ndarray, labels: np.ndarray) -> None:
    """Write u8 grey images (N×rows×cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path_images).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(path_labels).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# synthetic shapes ----------------------------------------------------------------

def shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = x - cx, y - cy
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        half = 0.8 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "triangle":
        # apex up, base at cy + 0.8r
        top, base = cy - r, cy + 0.8 * r
        frac = (y - top) / (base - top)
        return (y >= top) & (y <= base) & (np.abs(dx) <= frac * r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise DatasetError(f"unknown shape {kind!r}")


def _noise_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.0, 0.35, size=3)
    return np.clip(base + rng.normal(0.0, 0.06, size=(size, size, 3)), 0.0, 1.0)


def _bright_color(rng: np.random.Generator) -> np.ndarray:
    c = rng.uniform(0.2, 1.0, size=3)
    c[rng.integers(3)] = rng.uniform(0.85, 1.0)
    return c


def synth_shapes(n: int, image_size: int = 24, classes: int = 4, seed: int = 0) -> Dataset:
    """Images with one shape (disk, square, triangle, cross) on a noisy background.

    Labels are assigned round-robin, so class counts differ by at most one.
    """
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise DatasetError(f"classes must be in [1, {len(SHAPE_NAMES)}]")
    if n < classes:
        raise DatasetError("need at least one item per class")
    rng = np.random.default_rng([seed, 0x5A9E])
    labels = np.arange(n) % classes
    items = np.empty((n, image_size, image_size, 3))
    for i, label in enumerate(labels):
        img = _noise_background(rng, image_size)
        r = rng.uniform(0.22, 0.38) * image_size
        cx = rng.uniform(r, image_size - r)
        cy = rng.uniform(r, image_size - r)
        mask = shape_mask(SHAPE_NAMES[label], image_size, cx, cy, r)
        img[mask] = _bright_color(rng)
        items[i] = img
    return Dataset("synthetic-shapes", items, labels,
                   {"dims": [image_size, image_size], "classes": classes, "seed": seed})


# synthetic video -------------------------------------------------------------------

def motion_positions(pattern: str, start: tuple[float, float], speed: float, frames: int,
                     center: tuple[float, float] = (0.0, 0.0), phase: float = 0.0) -> np.ndarray:
    """Sprite centre (x, y) per frame for one motion pattern."""
    t = np.arange(frames, dtype=np.float64)
    x0, y0 = start
    if pattern == "left":
        return np.stack([x0 - speed * t, np.full(frames, y0)], axis=1)
    if pattern == "right":
        return np.stack([x0 + speed * t, np.full(frames, y0)], axis=1)
    if pattern == "up":
        return np.stack([np.full(frames, x0), y0 - speed * t], axis=1)
    if pattern == "circular":
        radius = speed * frames / (2 * np.pi)
        ang = phase + 2 * np.pi * t / frames
        return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
    raise DatasetError(f"unknown motion pattern {pattern!r}")


def render_trajectory(background: np.ndarray, positions: np.ndarray, radius: float,
                      color: np.ndarray) -> np.ndarray:
    size = background.shape[0]
    frames = np.repeat(background[None], len(positions), axis=0)
    for f, (cx, cy) in enumerate(positions):
        frames[f][shape_mask("disk", size, cx, cy, radius)] = color
    return frames


def synth_video(n: int, frames: int = 16, image_size: int = 16, classes: int = 4, seed: int = 0) -> Dataset:
    """Videos of a disk moving left, right, up or in a circle over a static noisy background."""
    if frames < 8:
        raise DatasetError("synthetic videos need at least 8 frames")
    if not 1 <= classes <= len(MOTION_NAMES):
        raise DatasetError(f"classes must be in [1, {len(MOTION_NAMES)}]")
    if n < classes:
        raise DatasetError("need at least one item per class")
    rng = np.random.default_rng([seed, 0x71DE0])
    labels = np.arange(n) % classes
    items = np.empty((n, frames, image_size, image_size, 3))
    for i, label in enumerate(labels):
        pattern = MOTION_NAMES[label]
        bg = _noise_background(rng, image_size)
        radius = rng.uniform(0.12, 0.2) * image_size
        travel = rng.uniform(0.35, 0.55) * image_size
        # multiples of 1/64 keep positions exact under time reversal
        speed = np.round(travel / (frames - 1) * 64) / 64
        lo, hi = radius, image_size - radius
        span = speed * (frames - 1)
        if pattern == "left":
            start = (np.round(rng.uniform(lo + span, hi) * 64) / 64, np.round(rng.uniform(lo, hi) * 64) / 64)
        elif pattern == "right":
            start = (np.round(rng.uniform(lo, hi - span) * 64) / 64, np.round(rng.uniform(lo, hi) * 64) / 64)
        elif pattern == "up":
            start = (np.round(rng.uniform(lo, hi) * 64) / 64, np.round(rng.uniform(lo + span, hi) * 64) / 64)
        else:
            start = (0.0, 0.0)
        circ_r = speed * frames / (2 * np.pi)
        center = (rng.uniform(lo + circ_r, hi - circ_r), rng.uniform(lo + circ_r, hi - circ_r))
        pos = motion_positions(pattern, start, speed, frames, center, rng.uniform(0, 2 * np.pi))
        items[i] = render_trajectory(bg, pos, radius, _bright_color(rng))
    return Dataset("synthetic-video", items, labels,
                   {"dims": [image_size, image_size], "classes": classes, "seed": seed,
                    "frames": frames, "frame_rate": VIDEO_FRAME_RATE})


# data specs on the command line -------------------------------------------------------

_SYNTH_ARGS = {
    "synth-shapes": (synth_shapes, {"n": "n", "size": "image_size", "classes": "classes", "seed": "seed"}),
    "synth-video": (synth_video, {"n": "n", "frames": "frames", "size": "image_size", "classes": "classes",
                                  "seed": "seed"}),
}


def load_data_spec(spec: str) -> Dataset:
    """Build a dataset from a short spec string.

    Forms: ``synth-shapes:n=2000,size=24,classes=4,seed=0``,
    ``synth-video:n=800,frames=16,size=16,seed=0`` and ``idx:IMAGES,LABELS``.
    Omitted synthetic arguments take the generator defaults (``n`` is required).
    """
    kind, sep, rest = spec.partition(":")
    if kind == "idx":
        paths = [p for p in rest.split(",") if p]
        if len(paths) != 2:
            raise DatasetError(f"idx spec needs two paths, got {spec!r}")
        try:
            return load_idx(*paths)
        except OSError as exc:
            raise DatasetError(f"cannot read IDX data: {exc}") from exc
    if kind not in _SYNTH_ARGS:
        raise DatasetError(f"unknown data kind {kind!r}; use synth-shapes, synth-video or idx")
    fn, names = _SYNTH_ARGS[kind]
    kwargs = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq or key.strip() not in names:
            raise DatasetError(f"bad {kind} argument {item!r}; known: {sorted(names)}")
        try:
            kwargs[names[key.strip()]] = int(value)
        except ValueError as exc:
            raise DatasetError(f"{kind} argument {key} must be an integer") from exc
    if "n" not in kwargs:
        raise DatasetError(f"{kind} spec needs n=COUNT")
    return fn(**kwargs)
