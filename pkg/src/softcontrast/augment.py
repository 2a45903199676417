"""Seeded image and clip augmentations.

Images are float arrays shaped ``(..., H, W, 3)`` with values in ``[0, 1]``.
Any leading axes (for instance the frame axis of a clip) share one draw of
the random parameters, so a clip is cropped, flipped and colour-jittered
consistently across its frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
SOLARIZE_THRESHOLD = 0.5
BLUR_SIGMA_RANGE = (0.1, 2.0)
CROP_RATIO_RANGE = (3.0 / 4.0, 4.0 / 3.0)


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    crop_prob: float = 1.0
    flip_prob: float = 0.5
    color_jitter_prob: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0
    color_drop_prob: float = 0.0
    blur_prob: float = 0.0
    solarize_prob: float = 0.0
    crop_scale_range: tuple[float, float] = (0.2, 1.0)

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_prob"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise AugmentationError(f"{f.name} must lie in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise AugmentationError(f"{name} intensity must be >= 0")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentationError(f"crop scale range must lie in (0, 1], got {self.crop_scale_range}")

    def with_color_strength(self, strength: float) -> AugmentationSpec:
        """Rescale jitter intensities; the presets correspond to strength 0.5."""
        k = strength / 0.5
        return replace(self, brightness=self.brightness * k, contrast=self.contrast * k,
                       saturation=self.saturation * k, hue=min(0.5, self.hue * k))


_STRONG_COLOR = dict(color_jitter_prob=0.8, brightness=0.4, contrast=0.4, hue=0.1, color_drop_prob=0.2)

PRESETS: dict[str, AugmentationSpec] = {
    "weak": AugmentationSpec(),
    "strong": AugmentationSpec(**_STRONG_COLOR, saturation=0.4, blur_prob=0.5, solarize_prob=0.0),
    "strong-alpha": AugmentationSpec(**_STRONG_COLOR, saturation=0.2, blur_prob=1.0, solarize_prob=0.0),
    "strong-beta": AugmentationSpec(**_STRONG_COLOR, saturation=0.2, blur_prob=0.1, solarize_prob=0.2),
    "strong-gamma": AugmentationSpec(**_STRONG_COLOR, saturation=0.2, blur_prob=0.5, solarize_prob=0.2),
}
_ALIASES = {"strong-α": "strong-alpha", "strong-β": "strong-beta", "strong-γ": "strong-gamma"}


def preset(name: str, crop_scale_range: tuple[float, float] | None = None) -> AugmentationSpec:
    key = _ALIASES.get(name, name)
    if key not in PRESETS:
        raise AugmentationError(f"unknown augmentation preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[key]
    return replace(spec, crop_scale_range=tuple(crop_scale_range)) if crop_scale_range else spec


# geometry -------------------------------------------------------------------

def sample_crop_box(height: int, width: int, scale_range, rng: np.random.Generator,
                    ratio_range=CROP_RATIO_RANGE) -> tuple[int, int, int, int]:
    """Return ``(top, left, h, w)`` of a random crop.

    Tries ten times to hit an area fraction from ``scale_range`` with a
    log-uniform aspect ratio; otherwise falls back to the largest centred
    crop whose aspect ratio is within range.
    """
    area = height * width
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(scale_range[0], scale_range[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < ratio_range[0]:
        w, h = width, int(round(width / ratio_range[0]))
    elif in_ratio > ratio_range[1]:
        h, w = height, int(round(height * ratio_range[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = coords(h, out_h)
    x0, x1, wx = coords(w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[..., y0, :, :]
    bot = img[..., y1, :, :]
    rows = top * (1 - wy) + bot * wy
    return rows[..., x0, :] * (1 - wx) + rows[..., x1, :] * wx


def random_resized_crop(img: np.ndarray, scale_range, out_size: int, rng: np.random.Generator,
                        ratio_range=CROP_RATIO_RANGE) -> np.ndarray:
    if out_size < 1:
        raise AugmentationError("out_size must be >= 1")
    h, w = img.shape[-3], img.shape[-2]
    if h < 1 or w < 1:
        raise AugmentationError("image is empty")
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise AugmentationError(f"scale range must lie in (0, 1], got {scale_range}")
    top, left, ch, cw = sample_crop_box(h, w, scale_range, rng, ratio_range)
    crop = img[..., top:top + ch, left:left + cw, :]
    return resize_bilinear(crop, out_size, out_size)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., :, ::-1, :].copy()


# colour -----------------------------------------------------------------------

def grayscale(img: np.ndarray) -> np.ndarray:
    """Luma image replicated over the three channels."""
    g = img @ LUMA
    return np.repeat(g[..., None], 3, axis=-1)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = (img @ LUMA).mean(axis=(-2, -1), keepdims=True)[..., None]
    return np.clip(factor * img + (1.0 - factor) * m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    g = grayscale(img)
    return np.clip(factor * img + (1.0 - factor) * g, 0.0, 1.0)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, (g - b) / safe % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns of the colour circle."""
    if shift == 0.0:
        return img.copy()
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Apply the four colour adjustments in a random order.

    Multiplicative factors come from ``U[max(0, 1-s), 1+s]``, the hue shift
    from ``U[-hue, hue]``. Zero intensity skips the adjustment.
    """
    out = img
    for op in rng.permutation(4):
        if op == 0 and brightness > 0:
            out = adjust_brightness(out, rng.uniform(max(0.0, 1 - brightness), 1 + brightness))
        elif op == 1 and contrast > 0:
            out = adjust_contrast(out, rng.uniform(max(0.0, 1 - contrast), 1 + contrast))
        elif op == 2 and saturation > 0:
            out = adjust_saturation(out, rng.uniform(max(0.0, 1 - saturation), 1 + saturation))
        elif op == 3 and hue > 0:
            out = adjust_hue(out, rng.uniform(-hue, hue))
    return out


def solarize(img: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise AugmentationError("sigma must be > 0")
    radius = int(math.ceil(2 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_with_sigma(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirrored borders (edge pixel repeated).

    Half-sample mirroring keeps the total intensity of each channel unchanged.
    """
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (-3, -2):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for offset, weight in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + n)
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


def gaussian_blur(img: np.ndarray, rng: np.random.Generator, sigma_range=BLUR_SIGMA_RANGE) -> np.ndarray:
    return blur_with_sigma(img, rng.uniform(*sigma_range))


def apply_image_pipeline(img: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator,
                         out_size: int | None = None) -> np.ndarray:
    """Crop, flip, colour jitter, colour drop, blur, solarize; each fired by its probability."""
    out_size = out_size or img.shape[-2]
    out = img
    if rng.uniform() < spec.crop_prob:
        out = random_resized_crop(out, spec.crop_scale_range, out_size, rng)
    else:
        out = resize_bilinear(out, out_size, out_size)
    if rng.uniform() < spec.flip_prob:
        out = hflip(out)
    if rng.uniform() < spec.color_jitter_prob:
        out = color_jitter(out, spec.brightness, spec.contrast, spec.saturation, spec.hue, rng)
    if rng.uniform() < spec.color_drop_prob:
        out = grayscale(out)
    if rng.uniform() < spec.blur_prob:
        out = gaussian_blur(out, rng)
    if rng.uniform() < spec.solarize_prob:
        out = solarize(out)
    return np.clip(out, 0.0, 1.0)


# clips --------------------------------------------------------------------------

@dataclass
class VideoClip:
    frames: np.ndarray  # T×H×W×3
    frame_rate: float
    source_span: tuple[float, float] = (0.0, 0.0)  # (start, duration) in seconds

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[-1] != 3:
            raise AugmentationError(f"clip frames must be T×H×W×3 with T >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class TemporalSpec:
    clip_duration_s: float = 1.0
    frames_per_clip: int = 8
    jitter_factor: float = 0.0
    reverse_prob: float = 0.0
    rgb_diff_prob: float = 0.0

    def __post_init__(self):
        if self.jitter_factor < 0 or self.jitter_factor >= 1:
            raise AugmentationError("jitter_factor must lie in [0, 1)")
        for name in ("reverse_prob", "rgb_diff_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise AugmentationError(f"{name} must lie in [0, 1]")
        if self.frames_per_clip < 1 or self.clip_duration_s <= 0:
            raise AugmentationError("clip needs a positive duration and at least one frame")


def even_indices(span: int, count: int) -> np.ndarray:
    """``count`` indices evenly spread over ``[0, span-1]``, both ends included."""
    if count == 1:
        return np.zeros(1, dtype=int)
    return np.rint(np.linspace(0, span - 1, count)).astype(int)


def _span_frames(duration_s: float, video: VideoClip) -> int:
    return max(1, int(round(duration_s * video.frame_rate)))


def sample_clip(video: VideoClip, spec: TemporalSpec, rng: np.random.Generator) -> VideoClip:
    """Draw a jittered-duration span at a random start and keep evenly spaced frames."""
    longest = _span_frames(spec.clip_duration_s * (1 + spec.jitter_factor), video)
    if longest > video.num_frames:
        raise AugmentationError(
            f"video of {video.num_frames} frames is shorter than the longest clip ({longest} frames)")
    u = rng.uniform(1 - spec.jitter_factor, 1 + spec.jitter_factor)
    span = _span_frames(spec.clip_duration_s * u, video)
    start = int(rng.integers(0, video.num_frames - span + 1))
    idx = start + even_indices(span, spec.frames_per_clip)
    return VideoClip(video.frames[idx], video.frame_rate,
                     (start / video.frame_rate, span / video.frame_rate))


def center_clip(video: VideoClip, spec: TemporalSpec) -> VideoClip:
    """Deterministic clip of nominal duration centred in the video."""
    span = min(_span_frames(spec.clip_duration_s, video), video.num_frames)
    start = (video.num_frames - span) // 2
    idx = start + even_indices(span, spec.frames_per_clip)
    return VideoClip(video.frames[idx], video.frame_rate,
                     (start / video.frame_rate, span / video.frame_rate))


def rgb_difference(clip: VideoClip) -> VideoClip:
    """Grey-level temporal difference re-centred at 0.5; last frame repeated."""
    if clip.num_frames < 2:
        raise AugmentationError("rgb_difference needs at least two frames")
    g = clip.frames @ LUMA
    d = np.clip(0.5 + 0.5 * (g[1:] - g[:-1]), 0.0, 1.0)
    d = np.concatenate([d, d[-1:]], axis=0)
    return VideoClip(np.repeat(d[..., None], 3, axis=-1), clip.frame_rate, clip.source_span)


def reverse_frames(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.frames[::-1].copy(), clip.frame_rate, clip.source_span)


def apply_clip_pipeline(video: VideoClip, spatial: AugmentationSpec, temporal: TemporalSpec,
                        rng: np.random.Generator, out_size: int | None = None) -> np.ndarray:
    """Sample a clip, augment it spatially, then maybe RGB-difference and reverse it."""
    clip = sample_clip(video, temporal, rng)
    frames = apply_image_pipeline(clip.frames, spatial, rng, out_size)
    clip = VideoClip(frames, clip.frame_rate, clip.source_span)
    if rng.uniform() < temporal.rgb_diff_prob:
        clip = rgb_difference(clip)
    if rng.uniform() < temporal.reverse_prob:
        clip = reverse_frames(clip)
    return clip.frames
