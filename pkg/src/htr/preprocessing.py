"""Canvas fitting, augmentation, transcript margins and batch assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dataset import Alphabet, DataError


@dataclass(frozen=True)
class CanvasSpec:
    height: int
    width: int

    def __post_init__(self):
        for v in (self.height, self.width):
            if v < 8 or v % 8:
                raise ValueError(f"canvas extents must be multiples of 8 (>= 8), got {self.height}x{self.width}")


PRESETS = {
    "line": CanvasSpec(128, 1024),
    "word": CanvasSpec(64, 256),
    "tiny": CanvasSpec(32, 256),
}


@dataclass
class AugmentParams:
    max_rotation_deg: float = 1.5
    max_shear: float = 0.1
    noise_sigma: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if min(self.max_rotation_deg, self.max_shear, self.noise_sigma) < 0:
            raise ValueError("augmentation parameters must be nonnegative")


class Placement(NamedTuple):
    top: int
    left: int
    height: int
    width: int


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    return img


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def fit_scale(h: int, w: int, spec: CanvasSpec) -> tuple[float, int, int]:
    """Scale factor and content size for an h×w image (scale 1 when it fits)."""
    if h <= spec.height and w <= spec.width:
        return 1.0, h, w
    s = min(spec.height / h, spec.width / w)
    nh = min(spec.height, max(1, int(round(h * s))))
    nw = min(spec.width, max(1, int(round(w * s))))
    return s, nh, nw


def fit_to_canvas(img: np.ndarray, spec: CanvasSpec) -> tuple[np.ndarray, Placement]:
    """Centre the image on a canvas filled with its median, shrinking only if too large."""
    img = _check_image(img)
    fill = float(np.median(img))
    _, nh, nw = fit_scale(*img.shape, spec)
    content = img if (nh, nw) == img.shape else resize_bilinear(img, nh, nw)
    top = (spec.height - nh) // 2
    left = (spec.width - nw) // 2
    canvas = np.full((spec.height, spec.width), fill)
    canvas[top : top + nh, left : left + nw] = content
    return canvas, Placement(top, left, nh, nw)


def stretch_to_canvas(img: np.ndarray, spec: CanvasSpec) -> np.ndarray:
    """Anisotropic resize to the full canvas (the aspect-ratio-ignoring baseline)."""
    return resize_bilinear(_check_image(img), spec.height, spec.width)


def _affine_fill(img: np.ndarray, matrix: np.ndarray, fill: float) -> np.ndarray:
    """Inverse-map every output pixel through ``matrix`` about the centre (bilinear)."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    inv = np.linalg.inv(matrix)
    dy, dx = ys - cy, xs - cx
    sy = inv[0, 0] * dy + inv[0, 1] * dx + cy
    sx = inv[1, 0] * dy + inv[1, 1] * dx + cx
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    val = (
        img[y0, x0] * (1 - fy) * (1 - fx)
        + img[y0, x1] * (1 - fy) * fx
        + img[y1, x0] * fy * (1 - fx)
        + img[y1, x1] * fy * fx
    )
    return np.where(inside, val, fill)


def augment(img: np.ndarray, params: AugmentParams, seed) -> np.ndarray:
    """Random rotation + horizontal shear about the centre, then Gaussian noise, clamped to [0, 1]."""
    img = _check_image(img)
    if not params.enabled:
        return img.copy()
    rng = np.random.default_rng(seed)
    angle = math.radians(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    shear = rng.uniform(-params.max_shear, params.max_shear)
    out = img
    if angle != 0.0 or shear != 0.0:
        # (row, col) coordinates: rotation then shear along columns
        rot = np.array([[math.cos(angle), math.sin(angle)], [-math.sin(angle), math.cos(angle)]])
        shr = np.array([[1.0, 0.0], [shear, 1.0]])
        out = _affine_fill(img, shr @ rot, float(np.median(img)))
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def pad_transcript(text: str, mode: str) -> str:
    """Add margin spaces for training; leave evaluation transcripts alone."""
    if not text.strip():
        raise DataError("empty transcript")
    if mode == "train":
        return " " + text + " "
    if mode == "eval":
        return text
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def strip_margins(text: str) -> str:
    return text.strip(" ")


@dataclass
class Batch:
    images: np.ndarray  # B×1×H×W
    labels: list[list[int]]
    lengths: list[int]
    texts: list[str]


def prepare_image(
    img: np.ndarray,
    spec: CanvasSpec,
    mode: str = "eval",
    augment_params: Optional[AugmentParams] = None,
    seed=None,
    resize_only: bool = False,
) -> np.ndarray:
    """Augment (train mode only) then fit to the canvas."""
    if mode == "train" and augment_params is not None and augment_params.enabled:
        img = augment(img, augment_params, seed)
    if resize_only:
        return stretch_to_canvas(img, spec)
    return fit_to_canvas(img, spec)[0]


def make_batch(
    samples: Sequence[tuple[np.ndarray, str]],
    spec: CanvasSpec,
    alphabet: Alphabet,
    mode: str = "train",
    augment_params: Optional[AugmentParams] = None,
    seeds: Optional[Sequence] = None,
    resize_only: bool = False,
    dtype=np.float32,
) -> Batch:
    """Stack canvases into B×1×H×W and encode (margin-padded) transcripts."""
    if not samples:
        raise DataError("cannot build an empty batch")
    images = np.empty((len(samples), 1, spec.height, spec.width), dtype=dtype)
    labels, texts = [], []
    for n, (img, text) in enumerate(samples):
        seed = None if seeds is None else seeds[n]
        images[n, 0] = prepare_image(img, spec, mode, augment_params, seed, resize_only)
        padded = pad_transcript(text, mode)
        bad = alphabet.missing(padded)
        if bad:
            raise DataError(f"sample {n} ({text!r}): character(s) {', '.join(map(repr, bad))} not in alphabet")
        labels.append(alphabet.encode(padded))
        texts.append(text)
    return Batch(images, labels, [len(l) for l in labels], texts)
