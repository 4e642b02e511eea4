"""ROI cropping, resizing and differential normalization of clips and labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError

EPS = 1e-7
DEFAULT_SIZE = 72


@dataclass(frozen=True)
class Roi:
    x: int
    y: int
    w: int
    h: int

    def check(self, height, width):
        if self.w <= 0 or self.h <= 0:
            raise InputError(f"ROI must have positive size, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise InputError(f"ROI {self} exceeds frame {height}x{width}")

    @classmethod
    def full(cls, height, width):
        return cls(0, 0, width, height)

    @classmethod
    def centered(cls, height, width, fraction=0.6):
        """Centered square whose side is ``fraction`` of the short frame side."""
        side = max(1, int(round(fraction * min(height, width))))
        return cls((width - side) // 2, (height - side) // 2, side, side)


def _axis_weights(n_in, n_out):
    # corner-aligned: output i samples source coordinate i*(n_in-1)/(n_out-1)
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def crop_and_resize(clip, roi, out_size):
    """Crop every frame of ``clip`` ``[T, H, W, C]`` to ``roi`` and resize to ``out_size``.

    Bilinear interpolation with corner-aligned sampling, so the four corner
    pixels of the crop map exactly onto the output corners.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4:
        raise DimensionError(f"clip must be [T, H, W, C], got {clip.shape}")
    if out_size < 8:
        raise InputError("out_size must be >= 8")
    roi.check(clip.shape[1], clip.shape[2])
    crop = clip[:, roi.y : roi.y + roi.h, roi.x : roi.x + roi.w]
    if roi.h == out_size and roi.w == out_size:
        return crop.copy()
    return resize_bilinear(crop, out_size, out_size)


def resize_bilinear(clip, out_h, out_w):
    """Corner-aligned bilinear resize of ``[T, H, W, C]`` to ``[T, out_h, out_w, C]``."""
    clip = np.asarray(clip, dtype=np.float64)
    y0, y1, fy = _axis_weights(clip.shape[1], out_h)
    x0, x1, fx = _axis_weights(clip.shape[2], out_w)
    rows = clip[:, y0] * (1.0 - fy)[None, :, None, None] + clip[:, y1] * fy[None, :, None, None]
    return rows[:, :, x0] * (1.0 - fx)[None, None, :, None] + rows[:, :, x1] * fx[None, None, :, None]


def diff_normalize_video(clip, eps=EPS):
    """Normalized frame difference ``(x[t+1]-x[t]) / (x[t+1]+x[t]+eps)`` scaled by its std.

    Returns ``T-1`` frames. Non-finite entries become 0. A clip whose
    difference has zero std carries no temporal signal and maps to zeros.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim < 1 or clip.shape[0] < 2:
        raise InputError("diff normalization needs at least two frames")
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (clip[1:] - clip[:-1]) / (clip[1:] + clip[:-1] + eps)
    d[~np.isfinite(d)] = 0.0
    std = d.std()
    if not (std > 0 and np.isfinite(std)):
        return np.zeros_like(d)
    d = d / std
    d[~np.isfinite(d)] = 0.0
    return d


def diff_normalize_label(bvp):
    """First difference of ``bvp`` divided by its (population) std."""
    bvp = np.asarray(bvp, dtype=np.float64)
    if bvp.ndim != 1 or bvp.shape[0] < 2:
        raise InputError("label needs at least two samples")
    d = np.diff(bvp)
    std = d.std()
    if std > 0:
        d = d / std
    return d


def standardize(x):
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if std == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / std


@dataclass(frozen=True, eq=False)
class Sample:
    """A model-ready chunk: diff-normalized clips ``[T-1, S, S, 3]`` and labels."""

    face: np.ndarray
    finger: np.ndarray
    bvp: np.ndarray  # diff-normalized, length T-1
    spo2: float  # chunk mean, percent
    subject_id: str
    state: int
    start_index: int

    @property
    def session_key(self):
        return f"{self.subject_id}/state{self.state}"


def default_rois(height, width, face_fraction=0.6):
    return {"face": Roi.centered(height, width, face_fraction), "finger": Roi.full(height, width)}


def prepare_chunk(chunk, size=DEFAULT_SIZE, face_roi=None, finger_roi=None, dtype=np.float64):
    """Turn a raw :class:`~vitalsfusion.ingest.Chunk` into a :class:`Sample`."""
    h, w = chunk.face_clip.shape[1:3]
    face_roi = face_roi or Roi.centered(h, w)
    fh, fw = chunk.finger_clip.shape[1:3]
    finger_roi = finger_roi or Roi.full(fh, fw)
    face = diff_normalize_video(crop_and_resize(chunk.face_clip, face_roi, size))
    finger = diff_normalize_video(crop_and_resize(chunk.finger_clip, finger_roi, size))
    return Sample(
        face=face.astype(dtype),
        finger=finger.astype(dtype),
        bvp=diff_normalize_label(chunk.bvp_label),
        spo2=float(np.mean(chunk.spo2_label)),
        subject_id=chunk.meta.subject_id,
        state=int(chunk.meta.state),
        start_index=int(chunk.start_index),
    )
