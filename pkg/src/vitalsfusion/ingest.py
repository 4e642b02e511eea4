"""Loading recordings from disk, multi-rate alignment and chunking.

On-disk layout of one session::

    <root>/<subject>/<state>/face/frame_000000.png ... + frames_timestamp.csv
    <root>/<subject>/<state>/finger/...                (same schema)
    <root>/<subject>/<state>/bvp.csv, spo2.csv, rr.csv   header ``timestamp_ms,value``

``frames_timestamp.csv`` has header ``frame,timestamp_ms``; ``frame`` is the
integer in the image file name. PNGs may be 8- or 16-bit RGB.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import (
    Modality,
    SessionMeta,
    SignalKind,
    State,
    SignalSeries,
    TimestampedFrameSequence,
    check_timestamps,
)
from .errors import (
    FormatError,
    InputError,
    IntegrityError,
    RangeError,
    SyncGapError,
    ValidationError,
)

FRAME_CSV = "frames_timestamp.csv"
FRAME_PATTERN = "frame_{:06d}.png"
SIGNAL_FILES = {SignalKind.BVP: "bvp.csv", SignalKind.SPO2: "spo2.csv", SignalKind.RESPIRATION: "rr.csv"}
DEFAULT_TOLERANCE_MS = 25
DEFAULT_CHUNK_LEN = 128


@dataclass(frozen=True, eq=False)
class SynchronizedSession:
    meta: SessionMeta
    face: TimestampedFrameSequence
    finger: TimestampedFrameSequence
    bvp_60hz: SignalSeries
    spo2_60hz: SignalSeries
    rr_60hz: SignalSeries

    def __post_init__(self):
        ts = self.face.timestamps
        for name in ("finger", "bvp_60hz", "spo2_60hz", "rr_60hz"):
            other = getattr(self, name).timestamps
            if other.shape != ts.shape or np.any(other != ts):
                raise IntegrityError(f"{name} timestamps differ from the face clock")

    def __len__(self):
        return len(self.face)

    @property
    def timestamps(self):
        return self.face.timestamps


@dataclass(frozen=True, eq=False)
class Chunk:
    face_clip: np.ndarray  # [T, H, W, 3]
    finger_clip: np.ndarray  # [T, H, W, 3]
    bvp_label: np.ndarray  # [T]
    spo2_label: np.ndarray  # [T]
    meta: SessionMeta
    start_index: int


def _read_csv_rows(path, header):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if [h.strip() for h in got] != header:
            raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {lineno} has {len(row)} fields")
            rows.append((lineno, row))
    return rows


def _read_png(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot decode image {path}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"{path}: expected 3-channel image, got shape {img.shape}")
    scale = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}.get(img.dtype)
    if scale is None:
        raise FormatError(f"{path}: unsupported pixel type {img.dtype}")
    return img[:, :, ::-1].astype(np.float64) / scale


def load_frame_sequence(directory, modality, nominal_fps=None):
    """Load a frame directory into a :class:`TimestampedFrameSequence`.

    Frames are ordered by timestamp. The number of PNG files must equal the
    number of CSV rows. ``nominal_fps`` defaults to the median inter-frame rate.
    """
    directory = Path(directory)
    rows = _read_csv_rows(directory / FRAME_CSV, ["frame", "timestamp_ms"])
    index, ts = [], []
    for lineno, (i, t) in rows:
        try:
            index.append(int(i))
            ts.append(int(t))
        except ValueError:
            raise FormatError(f"{directory / FRAME_CSV}: unparsable row {lineno}") from None
    pngs = sorted(p for p in os.listdir(directory) if p.endswith(".png"))
    if len(pngs) != len(rows):
        raise IntegrityError(
            f"{directory}: {len(pngs)} frame images but {len(rows)} timestamp rows"
        )
    check_timestamps(ts, f"{directory / FRAME_CSV}")
    frames = []
    for i in index:
        p = directory / FRAME_PATTERN.format(i)
        if not p.is_file():
            raise IntegrityError(f"timestamp row references missing frame {p.name}")
        frames.append(_read_png(p))
    if not frames:
        raise IntegrityError(f"{directory}: no frames")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise IntegrityError(f"{directory}: frames differ in size {sorted(shapes)}")
    ts = np.asarray(ts, dtype=np.int64)
    if nominal_fps is None:
        nominal_fps = 1000.0 / np.median(np.diff(ts)) if len(ts) > 1 else 60.0
    return TimestampedFrameSequence(Modality(modality), np.stack(frames), ts, float(nominal_fps))


def load_signal_csv(path, kind, nominal_hz=None):
    """Read a ``timestamp_ms,value`` CSV into a :class:`SignalSeries`."""
    kind = SignalKind(kind)
    rows = _read_csv_rows(path, ["timestamp_ms", "value"])
    ts, values = [], []
    for lineno, (t, v) in rows:
        try:
            ts.append(int(t))
            values.append(float(v))
        except ValueError:
            raise FormatError(f"{path}: unparsable row {lineno}: {t!r},{v!r}") from None
        if not np.isfinite(values[-1]):
            raise FormatError(f"{path}: non-finite value in row {lineno}")
        if kind is SignalKind.SPO2 and not 0.0 <= values[-1] <= 100.0:
            raise ValidationError(f"{path}: SpO2 value {values[-1]} out of [0, 100] in row {lineno}")
    if not rows:
        raise FormatError(f"{path}: no samples")
    ts = np.asarray(ts, dtype=np.int64)
    if nominal_hz is None:
        nominal_hz = 1000.0 / np.median(np.diff(ts)) if len(ts) > 1 else 1.0
    return SignalSeries(kind, np.asarray(values), ts, float(nominal_hz))


def resample_linear(series, target_hz, target_timestamps):
    """Piecewise-linear interpolation of ``series`` at ``target_timestamps``.

    Targets outside the source time span are rejected rather than extrapolated.
    """
    if len(series) < 2:
        raise InputError("resampling needs at least two source samples")
    target = np.asarray(target_timestamps, dtype=np.int64)
    src_t = series.timestamps
    if target.size and (target.min() < src_t[0] or target.max() > src_t[-1]):
        raise RangeError(
            f"target span [{int(target.min())}, {int(target.max())}] ms exceeds "
            f"source span [{int(src_t[0])}, {int(src_t[-1])}] ms"
        )
    values = np.interp(target.astype(np.float64), src_t.astype(np.float64), series.values)
    return SignalSeries(series.kind, values, target, float(target_hz))


def synchronize(face, finger, bvp, spo2, rr, tolerance_ms=DEFAULT_TOLERANCE_MS, meta=None):
    """Align all streams onto the face-camera clock.

    Face frames outside the common time span are trimmed; each remaining face
    timestamp is matched to the nearest finger frame (must be within
    ``tolerance_ms``) and every physiological signal is linearly resampled onto
    the face timestamps.
    """
    signals = (bvp, spo2, rr)
    start = max([int(face.timestamps[0]), int(finger.timestamps[0]) - tolerance_ms]
                + [int(s.timestamps[0]) for s in signals])
    end = min([int(face.timestamps[-1]), int(finger.timestamps[-1]) + tolerance_ms]
              + [int(s.timestamps[-1]) for s in signals])
    if end - start < 1000:
        raise InputError(
            f"streams overlap for {max(end - start, 0)} ms; at least 1000 ms required"
        )
    keep = (face.timestamps >= start) & (face.timestamps <= end)
    master = face.timestamps[keep]

    ft = finger.timestamps
    pos = np.searchsorted(ft, master)
    left = np.clip(pos - 1, 0, len(ft) - 1)
    right = np.clip(pos, 0, len(ft) - 1)
    pick = np.where(np.abs(ft[left] - master) <= np.abs(ft[right] - master), left, right)
    miss = np.abs(ft[pick] - master) > tolerance_ms
    if np.any(miss):
        idx = np.flatnonzero(miss)
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate([[idx[0]], idx[breaks + 1]])
        stops = np.concatenate([idx[breaks], [idx[-1]]])
        gaps = [(int(master[a]), int(master[b])) for a, b in zip(starts, stops)]
        desc = ", ".join(f"[{a}, {b}] ms" for a, b in gaps)
        raise SyncGapError(
            f"no finger frame within {tolerance_ms} ms of face timestamps in {desc}", gaps
        )

    fps = face.nominal_fps
    face_s = TimestampedFrameSequence(face.modality, face.frames[keep], master, fps)
    finger_s = TimestampedFrameSequence(finger.modality, finger.frames[pick], master, fps)
    if meta is None:
        meta = SessionMeta("unknown", 1, max((master[-1] - master[0]) / 1000.0, 1e-3))
    return SynchronizedSession(
        meta=meta,
        face=face_s,
        finger=finger_s,
        bvp_60hz=resample_linear(bvp, fps, master),
        spo2_60hz=resample_linear(spo2, fps, master),
        rr_60hz=resample_linear(rr, fps, master),
    )


def session_dir(root, subject_id, state):
    return Path(root) / str(subject_id) / State.parse(state).dirname


def load_session(path, tolerance_ms=DEFAULT_TOLERANCE_MS, meta=None):
    """Load and synchronize one ``<subject>/<state>`` directory."""
    path = Path(path)
    face = load_frame_sequence(path / "face", Modality.FACE)
    finger = load_frame_sequence(path / "finger", Modality.FINGER)
    bvp = load_signal_csv(path / SIGNAL_FILES[SignalKind.BVP], SignalKind.BVP)
    spo2 = load_signal_csv(path / SIGNAL_FILES[SignalKind.SPO2], SignalKind.SPO2)
    rr = load_signal_csv(path / SIGNAL_FILES[SignalKind.RESPIRATION], SignalKind.RESPIRATION)
    if meta is None:
        duration = (face.timestamps[-1] - face.timestamps[0]) / 1000.0 + 1.0 / face.nominal_fps
        meta = SessionMeta(path.parent.name, path.name, float(duration))
    return synchronize(face, finger, bvp, spo2, rr, tolerance_ms, meta=meta)


def discover_sessions(root):
    """List ``(subject_id, State, path)`` for every session under ``root``, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset root {root} does not exist")
    found = []
    for subj in sorted(p for p in root.iterdir() if p.is_dir()):
        for st in sorted(p for p in subj.iterdir() if p.is_dir() and p.name.startswith("state")):
            found.append((subj.name, State.parse(st.name), st))
    return found


def chunk_session(session, chunk_len=DEFAULT_CHUNK_LEN, stride=None):
    """Cut a session into fixed-length windows starting at ``0, stride, 2*stride, ...``."""
    stride = chunk_len if stride is None else stride
    n = len(session)
    if chunk_len < 1 or stride < 1:
        raise InputError("chunk_len and stride must be >= 1")
    if chunk_len > n:
        raise InputError(f"chunk_len {chunk_len} exceeds session length {n}")
    chunks = []
    for start in range(0, n - chunk_len + 1, stride):
        sl = slice(start, start + chunk_len)
        chunks.append(
            Chunk(
                face_clip=session.face.frames[sl],
                finger_clip=session.finger.frames[sl],
                bvp_label=session.bvp_60hz.values[sl],
                spo2_label=session.spo2_60hz.values[sl],
                meta=session.meta,
                start_index=start,
            )
        )
    return chunks
