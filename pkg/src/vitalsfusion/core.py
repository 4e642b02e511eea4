"""Domain types, tensor helpers and the repo-wide deterministic RNG.

Tensors are plain ``numpy.ndarray`` objects (float64 unless stated). Timestamps
are integer milliseconds since session start, stored as ``int64`` arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, IntegrityError, RangeError, ValidationError


class Modality(str, enum.Enum):
    FACE = "face"
    FINGER = "finger"


class SignalKind(str, enum.Enum):
    BVP = "bvp"
    SPO2 = "spo2"
    RESPIRATION = "rr"


class State(enum.IntEnum):
    """Protocol states: rest, post-exercise, rest, post-exercise with oxygen."""

    STATE1 = 1
    STATE2 = 2
    STATE3 = 3
    STATE4 = 4

    @property
    def dirname(self):
        return f"state{int(self)}"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            value = value.lower().removeprefix("state")
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise ValidationError(f"unknown protocol state {value!r}") from None


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def check_timestamps(ts, what="timestamps"):
    ts = np.asarray(ts)
    if ts.ndim != 1:
        raise DimensionError(f"{what} must be one-dimensional")
    if ts.size and ts[0] < 0:
        raise IntegrityError(f"{what} must be non-negative")
    if ts.size > 1 and np.any(np.diff(ts) <= 0):
        bad = int(np.argmax(np.diff(ts) <= 0))
        raise IntegrityError(
            f"{what} not strictly increasing at index {bad + 1} "
            f"({int(ts[bad])} -> {int(ts[bad + 1])} ms)"
        )


@dataclass(frozen=True, eq=False)
class TimestampedFrameSequence:
    """Video frames ``[N, H, W, 3]`` in [0, 1] with one timestamp per frame."""

    modality: Modality
    frames: np.ndarray
    timestamps: np.ndarray
    nominal_fps: float

    def __post_init__(self):
        frames = _frozen(self.frames, np.float64)
        ts = _frozen(self.timestamps, np.int64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise DimensionError(f"frames must be [N, H, W, 3], got {frames.shape}")
        if frames.shape[0] != ts.shape[0]:
            raise IntegrityError(
                f"{frames.shape[0]} frames but {ts.shape[0]} timestamps"
            )
        if not self.nominal_fps > 0:
            raise ValidationError("nominal_fps must be positive")
        check_timestamps(ts, f"{Modality(self.modality).value} timestamps")
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class SignalSeries:
    """A physiological channel sampled at (possibly irregular) timestamps."""

    kind: SignalKind
    values: np.ndarray
    timestamps: np.ndarray
    nominal_hz: float

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        ts = _frozen(self.timestamps, np.int64)
        if values.ndim != 1 or values.shape != ts.shape:
            raise DimensionError(
                f"values {values.shape} and timestamps {ts.shape} must be equal-length 1-D"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"{SignalKind(self.kind).value} series has non-finite values")
        if not self.nominal_hz > 0:
            raise ValidationError("nominal_hz must be positive")
        kind = SignalKind(self.kind)
        if kind is SignalKind.SPO2 and values.size and (values.min() < 0 or values.max() > 100):
            raise ValidationError("SpO2 values must lie in [0, 100]")
        check_timestamps(ts, f"{kind.value} timestamps")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class SessionMeta:
    subject_id: str
    state: State
    duration_s: float

    def __post_init__(self):
        object.__setattr__(self, "state", State.parse(self.state))
        if not self.duration_s > 0:
            raise ValidationError("duration_s must be positive")

    @property
    def key(self):
        return f"{self.subject_id}/{self.state.dirname}"


def tensor_new(shape, fill=0.0):
    """Return a float64 array of ``shape`` with every element equal to ``fill``."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise DimensionError(f"invalid tensor shape {shape}")
    return np.full(shape, float(fill), dtype=np.float64)


class Rng:
    """Seeded PCG64 generator (numpy's documented, platform-stable bit stream).

    Single-owner: do not share one instance between threads.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self):
        return self._gen

    def uniform(self, lo, hi, n):
        return rng_uniform(self, lo, hi, n)

    def normal(self, size, std=1.0):
        return self._gen.normal(0.0, std, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def child(self, *keys):
        """Independent generator derived from this seed and integer ``keys``."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state


def rng_uniform(rng, lo, hi, n):
    """Draw ``n`` values uniformly from ``[lo, hi)``."""
    if not lo < hi:
        raise RangeError(f"empty range [{lo}, {hi})")
    if n < 0:
        raise RangeError("n must be non-negative")
    return rng.generator.uniform(lo, hi, int(n))
