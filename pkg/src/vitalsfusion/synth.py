"""Synthetic face/finger recordings with known BVP, HR and SpO2.

Pixel model inside the signal region, per colour channel ``c``::

    I_c(t) = base_c * (1 + k_c(t) * s(t)) + noise

``s`` is the unit-variance pulse waveform from :func:`gen_bvp`. ``k_c`` is the
AC/DC amplitude of channel ``c``: green has ``k_g``, blue ``0.5 * k_g`` and red
``R(t) * k_g`` with the ratio of ratios ``R = (110 - SpO2) / 25``, i.e.
``SpO2 = 110 - 25 R``. Outside the region pixels are a static random texture
plus noise. The finger stream fills the whole frame with a 3x larger ``k_g``.

Frames are written as 16-bit RGB PNGs so the closed-form inversion survives
quantization.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .core import Rng, State
from .errors import InputError
from .ingest import FRAME_CSV, FRAME_PATTERN

RATIO_OFFSET = 110.0
RATIO_SLOPE = 25.0
HARMONIC = 0.3
WAVE_SCALE = 1.0 / np.sqrt((1.0 + HARMONIC**2) / 2.0)
FACE_BASE = (0.55, 0.40, 0.33)
FINGER_BASE = (0.75, 0.35, 0.30)
FINGER_GAIN = 3.0
BVP_HZ = 20.0
SPO2_HZ = 1.0
RR_HZ = 50.0
RR_FREQ = 0.25
FULL_RES = (720, 1280)


def ratio_from_spo2(spo2):
    return (RATIO_OFFSET - np.asarray(spo2, dtype=np.float64)) / RATIO_SLOPE


def spo2_from_ratio(r):
    return RATIO_OFFSET - RATIO_SLOPE * np.asarray(r, dtype=np.float64)


def profile_at(knots, t):
    """Evaluate a piecewise-linear profile ``[(t_s, value), ...]`` (held constant outside)."""
    kt, kv = np.asarray(knots, dtype=np.float64).T
    return np.interp(np.asarray(t, dtype=np.float64), kt, kv)


def profile_integral(knots, t):
    """Exact integral of the piecewise-linear profile from 0 to ``t``."""
    kt, kv = np.asarray(knots, dtype=np.float64).T
    if kt[0] > 0:
        kt = np.concatenate([[0.0], kt])
        kv = np.concatenate([[kv[0]], kv])
    t = np.asarray(t, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(np.diff(kt) * (kv[1:] + kv[:-1]) / 2.0)])
    k = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, len(kt) - 1)
    return cum[k] + (t - kt[k]) * (kv[k] + profile_at(list(zip(kt, kv)), t)) / 2.0


def pulse_phase(hr_profile, t, phase0=0.0):
    """Phase ``phase0 + 2*pi * integral(hr / 60)`` of the pulse at times ``t`` (s)."""
    return phase0 + 2.0 * np.pi * profile_integral(hr_profile, t) / 60.0


def bvp_waveform(hr_profile, t, phase0=0.0):
    phi = pulse_phase(hr_profile, t, phase0)
    return WAVE_SCALE * (np.sin(phi) + HARMONIC * np.sin(2.0 * phi))


def _check_profile(knots, lo, hi, what):
    arr = np.asarray(knots, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
        raise InputError(f"{what} profile must be a list of (time_s, value) pairs")
    if np.any(np.diff(arr[:, 0]) <= 0) or arr[0, 0] < 0:
        raise InputError(f"{what} profile times must be non-negative and increasing")
    if arr[:, 1].min() < lo or arr[:, 1].max() > hi:
        raise InputError(f"{what} profile must stay within [{lo}, {hi}]")


def gen_bvp(hr_profile, fs, duration, seed=0):
    """Pulse waveform ``sin(phi) + 0.3 sin(2 phi)`` scaled to unit variance.

    ``phi`` integrates the HR profile exactly; the seed sets the initial phase.
    """
    _check_profile(hr_profile, 40.0, 190.0, "HR")
    phase0 = Rng(seed).uniform(0.0, 2.0 * np.pi, 1)[0]
    t = np.arange(int(round(duration * fs))) / fs
    return bvp_waveform(hr_profile, t, phase0)


@dataclass(frozen=True)
class SynthConfig:
    hr_profile: tuple = ((0.0, 75.0),)
    spo2_profile: tuple = ((0.0, 96.0),)
    noise_std: float = 0.0
    frame_size: int = 64
    duration_s: float = 12.0
    seed: int = 0
    roi_fraction: float = 0.6
    fps: float = 60.0
    face_amplitude: float = 0.03
    face_noise_std: float | None = None
    finger_noise_std: float | None = None
    amplitude_coupling: float = 0.0
    face_base: tuple = FACE_BASE
    finger_base: tuple = FINGER_BASE
    full_resolution: bool = False
    subject_id: str = "s01"
    state: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hr_profile", tuple(tuple(map(float, k)) for k in self.hr_profile))
        object.__setattr__(self, "spo2_profile", tuple(tuple(map(float, k)) for k in self.spo2_profile))
        object.__setattr__(self, "face_base", tuple(map(float, self.face_base)))
        object.__setattr__(self, "finger_base", tuple(map(float, self.finger_base)))
        _check_profile(self.hr_profile, 40.0, 190.0, "HR")
        _check_profile(self.spo2_profile, 80.0, 100.0, "SpO2")
        if self.duration_s < 10:
            raise InputError("duration_s must be >= 10")
        if self.noise_std < 0 or self.frame_size < 8 or not 0 < self.roi_fraction <= 1:
            raise InputError("invalid noise_std, frame_size or roi_fraction")

    @property
    def frame_shape(self):
        return FULL_RES if self.full_resolution else (self.frame_size, self.frame_size)

    @property
    def n_frames(self):
        return int(round(self.duration_s * self.fps))

    def frame_timestamps(self):
        return np.round(np.arange(self.n_frames) * 1000.0 / self.fps).astype(np.int64)

    def phase0(self):
        return float(Rng(self.seed).uniform(0.0, 2.0 * np.pi, 1)[0])

    def stream(self, modality):
        """``(base, green_amplitude_scale, noise_std, roi)`` for one camera."""
        h, w = self.frame_shape
        if modality == "face":
            side = max(1, int(round(self.roi_fraction * min(h, w))))
            roi = ((w - side) // 2, (h - side) // 2, side, side)
            noise = self.noise_std if self.face_noise_std is None else self.face_noise_std
            return self.face_base, 1.0, noise, roi
        noise = self.noise_std if self.finger_noise_std is None else self.finger_noise_std
        return self.finger_base, FINGER_GAIN, noise, (0, 0, w, h)

    def green_amplitude(self, t):
        spo2 = profile_at(self.spo2_profile, t)
        return self.face_amplitude * (1.0 + self.amplitude_coupling * (spo2 - 95.0) / 10.0)

    def to_dict(self):
        return asdict(self)


def channel_amplitudes(config, t, gain=1.0):
    """Per-frame AC/DC amplitudes ``[N, 3]`` (R, G, B) at times ``t`` seconds."""
    kg = gain * config.green_amplitude(t)
    r = ratio_from_spo2(profile_at(config.spo2_profile, t))
    return np.stack([r * kg, kg, 0.5 * kg], axis=1)


def render_frames(config, modality):
    """Yield the quantized ``uint16`` frames ``[H, W, 3]`` (RGB) of one camera."""
    h, w = config.frame_shape
    base, gain, noise_std, (rx, ry, rw, rh) = config.stream(modality)
    stream_id = 0 if modality == "face" else 1
    rng = Rng(config.seed).child(stream_id)
    texture = rng.uniform(0.15, 0.65, h * w * 3).reshape(h, w, 3)
    t = config.frame_timestamps() / 1000.0
    s = bvp_waveform(config.hr_profile, t, config.phase0())
    amp = channel_amplitudes(config, t, gain)
    base = np.asarray(base)
    for i in range(len(t)):
        frame = texture.copy()
        frame[ry : ry + rh, rx : rx + rw] = base * (1.0 + amp[i] * s[i])
        if noise_std > 0:
            frame += rng.normal((h, w, 3), noise_std)
        yield np.round(np.clip(frame, 0.0, 1.0) * 65535.0).astype(np.uint16)


def _write_signal(path, ts_ms, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_ms", "value"])
        for t, v in zip(ts_ms, values):
            w.writerow([int(t), repr(float(v))])


def _signal_times(duration_s, hz):
    n = int(np.ceil(duration_s * hz - 1e-9))
    return np.round(np.arange(n + 1) * 1000.0 / hz).astype(np.int64)


def render_session(config, out_dir):
    """Write one session (``face/``, ``finger/``, ``bvp.csv``, ``spo2.csv``, ``rr.csv``).

    Ground truth is sampled like the real devices: BVP at 20 Hz, SpO2 at 1 Hz
    (sample-and-hold of the profile), respiration at 50 Hz. All signal files
    cover the full video span.
    """
    out = Path(out_dir)
    ts = config.frame_timestamps()
    for modality in ("face", "finger"):
        d = out / modality
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(render_frames(config, modality)):
            ok = cv2.imwrite(str(d / FRAME_PATTERN.format(i)), frame[:, :, ::-1],
                             [cv2.IMWRITE_PNG_COMPRESSION, 1])
            if not ok:
                raise OSError(f"cannot write frame into {d}")
        with open(d / FRAME_CSV, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "timestamp_ms"])
            for i, t in enumerate(ts):
                w.writerow([i, int(t)])

    phase0 = config.phase0()
    t_bvp = _signal_times(config.duration_s, BVP_HZ)
    _write_signal(out / "bvp.csv", t_bvp, bvp_waveform(config.hr_profile, t_bvp / 1000.0, phase0))
    t_spo2 = _signal_times(config.duration_s, SPO2_HZ)
    _write_signal(out / "spo2.csv", t_spo2, profile_at(config.spo2_profile, t_spo2 / 1000.0))
    t_rr = _signal_times(config.duration_s, RR_HZ)
    _write_signal(out / "rr.csv", t_rr, np.sin(2.0 * np.pi * RR_FREQ * t_rr / 1000.0))
    with open(out / "synth.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


def invert_spo2(red, green, dc=None, t=None, window=None):
    """Ratio-of-ratios SpO2 estimate from red/green intensity traces.

    Each window fits ``red_ac / red_dc = R * green_ac / green_dc`` by least
    squares, so ``R`` is the green-power-weighted mean over the window. ``dc``
    is the ``(red, green)`` baseline (defaults to the trace means). Returns
    ``(t_eff, spo2)``: the green-power-weighted time of each window and its
    estimate; without ``window`` the whole trace is one window.
    """
    red = np.asarray(red, dtype=np.float64)
    green = np.asarray(green, dtype=np.float64)
    t = np.arange(red.size, dtype=np.float64) if t is None else np.asarray(t, dtype=np.float64)
    dr, dg = (red.mean(), green.mean()) if dc is None else dc
    rn = red / dr - 1.0
    gn = green / dg - 1.0
    window = red.size if window is None else int(window)
    t_eff, est = [], []
    for start in range(0, red.size - window + 1, window):
        sl = slice(start, start + window)
        wgt = gn[sl] * gn[sl]
        denom = wgt.sum()
        if denom == 0:
            continue
        t_eff.append(float((wgt * t[sl]).sum() / denom))
        est.append(float(spo2_from_ratio((rn[sl] * gn[sl]).sum() / denom)))
    return np.asarray(t_eff), np.asarray(est)


def state_profiles(state, duration, rng):
    """HR and SpO2 knots mimicking one protocol state, with subject variation."""
    state = State.parse(state)
    D = float(duration)
    u = lambda lo, hi: float(rng.uniform(lo, hi, 1)[0])
    if state in (State.STATE1, State.STATE3):
        h = u(60.0, 72.0)
        s = u(94.0, 96.5)
        return ((0.0, h), (D, h + u(-3.0, 3.0))), ((0.0, s), (D, s + u(-0.5, 0.5)))
    if state is State.STATE2:
        hr = ((0.0, u(140.0, 155.0)), (D, u(86.0, 96.0)))
        spo2 = ((0.0, u(92.0, 94.0)), (0.4 * D, u(86.0, 89.0)), (D, u(89.5, 91.5)))
        return hr, spo2
    hr = ((0.0, u(130.0, 145.0)), (D, u(84.0, 94.0)))
    spo2 = ((0.0, u(91.0, 93.0)), (D, u(96.5, 98.0)))
    return hr, spo2


def subject_id(i):
    return f"s{i + 1:02d}"


def session_configs(n_subjects, states=(1, 2, 3, 4), template=None, seed=0):
    """The :class:`SynthConfig` of every session :func:`gen_dataset` would write."""
    if n_subjects < 2:
        raise InputError("need at least 2 subjects")
    template = template or SynthConfig()
    master = Rng(seed)
    configs = []
    for i in range(n_subjects):
        subj_rng = master.child(i)
        tint = subj_rng.uniform(-0.03, 0.03, 2)
        face_base = tuple(np.round(np.asarray(template.face_base) + tint[0], 6))
        finger_base = tuple(np.round(np.asarray(template.finger_base) + tint[1], 6))
        amp = template.face_amplitude * float(subj_rng.uniform(0.85, 1.15, 1)[0])
        for st in states:
            st = State.parse(st)
            prof_rng = master.child(i, int(st))
            hr, spo2 = state_profiles(st, template.duration_s, prof_rng)
            configs.append(replace(
                template,
                hr_profile=hr,
                spo2_profile=spo2,
                face_base=face_base,
                finger_base=finger_base,
                face_amplitude=round(amp, 6),
                seed=master.child(i, int(st), 7).seed,
                subject_id=subject_id(i),
                state=int(st),
            ))
    return configs


def gen_dataset(root, n_subjects, states=(1, 2, 3, 4), config_template=None, seed=0):
    """Render ``n_subjects`` x ``states`` sessions under ``root/<subject>/state<k>/``."""
    root = Path(root)
    configs = session_configs(n_subjects, states, config_template, seed)
    for cfg in configs:
        render_session(cfg, root / cfg.subject_id / f"state{cfg.state}")
    return root
