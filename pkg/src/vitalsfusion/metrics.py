"""HR post-processing (bandpass, FFT peak), error metrics and split protocols."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .core import Rng, State
from .errors import DegenerateInputError, InputError

HR_BAND = (0.6, 3.3)  # Hz, i.e. 36-198 BPM
FFT_MIN_POINTS = 2**18
FILTER_ORDER = 2
TRAIN_STATES = (State.STATE1, State.STATE3, State.STATE4)
VAL_STATES = (State.STATE2,)


@dataclass(frozen=True)
class HrEstimate:
    bpm: float
    peak_power_ratio: float


def bandpass(x, fs, lo=HR_BAND[0], hi=HR_BAND[1], order=FILTER_ORDER):
    """Zero-phase Butterworth bandpass (second-order sections run forward and backward)."""
    if not 0 < lo < hi < fs / 2:
        raise InputError(f"invalid band [{lo}, {hi}] Hz for fs={fs} Hz")
    x = np.asarray(x, dtype=np.float64)
    sos = sps.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return sps.sosfiltfilt(sos, x)


def estimate_hr_fft(bvp, fs, band=HR_BAND):
    """Heart rate from the periodogram peak inside ``band``.

    The signal is zero-padded to at least 2**18 points, so for a 30 s
    recording at 60 Hz the bin width is about 0.014 BPM.
    """
    x = np.asarray(bvp, dtype=np.float64)
    if x.ndim != 1 or x.size < 5 * fs:
        raise InputError(f"need at least 5 s of signal ({int(5 * fs)} samples), got {x.size}")
    nfft = max(FFT_MIN_POINTS, 1 << int(np.ceil(np.log2(x.size))))
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    power = np.abs(np.fft.rfft(x - x.mean(), nfft)) ** 2
    lo, hi = band
    mask = (freqs >= lo) & (freqs <= hi)
    in_band = power[mask]
    k = int(np.argmax(in_band))
    total = in_band.sum()
    ratio = float(in_band[k] / total) if total > 0 else 0.0
    return HrEstimate(bpm=float(60.0 * freqs[mask][k]), peak_power_ratio=ratio)


def waveform_hr(diff_bvp, fs, band=HR_BAND):
    """HR of a diff-normalized waveform: integrate, detrend, bandpass, FFT peak."""
    x = sps.detrend(np.cumsum(np.asarray(diff_bvp, dtype=np.float64)))
    return estimate_hr_fft(bandpass(x, fs, *band), fs, band)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise InputError(f"length mismatch: {pred.size} predictions vs {gt.size} targets")
    if pred.size == 0:
        raise InputError("metrics need at least one pair")
    return pred, gt


def mae(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def mape(pred, gt):
    """Mean absolute percentage error, in percent."""
    pred, gt = _pair(pred, gt)
    if np.any(gt == 0):
        raise InputError("MAPE is undefined for zero targets")
    return float(np.mean(np.abs(pred - gt) / np.abs(gt)) * 100.0)


def pearson(x, y):
    x, y = _pair(x, y)
    if x.size < 2:
        raise InputError("Pearson correlation needs at least two pairs")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise DegenerateInputError("Pearson correlation of a constant vector")
    r = float(np.dot(xc, yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


class SplitMode(str, enum.Enum):
    INTRA_RANDOM = "intra_random"
    STATE_SPLIT = "state_split"


def _key(item):
    meta = getattr(item, "meta", item)
    return str(meta.subject_id), State.parse(meta.state)


def split_protocol(sessions, mode=SplitMode.STATE_SPLIT, seed=0, test_fraction=0.2):
    """Split sessions into ``(train, val, test)`` lists.

    ``STATE_SPLIT``: subjects are shuffled with ``seed``; ``round(0.2 * n)``
    (at least one) go to test with all their states. The remaining subjects
    contribute states 1, 3, 4 to train and state 2 to validation.
    ``INTRA_RANDOM``: sessions are shuffled and split 80/20 into train/test;
    validation is empty.

    Items may be sessions or anything with ``subject_id``/``state`` fields
    (directly or under ``.meta``).
    """
    sessions = list(sessions)
    if not sessions:
        raise InputError("no sessions to split")
    mode = SplitMode(mode)
    rng = Rng(seed)
    if mode is SplitMode.INTRA_RANDOM:
        order = sorted(range(len(sessions)), key=lambda i: _key(sessions[i]))
        perm = [order[i] for i in rng.permutation(len(order))]
        n_test = max(1, int(round(test_fraction * len(perm)))) if len(perm) > 1 else 0
        test = sorted((sessions[i] for i in perm[:n_test]), key=_key)
        train = sorted((sessions[i] for i in perm[n_test:]), key=_key)
        return train, [], test
    subjects = sorted({_key(s)[0] for s in sessions})
    if len(subjects) < 2:
        raise InputError(f"state split needs at least 2 subjects, got {len(subjects)}")
    n_test = min(max(1, int(round(test_fraction * len(subjects)))), len(subjects) - 1)
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    test_subjects = set(shuffled[:n_test])
    train, val, test = [], [], []
    for s in sorted(sessions, key=_key):
        subj, state = _key(s)
        if subj in test_subjects:
            test.append(s)
        elif state in VAL_STATES:
            val.append(s)
        else:
            train.append(s)
    return train, val, test
