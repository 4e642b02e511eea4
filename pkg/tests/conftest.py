import csv

import cv2
import numpy as np
import pytest

from vitalsfusion.synth import SynthConfig, render_session

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    status = "FAIL" if rep.failed else "SKIP" if rep.skipped else "PASS"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


def write_frames(directory, frames, timestamps, bits=8):
    """Write ``[N, H, W, 3]`` RGB frames in [0, 1] plus their timestamp CSV."""
    directory.mkdir(parents=True, exist_ok=True)
    scale, dtype = (255, np.uint8) if bits == 8 else (65535, np.uint16)
    for i, f in enumerate(frames):
        img = np.round(np.asarray(f) * scale).astype(dtype)[:, :, ::-1]
        cv2.imwrite(str(directory / f"frame_{i:06d}.png"), img)
    with open(directory / "frames_timestamp.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "timestamp_ms"])
        for i, t in enumerate(timestamps):
            w.writerow([i, t])


def write_signal(path, timestamps, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_ms", "value"])
        for t, v in zip(timestamps, values):
            w.writerow([t, v])


@pytest.fixture(scope="session")
def noiseless_90bpm(tmp_path_factory):
    """A rendered noiseless session: HR 90 BPM, SpO2 95 %, 30 s."""
    cfg = SynthConfig(hr_profile=((0.0, 90.0),), spo2_profile=((0.0, 95.0),), noise_std=0.0,
                      duration_s=30.0, seed=3, subject_id="s01", state=1)
    root = tmp_path_factory.mktemp("noiseless")
    path = render_session(cfg, root / "s01" / "state1")
    return cfg, path


def random_samples(n, in_frames=16, size=16, seed=0, subject="s01", state=1):
    """Random model-ready samples with a weak pulse so training has signal to find."""
    from vitalsfusion.preprocess import Sample

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = np.arange(in_frames) / 60.0
        pulse = np.sin(2 * np.pi * rng.uniform(1.0, 2.0) * t + rng.uniform(0, 2 * np.pi))
        face = rng.normal(0, 1, (in_frames, size, size, 3)) + pulse[:, None, None, None]
        finger = rng.normal(0, 1, (in_frames, size, size, 3)) + 2 * pulse[:, None, None, None]
        out.append(Sample(face, finger, pulse / pulse.std(), float(rng.uniform(88, 99)),
                          subject, state, i * (in_frames + 1)))
    return out
