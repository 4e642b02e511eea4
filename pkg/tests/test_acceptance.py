"""Acceptance suite: one test per criterion, summarized after the run.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the session. The learning
experiments (criteria 4 to 6) are seeded and take several minutes.
"""

import time

import numpy as np
import pytest
from scipy import stats
from threadpoolctl import threadpool_limits

import test_model
import test_train
from vitalsfusion.cli import main
from vitalsfusion.core import SessionMeta
from vitalsfusion.evaluate import prepare_dataset, run_cell
from vitalsfusion.ingest import discover_sessions, load_session
from vitalsfusion.metrics import SplitMode, bandpass, estimate_hr_fft, mae, mape, pearson, split_protocol
from vitalsfusion.model import ModelConfig, conv3d_forward
from vitalsfusion.preprocess import Roi, crop_and_resize
from vitalsfusion.synth import SynthConfig, gen_dataset, invert_spo2, profile_at, render_session
from vitalsfusion.train import TrainConfig, joint_loss

criterion = pytest.mark.criterion


def _detail(record_property, text):
    record_property("detail", text)


# -- 1. numerical core ---------------------------------------------------------


@criterion(1, "conv3d vs brute force (100 cases) and full-model gradient check, < 2 min")
def test_numerical_core(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        C, O = rng.integers(1, 4, 2)
        k = tuple(rng.integers(1, 4, 3))
        stride = tuple(rng.integers(1, 3, 3))
        pad = tuple(rng.integers(0, 2, 3))
        x = rng.normal(size=(C,) + tuple(int(kk + rng.integers(0, 4)) for kk in k))
        w = rng.normal(size=(O, C) + k)
        b = rng.normal(size=O)
        diff = conv3d_forward(x, w, b, stride, pad) - test_model.naive_conv3d(x, w, b, stride, pad)
        worst = max(worst, float(np.abs(diff).max()))
    assert worst <= 1e-10
    # raises on any parameter whose relative error reaches 1e-3
    for mode in ("concat_project", "sum"):
        test_model.test_full_model_gradient_check(mode)
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"max conv error {worst:.1e}, {elapsed:.0f} s")
    assert elapsed < 120


# -- 2. loss formula -----------------------------------------------------------


@criterion(2, "joint loss hand values and decomposition on 1000 random batches")
def test_loss_formula(record_property):
    r = joint_loss([0.1] * 4, [0.0] * 4, 92.0, 91.0)
    assert r.mse_bvp == pytest.approx(0.01, abs=1e-15) and r.mse_spo2 == 1.0 and r.spo2_weight == 9.0
    assert r.total == pytest.approx(10.0, abs=1e-12)
    assert joint_loss([0.5], [0.0], 92.0, 91.0).total == 34.0  # exact in binary
    for task in ("joint", "spo2", "hr"):
        test_train.test_decomposition_on_random_batches(test_train.Task(task))
    _detail(record_property, f"hand total {r.total!r}")


# -- 3. signal chain -----------------------------------------------------------


@criterion(3, "noiseless render -> ingest -> ROI mean -> bandpass -> FFT gives 90 BPM; SpO2 inversion")
def test_signal_chain(tmp_path, record_property):
    t0 = time.perf_counter()
    cfg = SynthConfig(hr_profile=((0.0, 90.0),), spo2_profile=((0.0, 95.0),), noise_std=0.0,
                      duration_s=30.0, frame_size=32, seed=21)
    session = load_session(render_session(cfg, tmp_path / "s01" / "state1"))
    h, w = session.face.frames.shape[1:3]
    face = crop_and_resize(session.face.frames, Roi.centered(h, w, cfg.roi_fraction), 16)
    green = face[..., 1].mean(axis=(1, 2))
    bpm = estimate_hr_fft(bandpass(green, 60.0), 60.0).bpm
    assert abs(bpm - 90.0) <= 0.5

    # time-varying SpO2 through the same ingest path, per 0.5 s window
    cfg = SynthConfig(hr_profile=((0.0, 140.0), (20.0, 90.0)), spo2_profile=((0.0, 93.0), (8.0, 87.0), (20.0, 91.0)),
                      noise_std=0.0, duration_s=20.0, frame_size=16, seed=22)
    session = load_session(render_session(cfg, tmp_path / "s01" / "state2"))
    t = session.timestamps / 1000.0
    worst = 0.0
    for modality in ("face", "finger"):
        base, _, _, (x, y, rw, rh) = cfg.stream(modality)
        frames = getattr(session, modality).frames
        clip = crop_and_resize(frames, Roi(x, y, rw, rh), max(8, rw))
        m = clip.mean(axis=(1, 2))
        t_eff, est = invert_spo2(m[:, 0], m[:, 1], dc=(base[0], base[1]), t=t, window=30)
        worst = max(worst, float(np.abs(est - profile_at(cfg.spo2_profile, t_eff)).max()))
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"HR {bpm:.3f} BPM, SpO2 max error {worst:.4f}, {elapsed:.0f} s")
    assert worst < 0.05
    assert elapsed < 60


# -- 4. end-to-end learning ----------------------------------------------------


@criterion(4, "tiny model on synthetic data: held-out HR MAE < 3 BPM, SpO2 MAE < 1.5")
def test_end_to_end_learning(tmp_path, record_property):
    t0 = time.perf_counter()
    with threadpool_limits(1):
        # s01-s04 train, s05 validation (model selection), s06-s07 held out
        gen_dataset(tmp_path, 7, config_template=SynthConfig(noise_std=0.02, duration_s=12.0), seed=11)
        samples = prepare_dataset([p for _, _, p in discover_sessions(tmp_path)], size=32, chunk_len=128,
                                  dtype="float32")
        train = [s for s in samples if s.subject_id in ("s01", "s02", "s03", "s04")]
        val = [s for s in samples if s.subject_id == "s05"]
        test = [s for s in samples if s.subject_id in ("s06", "s07")]
        mc = ModelConfig(in_frames=127, in_size=32, encoder_channels=(8, 16), dtype="float32")
        tc = TrainConfig(learning_rate=9e-3, epochs=15, batch_size=8, seed=0)
        res = run_cell(train, val, test, mc, tc, "both", "joint")[0]
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"HR MAE {res.hr_mae:.3f}, SpO2 MAE {res.spo2_mae:.3f}, "
                             f"Pearson {res.bvp_pearson:.3f}, {elapsed / 60:.1f} min")
    assert not res.failed
    assert res.hr_mae < 3.0
    assert res.spo2_mae < 1.5


# -- 5 and 6. directional checks -----------------------------------------------

SEEDS = (0, 1, 2)


def _directional(root, template, seed, cells):
    """SpO2 MAE of each ``(streams, task)`` cell; 3 train subjects, 1 val, 1 test."""
    gen_dataset(root, 5, config_template=template, seed=seed)
    samples = prepare_dataset([p for _, _, p in discover_sessions(root)], size=16, chunk_len=64, dtype="float32")
    train = [s for s in samples if s.subject_id in ("s01", "s02", "s03")]
    val = [s for s in samples if s.subject_id == "s04"]
    test = [s for s in samples if s.subject_id == "s05"]
    mc = ModelConfig(in_frames=63, in_size=16, encoder_channels=(8, 16), dtype="float32")
    tc = TrainConfig(learning_rate=9e-3, epochs=10, batch_size=8, seed=seed)
    out = {}
    with threadpool_limits(1):
        for streams, task in cells:
            res = run_cell(train, val, test, mc, tc, streams, task)[0]
            out[streams, task] = np.nan if res.failed else res.spo2_mae
    return out


@criterion(5, "joint-task SpO2 MAE <= single-task when pulse amplitude tracks SpO2 (median of 3 seeds)")
def test_joint_beats_single(tmp_path, record_property):
    template = SynthConfig(noise_std=0.05, amplitude_coupling=1.5, duration_s=10.0, frame_size=32)
    runs = [_directional(tmp_path / str(s), template, s, [("face", "joint"), ("face", "spo2")]) for s in SEEDS]
    joint = np.median([r["face", "joint"] for r in runs])
    single = np.median([r["face", "spo2"] for r in runs])
    _detail(record_property, f"median SpO2 MAE joint {joint:.3f} vs single {single:.3f}")
    assert joint <= single


@criterion(6, "Both-Cameras SpO2 MAE <= min(face, finger) + 0.1 under independent noise (median of 3 seeds)")
def test_fusion_not_worse(tmp_path, record_property):
    template = SynthConfig(face_noise_std=0.05, finger_noise_std=0.05, duration_s=10.0, frame_size=32)
    cells = [("face", "spo2"), ("finger", "spo2"), ("both", "spo2")]
    runs = [_directional(tmp_path / str(s), template, s, cells) for s in SEEDS]
    med = {c: np.median([r[c] for r in runs]) for c in cells}
    best_single = min(med["face", "spo2"], med["finger", "spo2"])
    _detail(record_property, f"median SpO2 MAE face {med['face', 'spo2']:.3f}, finger {med['finger', 'spo2']:.3f}, "
                             f"both {med['both', 'spo2']:.3f}")
    assert med["both", "spo2"] <= best_single + 0.1


# -- 7. protocol ---------------------------------------------------------------


@criterion(7, "state split: subject-disjoint test, states 1/3/4 train and 2 validation, on 10-subject trees")
def test_state_split_protocol(tmp_path, record_property):
    gen_dataset(tmp_path, 10, config_template=SynthConfig(duration_s=10.0, frame_size=8), seed=4)
    found = discover_sessions(tmp_path)
    assert len(found) == 40
    sessions = [SessionMeta(subj, state, 10.0) for subj, state, _ in found]
    for seed in range(10):
        train, val, test = split_protocol(sessions, SplitMode.STATE_SPLIT, seed=seed)
        test_subj = {m.subject_id for m in test}
        assert len(test_subj) == 2
        assert not test_subj & {m.subject_id for m in train + val}
        assert sorted(test, key=str) == sorted([m for m in sessions if m.subject_id in test_subj], key=str)
        for subj in {m.subject_id for m in sessions} - test_subj:
            assert sorted(int(m.state) for m in train if m.subject_id == subj) == [1, 3, 4]
            assert [int(m.state) for m in val if m.subject_id == subj] == [2]
        assert len(train) + len(val) + len(test) == len(sessions)
    _detail(record_property, "10 split seeds checked")


# -- 8. determinism ------------------------------------------------------------


@criterion(8, "two ablation runs with the same seed and --threads 1 give byte-identical report CSVs")
def test_ablation_determinism(tmp_path, record_property):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--subjects", "5", "--duration", "10", "--frame-size", "16",
                 "--noise", "0.02", "--seed", "5"]) == 0
    reports = []
    for run in ("a", "b"):
        out = tmp_path / run
        common = ["--out", str(out), "--size", "8", "--chunk-len", "32", "--threads", "1", "--seed", "5"]
        assert main(["preprocess", "--data", str(data)] + common) == 0
        assert main(["ablate", "--cache", str(out / "cache"), "--epochs", "2", "--channels", "2,4",
                     "--lr", "0.003", "--batch-size", "8"] + common) == 0
        reports.append((out / "report.csv").read_bytes())
    rows = reports[0].decode().splitlines()
    _detail(record_property, f"{len(rows) - 1} cells, {len(reports[0])} bytes")
    assert len(rows) == 10
    assert reports[0] == reports[1]


# -- 9. metrics ----------------------------------------------------------------


def _mae_ref(p, g):
    return sum(abs(a - b) for a, b in zip(p, g)) / len(p)


def _mape_ref(p, g):
    return 100.0 * sum(abs(a - b) / abs(b) for a, b in zip(p, g)) / len(p)


@criterion(9, "MAE/MAPE/Pearson vs independent recomputation on 1000 vectors; Pearson affine invariance")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        p = rng.normal(0, 50, n)
        g = rng.uniform(1, 200, n) * rng.choice([-1, 1], n)
        worst = max(worst, abs(mae(p, g) - _mae_ref(p.tolist(), g.tolist())),
                    abs(mape(p, g) - _mape_ref(p.tolist(), g.tolist())))
        r = pearson(p, g)
        ref = stats.pearsonr(p, g).statistic
        worst = max(worst, abs(r - ref))
        a = rng.uniform(0.1, 10) * rng.choice([-1, 1])
        b = rng.normal(0, 100)
        ra = pearson(a * p + b, g)
        assert np.sign(ra) == np.sign(a) * np.sign(r)
        assert abs(ra - np.sign(a) * r) <= 1e-9
    _detail(record_property, f"worst deviation {worst:.1e}")
    assert worst <= 1e-9
