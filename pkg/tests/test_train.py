import numpy as np
import pytest

from conftest import random_samples
from vitalsfusion.errors import CompatibilityError, DivergenceError, FormatError, InputError, ValidationError
from vitalsfusion.model import ModelConfig, init_params
from vitalsfusion.model.network import backward, forward, zero_grads
from vitalsfusion.train import (
    AdamState,
    Task,
    TrainConfig,
    Trainer,
    batch_loss,
    fit,
    joint_loss,
    optimizer_step,
    resume,
    write_history,
)

TINY = ModelConfig(in_frames=16, in_size=16, encoder_channels=(2, 4))


def test_perfect_prediction_is_zero():
    r = joint_loss([0.1, 0.2], [0.1, 0.2], 95.0, 95.0)
    assert r.total == 0.0


def test_hand_example_total_is_ten():
    # mse_bvp 0.01 from a constant 0.1 error; SpO2 off by 1 at gt 91
    r = joint_loss([0.1, 0.1, 0.1, 0.1], [0.0, 0.0, 0.0, 0.0], 92.0, 91.0)
    assert r.mse_bvp == pytest.approx(0.01, abs=1e-15)
    assert r.spo2_weight == 9.0 and r.mse_spo2 == 1.0
    assert r.total == pytest.approx(10.0, abs=1e-12)
    exact = joint_loss([0.5], [0.0], 92.0, 91.0)  # 0.25 is exact in binary
    assert exact.total == 0.25 * 100 + 9.0


def test_hypoxic_weighting():
    normal = joint_loss(None, None, 100.0, 99.0, "spo2")
    hypoxic = joint_loss(None, None, 86.0, 85.0, "spo2")
    assert (normal.spo2_weight, hypoxic.spo2_weight) == (1.0, 15.0)
    assert hypoxic.total == 15 * normal.total


def test_task_modes_drop_terms():
    hr = joint_loss([1.0], [0.0], None, None, "hr")
    assert hr.total == 100.0 and hr.mse_spo2 == 0.0 and hr.spo2_weight == 0.0
    sp = joint_loss(None, None, 93.0, 90.0, "spo2")
    assert sp.total == 9.0 * 10.0 and sp.mse_bvp == 0.0


def test_loss_errors():
    with pytest.raises(InputError):
        joint_loss([1.0, 2.0], [1.0], 90.0, 90.0)
    with pytest.raises(ValidationError):
        joint_loss([1.0], [1.0], 90.0, 101.0)
    with pytest.raises(ValidationError):
        joint_loss([1.0], [1.0], -1.0, 90.0)


@pytest.mark.parametrize("task", list(Task))
def test_decomposition_on_random_batches(task):
    rng = np.random.default_rng(int(task is Task.JOINT) + 3 * int(task is Task.HR))
    for _ in range(1000):
        b, t = rng.integers(1, 9), rng.integers(2, 40)
        bp, bg = rng.normal(size=(b, t)), rng.normal(size=(b, t))
        sp, sg = rng.uniform(80, 100, b), rng.uniform(80, 100, b)
        r = joint_loss(bp, bg, sp, sg, task)
        assert r.total == pytest.approx(r.mse_bvp * 100 + r.mse_spo2 * r.spo2_weight, rel=1e-15, abs=0)
        if task.uses_spo2:
            # independent recomputation from the formula
            ref_w = 100 - np.mean(sg)
            ref = (100 * np.mean((bp - bg) ** 2) if task.uses_bvp else 0.0) + ref_w * np.mean((sp - sg) ** 2)
            assert r.total == pytest.approx(ref, rel=1e-12)


def test_monotone_in_spo2_error():
    totals = [joint_loss([0.3], [0.1], 90.0 + d, 90.0).total for d in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    bp, bg = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    sp, sg = rng.uniform(85, 99, 3), rng.uniform(85, 99, 3)
    _, (gb, gs) = joint_loss(bp, bg, sp, sg, with_grads=True)
    h = 1e-6
    for idx in np.ndindex(bp.shape):
        a, b = bp.copy(), bp.copy()
        a[idx] += h
        b[idx] -= h
        fd = (joint_loss(a, bg, sp, sg).total - joint_loss(b, bg, sp, sg).total) / (2 * h)
        assert fd == pytest.approx(gb[idx], rel=1e-6, abs=1e-8)
    for i in range(3):
        a, b = sp.copy(), sp.copy()
        a[i] += h
        b[i] -= h
        fd = (joint_loss(bp, bg, a, sg).total - joint_loss(bp, bg, b, sg).total) / (2 * h)
        assert fd == pytest.approx(gs[i], rel=1e-6)


@pytest.mark.parametrize("task, silent", [("hr", "spo2."), ("spo2", "bvp.")])
def test_gradient_isolation(task, silent):
    cfg = ModelConfig(in_frames=16, in_size=16, encoder_channels=(2, 4), heads="both")
    p = init_params(cfg, 0)
    samples = random_samples(2)
    grads = zero_grads(p)
    batch_loss(p, cfg, samples, Task(task), grads)
    head = [n for n in grads if n.startswith(silent)]
    assert head and all(not grads[n].any() for n in head)
    assert any(grads[n].any() for n in grads if not n.startswith(silent))


def _scalar_params(value):
    from vitalsfusion.model import ModelParams

    return ModelParams({"w": np.array([value])}, 0)


def test_adam_first_step():
    p = _scalar_params(0.0)
    state = AdamState.zeros_like(p)
    optimizer_step(p, {"w": np.array([1.0])}, state, 0.1)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"][0] == -0.1 * (1.0 / (1.0 + 1e-8))
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    p = _scalar_params(0.7)
    state = AdamState.zeros_like(p)
    optimizer_step(p, {"w": np.array([1.0])}, state, 0.1)
    before, m = p["w"].copy(), state.m["w"].copy()
    state2 = AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)}, 0)
    optimizer_step(p, {"w": np.zeros(1)}, state2, 0.1)
    assert np.array_equal(p["w"], before) and state2.step == 1
    optimizer_step(p, {"w": np.zeros(1)}, state, 0.1)
    assert state.m["w"][0] == 0.9 * m[0]


def test_adam_quadratic_bowl():
    p = _scalar_params(1.0)
    state = AdamState.zeros_like(p)
    for _ in range(200):
        optimizer_step(p, {"w": 2 * p["w"]}, state, 0.05)
    assert abs(p["w"][0]) < 0.01


def test_adam_non_finite_gradient_names_layer():
    p = _scalar_params(1.0)
    with pytest.raises(DivergenceError) as info:
        optimizer_step(p, {"w": np.array([np.nan])}, AdamState.zeros_like(p), 0.1)
    assert info.value.layer == "w"


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(InputError):
        TrainConfig(epochs=0)
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    assert (TrainConfig().learning_rate, TrainConfig().epochs, TrainConfig().batch_size) == (9e-3, 30, 16)


def test_zero_learning_rate_returns_initial_params():
    tc = TrainConfig(learning_rate=0.0, epochs=1, batch_size=2, task="joint", streams="both", seed=4)
    params, history = fit(random_samples(3), random_samples(2, seed=1), TINY, tc)
    init = init_params(TINY, 4)
    assert all(params[n].tobytes() == init[n].tobytes() for n in init.names())
    assert len(history) == 1


def test_fit_needs_data():
    with pytest.raises(InputError):
        fit([], random_samples(1), TINY, TrainConfig(epochs=1))


def test_fit_is_deterministic(tmp_path):
    tc = TrainConfig(learning_rate=1e-2, epochs=2, batch_size=2, seed=9)
    train, val = random_samples(5), random_samples(2, seed=1)
    p1, h1 = fit(train, val, TINY, tc)
    p2, h2 = fit(train, val, TINY, tc)
    assert h1 == h2
    assert all(p1[n].tobytes() == p2[n].tobytes() for n in p1.names())
    a = write_history(h1, tmp_path / "a.csv").read_bytes()
    b = write_history(h2, tmp_path / "b.csv").read_bytes()
    assert a == b and a.startswith(b"epoch,train_total,train_bvp,train_spo2,val_total,val_bvp,val_spo2\n")


def test_fit_learns_and_selects_best():
    tc = TrainConfig(learning_rate=1e-3, epochs=6, batch_size=4, task="hr", seed=2)
    train, val = random_samples(16), random_samples(4, seed=1)
    trainer = Trainer(train, val, TINY, tc)
    params, history = trainer.run()
    vals = [r.val.total for r in history]
    assert min(vals) < vals[0]
    assert trainer.best_epoch == int(np.argmin(vals)) + 1
    assert all(params[n].tobytes() == trainer.best_params[n].tobytes() for n in params.names())


def test_checkpoint_splice_matches_uninterrupted(tmp_path):
    tc = TrainConfig(learning_rate=1e-2, epochs=4, batch_size=2, seed=5)
    train, val = random_samples(5), random_samples(2, seed=1)
    full = Trainer(train, val, TINY, tc)
    full.run()
    part = Trainer(train, val, TINY, tc)
    part.run(until=2)
    path = part.checkpoint(tmp_path / "ck.npz")
    resumed = resume(path, train, val, TINY)
    assert resumed.epoch == 2
    resumed.run()
    assert all(resumed.params[n].tobytes() == full.params[n].tobytes() for n in full.params.names())
    assert all(resumed.best_params[n].tobytes() == full.best_params[n].tobytes() for n in full.params.names())
    assert resumed.history == full.history


def test_resume_errors(tmp_path):
    train, val = random_samples(2), random_samples(1, seed=1)
    with pytest.raises(FormatError):
        resume(tmp_path / "nope.npz", train, val)
    tc = TrainConfig(learning_rate=1e-2, epochs=1, batch_size=2)
    t = Trainer(train, val, TINY, tc)
    t.run()
    path = t.checkpoint(tmp_path / "ck.npz")
    other = ModelConfig(in_frames=16, in_size=16, encoder_channels=(2, 2))
    with pytest.raises(CompatibilityError):
        resume(path, train, val, other)
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(FormatError):
        resume(path, train, val)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch():
    train = random_samples(4)
    tc = TrainConfig(learning_rate=1e-2, epochs=1, batch_size=2)
    bad = train[:2] + [type(train[0])(train[2].face * np.inf, train[2].finger, train[2].bvp, 95.0, "s01", 1, 0)]
    with pytest.raises(DivergenceError) as info:
        fit(bad, train[:1], TINY, tc)
    assert info.value.epoch == 1 and info.value.batch is not None
