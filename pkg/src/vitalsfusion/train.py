"""Joint BVP/SpO2 training: loss, Adam, the epoch loop and checkpoints."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Rng
from .errors import CompatibilityError, DivergenceError, FormatError, InputError, ValidationError
from .model.network import Heads, ModelConfig, Streams, backward, forward, init_params, zero_grads
from .model.store import decode_json, encode_json, open_archive, pack_params, unpack_params

log = logging.getLogger(__name__)

BVP_WEIGHT = 100.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
HISTORY_HEADER = ["epoch", "train_total", "train_bvp", "train_spo2", "val_total", "val_bvp", "val_spo2"]


class Task(str, enum.Enum):
    HR = "hr"
    SPO2 = "spo2"
    JOINT = "joint"

    @property
    def heads(self):
        return {Task.HR: Heads.BVP, Task.SPO2: Heads.SPO2, Task.JOINT: Heads.BOTH}[self]

    @property
    def uses_bvp(self):
        return self is not Task.SPO2

    @property
    def uses_spo2(self):
        return self is not Task.HR


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 9e-3
    epochs: int = 30
    batch_size: int = 16
    task: Task = Task.JOINT
    streams: Streams = Streams.BOTH
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "streams", Streams(self.streams))
        # lr == 0 is accepted as an explicit "no-op training" run
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["task"] = self.task.value
        d["streams"] = self.streams.value
        return d


@dataclass(frozen=True)
class LossReport:
    total: float
    mse_bvp: float
    mse_spo2: float
    spo2_weight: float


def _as_batch(bvp_pred, bvp_gt, spo2_pred, spo2_gt):
    def rows(x):
        if x is None:
            return None
        a = np.asarray(x, dtype=np.float64)
        return a[None, :] if a.ndim == 1 else a

    def vec(x):
        return None if x is None else np.atleast_1d(np.asarray(x, dtype=np.float64))

    return rows(bvp_pred), rows(bvp_gt), vec(spo2_pred), vec(spo2_gt)


def joint_loss(bvp_pred, bvp_gt, spo2_pred, spo2_gt_mean, task=Task.JOINT, with_grads=False):
    """``100 * MSE_BVP + (100 - mean(gt SpO2)) * MSE_SpO2`` over a batch.

    BVP arrays may be a single waveform ``[T]`` or a batch ``[B, T]``; SpO2 a
    scalar or ``[B]``. The SpO2 weight uses the batch mean of the *ground
    truth*. Terms not used by ``task`` contribute 0. With ``with_grads`` also
    returns ``(d_bvp [B, T] | None, d_spo2 [B] | None)``.
    """
    task = Task(task)
    bp, bg, sp, sg = _as_batch(bvp_pred, bvp_gt, spo2_pred, spo2_gt_mean)
    mse_bvp = mse_spo2 = weight = 0.0
    d_bvp = d_spo2 = None
    if task.uses_bvp:
        if bp is None or bg is None or bp.shape != bg.shape:
            raise InputError(
                f"BVP prediction {None if bp is None else bp.shape} and label "
                f"{None if bg is None else bg.shape} must have equal shape"
            )
        err = bp - bg
        mse_bvp = float(np.mean(np.mean(err * err, axis=1)))
        if with_grads:
            d_bvp = BVP_WEIGHT * 2.0 * err / err.size
    if task.uses_spo2:
        if sp is None or sg is None or sp.shape != sg.shape:
            raise InputError("SpO2 prediction and label batches must have equal length")
        if np.any(sg < 0) or np.any(sg > 100) or np.any(sp < 0) or np.any(sp > 100):
            raise ValidationError("SpO2 values must lie in [0, 100]")
        weight = 100.0 - float(np.mean(sg))
        err = sp - sg
        mse_spo2 = float(np.mean(err * err))
        if with_grads:
            d_spo2 = weight * 2.0 * err / err.size
    report = LossReport(BVP_WEIGHT * mse_bvp + weight * mse_spo2, mse_bvp, mse_spo2, weight)
    if with_grads:
        return report, (d_bvp, d_spo2)
    return report


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(zero_grads(params), zero_grads(params), 0)


def optimizer_step(params, grads, state, lr):
    """One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected), in place.

    Update per tensor: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    for name, g in grads.items():
        if g.shape != params.tensors[name].shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, parameter {params.tensors[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", layer=name)
    state.step += 1
    c1 = 1.0 - ADAM_BETA1**state.step
    c2 = 1.0 - ADAM_BETA2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p = params.tensors[name]
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
    return params, state


# -- batches -----------------------------------------------------------------


def _clips(sample, config):
    face = sample.face if config.streams in (Streams.FACE, Streams.BOTH) else None
    finger = sample.finger if config.streams in (Streams.FINGER, Streams.BOTH) else None
    return face, finger


def batch_loss(params, config, samples, task, grads=None):
    """Forward (and backward when ``grads`` is a dict) over one batch."""
    outs = []
    for s in samples:
        face, finger = _clips(s, config)
        outs.append(forward(params, config, face, finger))
    bvp_pred = np.stack([o[0] for o in outs]) if task.uses_bvp else None
    spo2_pred = np.array([o[1] for o in outs]) if task.uses_spo2 else None
    bvp_gt = np.stack([s.bvp for s in samples])
    spo2_gt = np.array([s.spo2 for s in samples])
    if grads is None:
        return joint_loss(bvp_pred, bvp_gt, spo2_pred, spo2_gt, task)
    report, (d_bvp, d_spo2) = joint_loss(bvp_pred, bvp_gt, spo2_pred, spo2_gt, task, with_grads=True)
    if math.isfinite(report.total):
        for i, (_, _, cache) in enumerate(outs):
            backward(
                params, config, cache,
                None if d_bvp is None else d_bvp[i],
                None if d_spo2 is None else d_spo2[i],
                grads,
            )
    return report


def mean_report(reports):
    if not reports:
        return LossReport(float("nan"), float("nan"), float("nan"), float("nan"))
    return LossReport(*(float(np.mean([getattr(r, f) for r in reports])) for f in LossReport.__dataclass_fields__))


def evaluate_loss(params, config, samples, task, batch_size):
    reports = [
        batch_loss(params, config, samples[i : i + batch_size], task)
        for i in range(0, len(samples), batch_size)
    ]
    return mean_report(reports)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train: LossReport
    val: LossReport


def model_config_for(model_config, train_config):
    """The model config actually trained: streams and heads follow the train config."""
    return replace(model_config, streams=train_config.streams, heads=train_config.task.heads)


class Trainer:
    """Stateful training loop; :func:`fit` is the one-call wrapper."""

    def __init__(self, train_samples, val_samples, model_config, train_config, params=None):
        if not train_samples or not val_samples:
            raise InputError("training and validation splits must be non-empty")
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples)
        self.train_config = train_config
        self.model_config = model_config_for(model_config, train_config)
        self.params = params if params is not None else init_params(self.model_config, train_config.seed)
        self.opt = AdamState.zeros_like(self.params)
        self.rng = Rng(train_config.seed).child(0x5EED)
        self.epoch = 0
        self.history = []
        self.best_params = self.params.copy()
        self.best_val = math.inf
        self.best_epoch = 0

    @property
    def done(self):
        return self.epoch >= self.train_config.epochs

    def run_epoch(self):
        tc, mc = self.train_config, self.model_config
        epoch = self.epoch + 1
        order = self.rng.permutation(len(self.train_samples))
        reports = []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            batch = [self.train_samples[i] for i in order[start : start + tc.batch_size]]
            grads = zero_grads(self.params)
            report = batch_loss(self.params, mc, batch, tc.task, grads)
            if not math.isfinite(report.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            try:
                optimizer_step(self.params, grads, self.opt, tc.learning_rate)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}", epoch, b, exc.layer) from None
            reports.append(report)
        val = evaluate_loss(self.params, mc, self.val_samples, tc.task, tc.batch_size)
        if not math.isfinite(val.total):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        rec = EpochRecord(epoch, mean_report(reports), val)
        self.history.append(rec)
        if val.total < self.best_val:
            self.best_val, self.best_epoch = val.total, epoch
            self.best_params = self.params.copy()
        self.epoch = epoch
        log.info("epoch %d train %.4f val %.4f", epoch, rec.train.total, val.total)
        return rec

    def run(self, until=None):
        until = self.train_config.epochs if until is None else min(until, self.train_config.epochs)
        while self.epoch < until:
            self.run_epoch()
        return self.best_params, self.history

    # -- checkpoints -----------------------------------------------------

    def checkpoint(self, path):
        """Write the full training state (params, Adam moments, RNG, history)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        members = {}
        members.update(pack_params(self.params, self.model_config, "params/"))
        members.update(pack_params(self.best_params, self.model_config, "best/"))
        for name in self.params.tensors:
            members["adam_m/" + name] = self.opt.m[name]
            members["adam_v/" + name] = self.opt.v[name]
        meta = {
            "format": "vitalsfusion-checkpoint",
            "version": 1,
            "epoch": self.epoch,
            "adam_step": self.opt.step,
            "rng_state": self.rng.get_state(),
            "train_config": self.train_config.to_dict(),
            "model_config": self.model_config.to_dict(),
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "best_epoch": self.best_epoch,
            "history": [asdict(r) for r in self.history],
        }
        members["__checkpoint__"] = encode_json(meta)
        with open(path, "wb") as fh:
            np.savez(fh, **members)
        return path

    @classmethod
    def resume(cls, path, train_samples, val_samples, model_config=None):
        """Rebuild a :class:`Trainer` from :meth:`checkpoint` output."""
        archive = open_archive(path)
        try:
            meta = decode_json(archive["__checkpoint__"])
        except KeyError:
            raise FormatError(f"{path}: not a training checkpoint") from None
        if meta.get("format") != "vitalsfusion-checkpoint":
            raise FormatError(f"{path}: unsupported checkpoint format")
        tc = TrainConfig(**meta["train_config"])
        saved_mc = ModelConfig.from_dict(meta["model_config"])
        if model_config is not None and model_config_for(model_config, tc).hash() != saved_mc.hash():
            raise CompatibilityError(
                f"checkpoint was written for model config {saved_mc.hash()}, "
                f"got {model_config_for(model_config, tc).hash()}"
            )
        params, _ = unpack_params(archive, saved_mc, "params/")
        best, _ = unpack_params(archive, saved_mc, "best/")
        self = cls(train_samples, val_samples, saved_mc, tc, params=params)
        try:
            self.opt = AdamState(
                {n: np.array(archive["adam_m/" + n]) for n in params.tensors},
                {n: np.array(archive["adam_v/" + n]) for n in params.tensors},
                int(meta["adam_step"]),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: missing optimizer tensor {exc}") from None
        self.rng.set_state(meta["rng_state"])
        self.epoch = int(meta["epoch"])
        self.best_params = best
        self.best_val = math.inf if meta["best_val"] is None else float(meta["best_val"])
        self.best_epoch = int(meta["best_epoch"])
        self.history = [
            EpochRecord(r["epoch"], LossReport(**r["train"]), LossReport(**r["val"])) for r in meta["history"]
        ]
        return self


def fit(train_samples, val_samples, model_config, train_config):
    """Train and return ``(params of the lowest-validation-loss epoch, history)``."""
    return Trainer(train_samples, val_samples, model_config, train_config).run()


def checkpoint(trainer, path):
    return trainer.checkpoint(path)


def resume(path, train_samples, val_samples, model_config=None):
    return Trainer.resume(path, train_samples, val_samples, model_config)


def write_history(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([
                r.epoch,
                repr(r.train.total), repr(r.train.mse_bvp), repr(r.train.mse_spo2),
                repr(r.val.total), repr(r.val.mse_bvp), repr(r.val.mse_spo2),
            ])
    return path
