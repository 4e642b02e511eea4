"""Command line entry point: ``vitalsfusion {synth,preprocess,train,eval,ablate}``.

Every subcommand reads an optional YAML (or JSON) experiment file given with
``--config``; command-line flags override it. Outputs go under ``--out`` and
each run writes ``run_manifest.json`` there.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import State
from .errors import CompatibilityError, FormatError, InputError, VitalsError
from .evaluate import (
    ALL_CELLS,
    EvalReport,
    CellResult,
    evaluate_cell,
    prepare_session,
    run_ablation,
    write_report,
)
from .ingest import DEFAULT_CHUNK_LEN, DEFAULT_TOLERANCE_MS, discover_sessions, load_session
from .metrics import SplitMode, split_protocol
from .model.network import ModelConfig, Streams
from .model.store import load_params, save_params
from .preprocess import DEFAULT_SIZE, Roi, Sample
from .synth import SynthConfig, gen_dataset
from .train import Task, TrainConfig, Trainer, model_config_for, write_history

log = logging.getLogger("vitalsfusion")

ENV_DATA = "VITALSFUSION_DATA"
CACHE_VERSION = 1
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad flags or configuration; maps to exit status 2."""


# -- configuration -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    dataset_root: str | None = None
    output_dir: str | None = None
    seed: int = 0
    threads: int | None = None
    face_roi: dict = field(default_factory=lambda: {"fraction": 0.6})
    finger_roi: dict = field(default_factory=lambda: {"full": True})
    size: int = DEFAULT_SIZE
    chunk_len: int = DEFAULT_CHUNK_LEN
    tolerance_ms: int = DEFAULT_TOLERANCE_MS
    dtype: str = "float64"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    cells: list = field(default_factory=lambda: [[s.value, t.value] for s, t in ALL_CELLS])
    split: str = SplitMode.STATE_SPLIT.value
    synth: dict = field(default_factory=dict)

    def model_config(self):
        kw = dict(self.model)
        kw.setdefault("in_frames", self.chunk_len - 1)
        kw.setdefault("in_size", self.size)
        kw.setdefault("dtype", self.dtype)
        if kw["in_frames"] != self.chunk_len - 1 or kw["in_size"] != self.size:
            raise UsageError("model.in_frames/in_size must match chunk_len - 1 and size")
        return ModelConfig(**kw)

    def train_config(self):
        kw = dict(self.train)
        kw.setdefault("seed", self.seed)
        return TrainConfig(**kw)

    def cell_list(self):
        return [(Streams(s), Task(t)) for s, t in self.cells]

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: cannot parse config ({exc})") from None
    data = data or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    return data


def build_config(args):
    data = load_config_file(args.config) if args.config else {}
    cfg = ExperimentConfig(**data)
    if getattr(args, "data", None):
        cfg.dataset_root = args.data
    if cfg.dataset_root is None and os.environ.get(ENV_DATA):
        cfg.dataset_root = os.environ[ENV_DATA]
    if args.out:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    for name in ("size", "chunk_len"):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    train = dict(cfg.train)
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                      ("task", "task"), ("streams", "streams")):
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    cfg.train = train
    if getattr(args, "channels", None):
        cfg.model = {**cfg.model, "encoder_channels": [int(c) for c in args.channels.split(",")]}
    if cfg.output_dir is None:
        raise UsageError("--out is required (or output_dir in the config file)")
    if cfg.threads is not None and cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    if cfg.size < 8 or cfg.chunk_len < 9:
        raise UsageError("size must be >= 8 and chunk_len >= 9")
    try:
        cfg.model_config()
        cfg.train_config()
        cfg.cell_list()
        SplitMode(cfg.split)
    except (InputError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def _roi(spec, height, width):
    if spec.get("full"):
        return Roi.full(height, width)
    if "fraction" in spec:
        return Roi.centered(height, width, float(spec["fraction"]))
    try:
        return Roi(int(spec["x"]), int(spec["y"]), int(spec["w"]), int(spec["h"]))
    except KeyError as exc:
        raise UsageError(f"ROI needs full, fraction or x/y/w/h (missing {exc})") from None


def write_manifest(cfg, command, extra=None):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "code_version": __version__,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "config": cfg.to_dict(),
    }
    manifest.update(extra or {})
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


# -- chunk cache ---------------------------------------------------------------


def session_digest(path, params):
    """sha256 over the preprocess parameters and every file in a session directory."""
    h = hashlib.sha256(json.dumps(params, sort_keys=True).encode())
    path = Path(path)
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def _cache_params(cfg):
    return {
        "version": CACHE_VERSION,
        "size": cfg.size,
        "chunk_len": cfg.chunk_len,
        "tolerance_ms": cfg.tolerance_ms,
        "dtype": cfg.dtype,
        "face_roi": cfg.face_roi,
        "finger_roi": cfg.finger_roi,
    }


def _save_samples(samples, path):
    np.savez(
        path,
        face=np.stack([s.face for s in samples]),
        finger=np.stack([s.finger for s in samples]),
        bvp=np.stack([s.bvp for s in samples]),
        spo2=np.array([s.spo2 for s in samples]),
        start=np.array([s.start_index for s in samples], dtype=np.int64),
    )


def _load_samples(path, subject, state):
    with np.load(path) as z:
        return [
            Sample(z["face"][i], z["finger"][i], z["bvp"][i], float(z["spo2"][i]), subject, state,
                   int(z["start"][i]))
            for i in range(z["spo2"].shape[0])
        ]


def preprocess_tree(cfg, cache_dir):
    """Fill ``cache_dir`` from the dataset; returns ``(manifest, rebuilt, failed)``."""
    if not cfg.dataset_root:
        raise UsageError(f"no dataset root: pass --data or set {ENV_DATA}")
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    params = _cache_params(cfg)
    old = {}
    mpath = cache_dir / MANIFEST
    if mpath.is_file():
        old = json.loads(mpath.read_text(encoding="utf-8")).get("sessions", {})
    sessions, rebuilt, failed = {}, 0, []
    for subject, state, path in discover_sessions(root):
        key = f"{subject}/{state.dirname}"
        fname = f"{subject}_{state.dirname}.npz"
        try:
            digest = session_digest(path, params)
            prev = old.get(key)
            if prev and prev.get("status") == "ok" and prev["hash"] == digest and (cache_dir / fname).is_file():
                sessions[key] = prev
                continue
            session = load_session(path, cfg.tolerance_ms)
            h, w = session.face.frames.shape[1:3]
            fh, fw = session.finger.frames.shape[1:3]
            samples = prepare_session(
                session, cfg.size, cfg.chunk_len, _roi(cfg.face_roi, h, w), _roi(cfg.finger_roi, fh, fw),
                np.dtype(cfg.dtype),
            )
            _save_samples(samples, cache_dir / fname)
            sessions[key] = {"hash": digest, "file": fname, "chunks": len(samples), "status": "ok"}
            rebuilt += 1
        except (VitalsError, OSError) as exc:
            log.error("session %s failed: %s", key, exc)
            sessions[key] = {"status": "failed", "error": str(exc)}
            failed.append(key)
    manifest = {"params": params, "sessions": sessions}
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest, rebuilt, failed


def load_cache(cache_dir):
    cache_dir = Path(cache_dir)
    mpath = cache_dir / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"no chunk cache at {cache_dir}; run `vitalsfusion preprocess` first")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    samples = []
    for key, entry in sorted(manifest["sessions"].items()):
        if entry.get("status") != "ok":
            continue
        subject, state = key.split("/")
        samples.extend(_load_samples(cache_dir / entry["file"], subject, int(State.parse(state))))
    if not samples:
        raise FormatError(f"chunk cache at {cache_dir} holds no usable sessions")
    return samples, manifest["params"]


def _cache_dir(cfg, args):
    return Path(args.cache) if getattr(args, "cache", None) else Path(cfg.output_dir) / "cache"


def _check_cache_params(cfg, params):
    if params["size"] != cfg.size or params["chunk_len"] != cfg.chunk_len:
        raise UsageError(
            f"cache was built with size={params['size']} chunk_len={params['chunk_len']}, "
            f"config asks for size={cfg.size} chunk_len={cfg.chunk_len}; rerun preprocess"
        )


def make_splits(cfg, samples):
    mode = SplitMode(cfg.split)
    train, val, test = split_protocol(samples, mode, cfg.seed)
    if mode is SplitMode.INTRA_RANDOM:
        # no held-out validation in this protocol: select on training loss
        val = train
    return train, val, test


def cell_dir(cfg, streams, task):
    return Path(cfg.output_dir) / "train" / f"{Streams(streams).value}_{Task(task).value}"


# -- subcommands ---------------------------------------------------------------


def cmd_synth(cfg, args):
    opts = dict(cfg.synth)
    for flag, key in (("duration", "duration_s"), ("frame_size", "frame_size"), ("noise", "noise_std")):
        if getattr(args, flag) is not None:
            opts[key] = getattr(args, flag)
    if args.full_res:
        opts["full_resolution"] = True
    subjects = args.subjects if args.subjects is not None else opts.pop("subjects", 2)
    opts.pop("subjects", None)
    states = opts.pop("states", [1, 2, 3, 4])
    if args.states:
        states = [int(s) for s in args.states.split(",")]
    try:
        template = SynthConfig(**opts)
    except (InputError, TypeError) as exc:
        raise UsageError(f"invalid synth options: {exc}") from None
    if subjects < 2:
        raise UsageError("--subjects must be >= 2")
    root = Path(cfg.output_dir)
    gen_dataset(root, subjects, states, template, cfg.seed)
    n = len(discover_sessions(root))
    write_manifest(cfg, "synth", {"sessions": n})
    print(f"wrote {n} sessions ({subjects} subjects x {len(states)} states) to {root}")
    return 0


def cmd_preprocess(cfg, args):
    cache = _cache_dir(cfg, args)
    manifest, rebuilt, failed = preprocess_tree(cfg, cache)
    total = len(manifest["sessions"])
    write_manifest(cfg, "preprocess", {"cache": str(cache), "sessions": total, "failed": failed})
    print(f"{rebuilt} sessions rebuilt, {total - rebuilt - len(failed)} unchanged, {len(failed)} failed")
    for key in failed:
        print(f"failed: {key}: {manifest['sessions'][key]['error']}", file=sys.stderr)
    return 1 if failed else 0


def cmd_train(cfg, args):
    samples, params = load_cache(_cache_dir(cfg, args))
    _check_cache_params(cfg, params)
    train, val, _ = make_splits(cfg, samples)
    tc = cfg.train_config()
    out = cell_dir(cfg, tc.streams, tc.task)
    ckpt = out / "checkpoint.npz"
    if args.resume and ckpt.is_file():
        trainer = Trainer.resume(ckpt, train, val, cfg.model_config())
        # a resumed run may extend the epoch budget; anything else must match
        if replace(trainer.train_config, epochs=tc.epochs) != tc:
            raise CompatibilityError(
                f"{ckpt} was written with {trainer.train_config.to_dict()}; "
                f"requested {tc.to_dict()}. Rerun without --resume"
            )
        trainer.train_config = tc
        log.info("resumed at epoch %d", trainer.epoch)
    else:
        trainer = Trainer(train, val, cfg.model_config(), tc)
    while not trainer.done:
        trainer.run_epoch()
        trainer.checkpoint(ckpt)
    save_params(trainer.best_params, trainer.model_config, out / "params.npz")
    write_history(trainer.history, out / "history.csv")
    write_manifest(cfg, "train", {"cell": f"{tc.streams.value}/{tc.task.value}",
                                   "best_epoch": trainer.best_epoch})
    print(f"trained {tc.streams.value}/{tc.task.value}: best epoch {trainer.best_epoch}, "
          f"val loss {trainer.best_val:.4f}; wrote {out}")
    return 0


def cmd_eval(cfg, args):
    samples, params = load_cache(_cache_dir(cfg, args))
    _check_cache_params(cfg, params)
    _, _, test = make_splits(cfg, samples)
    base = cfg.model_config()
    results = []
    for streams, task in cfg.cell_list():
        mc = model_config_for(base, TrainConfig(task=task, streams=streams))
        path = (Path(args.checkpoints) / f"{streams.value}_{task.value}" if args.checkpoints
                else cell_dir(cfg, streams, task)) / "params.npz"
        try:
            model = load_params(path, mc)
        except VitalsError as exc:
            msg = f"cell {streams.value}/{task.value}: {exc}"
            print(f"error: {msg}", file=sys.stderr)
            results.append(CellResult(streams, task, failed=True, error=msg))
            continue
        results.append(evaluate_cell(model, mc, task, test))
    return _finish_report(cfg, EvalReport(results), "eval")


def cmd_ablate(cfg, args):
    samples, params = load_cache(_cache_dir(cfg, args))
    _check_cache_params(cfg, params)
    splits = make_splits(cfg, samples)
    report = run_ablation(samples, cfg.model_config(), cfg.train_config(), cfg.cell_list(), splits=splits)
    return _finish_report(cfg, report, "ablate")


def _finish_report(cfg, report, command):
    csv_path, table = write_report(report, Path(cfg.output_dir) / "report.csv")
    failed = [c.label for c in report.cells if c.failed]
    write_manifest(cfg, command, {"report": csv_path.name, "failed_cells": failed})
    print(table.read_text(encoding="utf-8"), end="")
    print(f"wrote {csv_path} ({len(report.cells)} cells, {len(failed)} failed)")
    return 1 if report.cells and len(failed) == len(report.cells) else 0


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate}


# -- argument parsing ----------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--cache", help=f"chunk cache directory (default <out>/cache)")
    data.add_argument("--size", type=int, help="model input size S")
    data.add_argument("--chunk-len", dest="chunk_len", type=int, help="frames per chunk")

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--epochs", type=int)
    fit.add_argument("--lr", type=float)
    fit.add_argument("--batch-size", dest="batch_size", type=int)
    fit.add_argument("--channels", help="encoder channels, e.g. 8,16")

    p = argparse.ArgumentParser(prog="vitalsfusion", description="Face and finger video vital-sign estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s.add_argument("--subjects", type=int)
    s.add_argument("--states", help="comma-separated protocol states (default 1,2,3,4)")
    s.add_argument("--duration", type=float, help="seconds per session")
    s.add_argument("--frame-size", dest="frame_size", type=int)
    s.add_argument("--noise", type=float, help="pixel noise std")
    s.add_argument("--full-res", dest="full_res", action="store_true", help="render 1280x720 frames")

    pp = sub.add_parser("preprocess", parents=[common, data], help="build the chunk cache")
    pp.add_argument("--data", help=f"dataset root (default ${ENV_DATA})")

    t = sub.add_parser("train", parents=[common, data, fit], help="train one camera/task cell")
    t.add_argument("--task", choices=[x.value for x in Task])
    t.add_argument("--streams", choices=[x.value for x in Streams])
    t.add_argument("--resume", action="store_true", help="continue from the cell's checkpoint")

    e = sub.add_parser("eval", parents=[common, data], help="evaluate trained cells")
    e.add_argument("--checkpoints", help="directory holding <streams>_<task>/params.npz")

    sub.add_parser("ablate", parents=[common, data, fit], help="train and evaluate every cell")
    return p


def _limits(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        with _limits(cfg.threads):
            return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (VitalsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
