"""Dataset preparation, per-cell evaluation and the camera x task ablation."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DivergenceError, InputError
from .ingest import DEFAULT_CHUNK_LEN, DEFAULT_TOLERANCE_MS, chunk_session, load_session
from .metrics import SplitMode, mae, mape, pearson, split_protocol, waveform_hr
from .model.network import Streams, forward
from .preprocess import DEFAULT_SIZE, Roi, prepare_chunk
from .train import Task, TrainConfig, fit, model_config_for

log = logging.getLogger(__name__)

REPORT_HEADER = ["streams", "task", "hr_mae", "hr_mape", "bvp_pearson", "spo2_mae", "spo2_mape"]
METRICS = REPORT_HEADER[2:]
STREAM_LABELS = {Streams.FACE: "Face-Camera", Streams.FINGER: "Finger-Camera", Streams.BOTH: "Both-Cameras"}
ALL_CELLS = [(s, t) for s in (Streams.FACE, Streams.FINGER, Streams.BOTH) for t in (Task.HR, Task.SPO2, Task.JOINT)]
FS = 60.0


def prepare_session(session, size=DEFAULT_SIZE, chunk_len=DEFAULT_CHUNK_LEN, face_roi=None,
                    finger_roi=None, dtype=np.float64):
    """Chunk a synchronized session and preprocess every chunk into a ``Sample``."""
    return [
        prepare_chunk(c, size, face_roi, finger_roi, dtype)
        for c in chunk_session(session, chunk_len, chunk_len)
    ]


def prepare_dataset(session_paths, size=DEFAULT_SIZE, chunk_len=DEFAULT_CHUNK_LEN, face_roi=None,
                    finger_roi=None, tolerance_ms=DEFAULT_TOLERANCE_MS, dtype=np.float64):
    """Load, synchronize and preprocess every session directory; returns a flat sample list."""
    samples = []
    for path in session_paths:
        session = load_session(path, tolerance_ms)
        samples.extend(prepare_session(session, size, chunk_len, face_roi, finger_roi, dtype))
    return samples


def group_by_session(samples):
    groups = OrderedDict()
    for s in sorted(samples, key=lambda s: (s.subject_id, s.state, s.start_index)):
        groups.setdefault(s.session_key, []).append(s)
    return groups


def predict(params, config, samples):
    """Model outputs for each sample: list of ``(bvp | None, spo2 | None)``."""
    out = []
    for s in samples:
        face = s.face if config.streams in (Streams.FACE, Streams.BOTH) else None
        finger = s.finger if config.streams in (Streams.FINGER, Streams.BOTH) else None
        bvp, spo2, _ = forward(params, config, face, finger)
        out.append((bvp, spo2))
    return out


@dataclass
class CellResult:
    streams: Streams
    task: Task
    hr_mae: float | None = None
    hr_mape: float | None = None
    bvp_pearson: float | None = None
    spo2_mae: float | None = None
    spo2_mape: float | None = None
    failed: bool = False
    error: str = ""
    sessions: list = field(default_factory=list)  # per-session raw estimates
    chunks: list = field(default_factory=list)  # per-chunk SpO2 (session, start, pred, gt)

    @property
    def label(self):
        return f"{self.streams.value}/{self.task.value}"


@dataclass
class EvalReport:
    cells: list

    def cell(self, streams, task):
        for c in self.cells:
            if c.streams is Streams(streams) and c.task is Task(task):
                return c
        raise KeyError(f"no cell {streams}/{task}")


def evaluate_cell(params, config, task, test_samples, fs=FS):
    """Score one trained model on ``test_samples``.

    HR is estimated per session from the concatenated chunk waveforms (the
    ground-truth HR uses the same processing on the labels); SpO2 is scored
    per chunk against the chunk's mean label.
    """
    task = Task(task)
    result = CellResult(config.streams, task)
    preds = predict(params, config, test_samples)
    index = {id(s): i for i, s in enumerate(test_samples)}
    if task.uses_bvp:
        hr_pred, hr_gt, rhos = [], [], []
        for key, group in group_by_session(test_samples).items():
            pw = np.concatenate([preds[index[id(s)]][0] for s in group])
            gw = np.concatenate([s.bvp for s in group])
            hp, hg = waveform_hr(pw, fs).bpm, waveform_hr(gw, fs).bpm
            try:
                rho = pearson(pw, gw)
            except DegenerateInputError:
                rho = float("nan")
            hr_pred.append(hp)
            hr_gt.append(hg)
            rhos.append(rho)
            result.sessions.append({"session": key, "hr_pred": hp, "hr_gt": hg, "pearson": rho})
        result.hr_mae = mae(hr_pred, hr_gt)
        result.hr_mape = mape(hr_pred, hr_gt)
        result.bvp_pearson = float(np.mean(rhos))
    if task.uses_spo2:
        sp = [p[1] for p in preds]
        sg = [s.spo2 for s in test_samples]
        result.spo2_mae = mae(sp, sg)
        result.spo2_mape = mape(sp, sg)
        result.chunks = [(s.session_key, s.start_index, p, g) for s, p, g in zip(test_samples, sp, sg)]
    return result


def run_cell(train, val, test, model_config, train_config, streams, task):
    tc = replace(train_config, streams=Streams(streams), task=Task(task))
    mc = model_config_for(model_config, tc)
    try:
        params, history = fit(train, val, mc, tc)
    except DivergenceError as exc:
        log.warning("cell %s/%s diverged: %s", tc.streams.value, tc.task.value, exc)
        return CellResult(tc.streams, tc.task, failed=True, error=str(exc)), None, None
    return evaluate_cell(params, mc, tc.task, test), params, history


def run_ablation(samples, model_config, train_config, cells=None, split_seed=0, splits=None):
    """Train and evaluate every ``(streams, task)`` cell on the same split and seed.

    ``splits`` may supply ``(train, val, test)`` directly; otherwise the
    state split protocol is applied to ``samples``. A cell whose training
    diverges is recorded as failed and the run continues.
    """
    cells = ALL_CELLS if cells is None else [(Streams(s), Task(t)) for s, t in cells]
    if splits is None:
        train, val, test = split_protocol(samples, SplitMode.STATE_SPLIT, split_seed)
    else:
        train, val, test = splits
    if not test:
        raise InputError("empty test split")
    results = []
    for streams, task in cells:
        log.info("ablation cell %s/%s", streams.value, task.value)
        results.append(run_cell(train, val, test, model_config, train_config, streams, task)[0])
    return EvalReport(results)


# -- reporting ---------------------------------------------------------------


def fmt2(x):
    """Round half-even to 2 decimals; ``None`` -> empty field."""
    if x is None:
        return ""
    if not math.isfinite(x):
        return "nan"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _applies(task, metric):
    return task.uses_bvp if metric in ("hr_mae", "hr_mape", "bvp_pearson") else task.uses_spo2


def report_rows(report):
    """CSV rows; metrics of a disabled head are empty, those of a failed cell ``nan``."""
    rows = []
    for c in report.cells:
        vals = []
        for m in METRICS:
            if not _applies(c.task, m):
                vals.append(None)
            else:
                vals.append(float("nan") if c.failed else getattr(c, m))
        rows.append([c.streams.value, c.task.value] + [fmt2(v) for v in vals])
    return rows


def render_table(report):
    """Plain-text table laid out like the multi-task results table."""
    cols = [("Single HR Task", Task.HR, "hr"), ("Single SpO2 Task", Task.SPO2, "spo2"),
            ("Both HR Task", Task.JOINT, "hr"), ("Both SpO2 Task", Task.JOINT, "spo2")]
    index = {(c.streams, c.task): c for c in report.cells}
    head1 = f"{'':<14}" + "".join(f"| {name:^17}" for name, _, _ in cols)
    head2 = f"{'Training Set':<14}" + "| MAE      MAPE    " * len(cols)
    lines = [head1, head2, "-" * len(head2)]
    for streams in (Streams.FACE, Streams.FINGER, Streams.BOTH):
        line = f"{STREAM_LABELS[streams]:<14}"
        for _, task, kind in cols:
            c = index.get((streams, task))
            if c is None:
                cell = "-"
            elif c.failed:
                cell = "failed"
            else:
                a, b = (c.hr_mae, c.hr_mape) if kind == "hr" else (c.spo2_mae, c.spo2_mape)
                cell = f"{fmt2(a):<8} {fmt2(b)}"
            line += f"| {cell:<17}"
        lines.append(line)
    lines.append("MAE in BPM for HR and percentage points for SpO2; MAPE in %.")
    return "\n".join(lines) + "\n"


def write_report(report, path):
    """Write ``<path>`` (CSV, one row per cell) and ``<path stem>.txt`` (table)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(report_rows(report))
    table = path.with_suffix(".txt")
    table.write_text(render_table(report), encoding="utf-8")
    return path, table


def read_report(path):
    """Parse a report CSV back into an :class:`EvalReport` (values at 2 decimals)."""
    cells = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise InputError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            vals = {m: (None if row[m] == "" else float(row[m])) for m in METRICS}
            failed = any(v is not None and math.isnan(v) for v in vals.values())
            cells.append(CellResult(Streams(row["streams"]), Task(row["task"]), failed=failed, **vals))
    return EvalReport(cells)
