"""Evaluation metrics, failure analysis and excitation statistics."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ConfigError, TFCRNN

CONFUSION_SHOWCASE = ("forward", "learn", "nine", "follow", "left")
EXCITATION_SHOWCASE = ("backward", "bird", "stop", "up")


class LabelMismatchError(ValueError):
    pass


@dataclass
class Metrics:
    label_names: list[str]
    counts: np.ndarray          # (K, K) raw confusion, rows = true label
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    f1_undefined: np.ndarray    # True where precision or recall had a zero denominator

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    @property
    def confusion(self) -> np.ndarray:
        """Rows divided by their support; rows without support stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def compute_metrics(y_true, y_pred, label_names: Sequence[str]) -> Metrics:
    k = len(label_names)
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction arrays differ in length")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    tp = np.diag(counts).astype(np.float64)
    predicted = counts.sum(axis=0).astype(np.float64)
    support = counts.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(k), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(k), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(k), where=denom > 0)
    undefined = (predicted == 0) | (support == 0)
    return Metrics(list(label_names), counts, precision, recall, f1, support, undefined)


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate(model: TFCRNN | Predictor, data, label_names: Sequence[str],
             batch_size: int = 64, workers: int = 1) -> Metrics:
    """Predict every clip of ``data`` and score the result.

    ``model`` may be a :class:`TFCRNN` or any callable taking
    ``(clips, labels)`` and returning predicted ids, e.g. a stub. Batches
    are independent, so with ``workers > 1`` they run on a thread pool and
    are merged in order.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    if isinstance(model, TFCRNN):
        model.eval()
        predict = lambda clips, _labels: model.predict(clips)  # noqa: E731
    else:
        predict = model
    chunks = [np.arange(i, min(i + batch_size, len(data))) for i in range(0, len(data), batch_size)]

    def run(idx):
        clips, labels = data.load(idx)
        return labels, np.asarray(predict(clips, labels))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx) for idx in chunks]
    y_true = np.concatenate([p[0] for p in parts])
    y_pred = np.concatenate([p[1] for p in parts])
    return compute_metrics(y_true, y_pred, label_names)


def f1_delta(a: Metrics, b: Metrics) -> np.ndarray:
    """Per-class ``F1(a) - F1(b)``; positive values favour ``a``."""
    if list(a.label_names) != list(b.label_names):
        raise LabelMismatchError("metrics were computed over different label sets")
    return a.f1 - b.f1


@dataclass
class ClassExcitations:
    label: str
    blocks: np.ndarray   # (B, T) channel-mean excitation per step
    energy: np.ndarray   # (T,)
    clips: int


@dataclass
class ExcitationSummary:
    classes: dict[str, ClassExcitations] = field(default_factory=dict)

    def correlations(self, block: int = 1) -> dict[str, float]:
        """Pearson r between a block's excitation curve and the energy curve, per class."""
        return {name: pearson(c.blocks[block - 1], c.energy) for name, c in self.classes.items()}


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def excitation_summary(model: TFCRNN, data, label_names: Sequence[str],
                       classes: Sequence[str] = EXCITATION_SHOWCASE, batch_size: int = 64) -> ExcitationSummary:
    """Channel-mean excitation curves per block, averaged over each class's clips."""
    if not model.config.feedback_enabled:
        raise ConfigError("excitation analysis needs a model with temporal feedback")
    unknown = [c for c in classes if c not in label_names]
    if unknown:
        raise LabelMismatchError(f"unknown classes: {', '.join(unknown)}")
    wanted = {label_names.index(c): c for c in classes}
    labels = data.labels
    summary = ExcitationSummary()
    for class_id, name in wanted.items():
        members = np.flatnonzero(labels == class_id)
        sums, energy, count = None, None, 0
        for i in range(0, len(members), batch_size):
            clips, ys = data.load(members[i:i + batch_size])
            for trace in model.trace_excitations(clips, ys):
                curves = np.stack([b.mean(axis=1, dtype=np.float64) for b in trace.blocks])
                sums = curves if sums is None else sums + curves
                energy = trace.energy if energy is None else energy + trace.energy
                count += 1
        if count:
            summary.classes[name] = ClassExcitations(name, sums / count, energy / count, count)
    return summary


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _writer(path: Path):
    fh = open(path, "w", encoding="utf-8", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_metrics_csv(metrics: Metrics, path: str | os.PathLike) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["label", "precision", "recall", "f1", "support", "f1_undefined"])
        for i, name in enumerate(metrics.label_names):
            w.writerow([name, _fmt(metrics.precision[i]), _fmt(metrics.recall[i]), _fmt(metrics.f1[i]),
                        int(metrics.support[i]), int(metrics.f1_undefined[i])])


def write_summary_csv(metrics: Metrics, path: str | os.PathLike) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["key", "value"])
        w.writerow(["accuracy", _fmt(metrics.accuracy)])
        w.writerow(["clips", metrics.total])
        w.writerow(["classes", len(metrics.label_names)])


def write_confusion_csv(matrix: np.ndarray, label_names: Sequence[str], path: str | os.PathLike) -> None:
    # Full round-trip precision: the matrix is reloaded for further analysis.
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["true\\pred", *label_names])
        for name, row in zip(label_names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_confusion_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.array([[float(v) for v in row[1:]] for row in rows[1:]])


def write_f1_delta_csv(delta: np.ndarray, a: Metrics, b: Metrics, path: str | os.PathLike) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["label", "f1_a", "f1_b", "delta"])
        for i, name in enumerate(a.label_names):
            w.writerow([name, _fmt(a.f1[i]), _fmt(b.f1[i]), _fmt(delta[i])])


def write_excitation_csv(summary: ClassExcitations, path: str | os.PathLike) -> None:
    fh, w = _writer(Path(path))
    n_blocks = summary.blocks.shape[0]
    with fh:
        w.writerow(["step", "energy", *(f"block_{b}" for b in range(1, n_blocks + 1))])
        for t in range(len(summary.energy)):
            w.writerow([t + 1, _fmt(summary.energy[t]), *(_fmt(v) for v in summary.blocks[:, t])])


def write_correlations_csv(summary: ExcitationSummary, path: str | os.PathLike) -> None:
    fh, w = _writer(Path(path))
    n_blocks = next(iter(summary.classes.values())).blocks.shape[0] if summary.classes else 0
    with fh:
        w.writerow(["label", *(f"pearson_block_{b}" for b in range(1, n_blocks + 1))])
        for name, cls in summary.classes.items():
            w.writerow([name, *(_fmt(pearson(cls.blocks[b], cls.energy)) for b in range(n_blocks))])


def subset_indices(label_names: Sequence[str], wanted: Sequence[str]) -> list[int]:
    return [label_names.index(name) for name in wanted if name in label_names]


def emit_report(out_dir: str | os.PathLike, metrics: Metrics | None = None,
                summary: ExcitationSummary | None = None,
                comparison: tuple[Metrics, Metrics] | None = None,
                confusion_classes: Sequence[str] = CONFUSION_SHOWCASE,
                figures: bool = True) -> list[Path]:
    """Write CSV tables (and SVG figures) for whatever results are given."""
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def path(name):
        p = out / name
        written.append(p)
        return p

    if metrics is not None:
        write_metrics_csv(metrics, path("metrics.csv"))
        write_summary_csv(metrics, path("summary.csv"))
        write_confusion_csv(metrics.confusion, metrics.label_names, path("confusion.csv"))
        if figures:
            plotting.per_class_f1(metrics, path("f1.svg"))
            plotting.confusion_heatmap(metrics, _showcase(metrics.label_names, confusion_classes),
                                       path("confusion.svg"))
    if comparison is not None:
        a, b = comparison
        delta = f1_delta(a, b)
        write_f1_delta_csv(delta, a, b, path("f1_delta.csv"))
        write_confusion_csv(a.confusion, a.label_names, path("confusion_a.csv"))
        write_confusion_csv(b.confusion, b.label_names, path("confusion_b.csv"))
        if figures:
            plotting.f1_delta_bars(a.label_names, delta, path("f1_delta.svg"))
            plotting.confusion_pair(a, b, _showcase(a.label_names, confusion_classes), path("confusion_pair.svg"))
    if summary is not None:
        for name, cls in summary.classes.items():
            write_excitation_csv(cls, path(f"excitations_{name}.csv"))
        write_correlations_csv(summary, path("excitation_energy_pearson.csv"))
        if figures and summary.classes:
            plotting.excitation_curves(summary, path("excitations.svg"))
    return written


def _showcase(label_names: Sequence[str], wanted: Sequence[str]) -> list[int]:
    picked = subset_indices(label_names, wanted)
    return picked or list(range(min(5, len(label_names))))
