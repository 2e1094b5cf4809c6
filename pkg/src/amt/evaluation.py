"""Frame-wise scoring and piano-roll rendering of label matrices."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .model import ModelParams, predict

NOTE_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]


def _check_pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"label matrices differ in shape: {pred.shape} vs {truth.shape}")
    return pred.astype(bool), truth.astype(bool)


def subset_accuracy(pred, truth) -> float:
    """Fraction of frames whose whole predicted row equals the true row."""
    pred, truth = _check_pair(pred, truth)
    if len(truth) == 0:
        return 0.0
    return float(np.mean(np.all(pred == truth, axis=1)))


def exact_matches(pred, truth) -> int:
    pred, truth = _check_pair(pred, truth)
    return int(np.sum(np.all(pred == truth, axis=1)))


@dataclass
class Confusion:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def precision(self) -> float:
        denom = self.tp.sum() + self.fp.sum()
        return float(self.tp.sum() / denom) if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp.sum() + self.fn.sum()
        return float(self.tp.sum() / denom) if denom else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion_counts(pred, truth) -> Confusion:
    pred, truth = _check_pair(pred, truth)
    return Confusion(tp=np.sum(pred & truth, axis=0).astype(np.int64),
                     fp=np.sum(pred & ~truth, axis=0).astype(np.int64),
                     fn=np.sum(~pred & truth, axis=0).astype(np.int64))


@dataclass
class EvalReport:
    n_samples: int
    n_correct: int
    confusion: Confusion
    inference_seconds: float = float("nan")
    per_song: list = field(default_factory=list)  # (name, n_samples, accuracy)

    @property
    def subset_accuracy(self) -> float:
        return self.n_correct / self.n_samples if self.n_samples else 0.0

    def items(self):
        """Deterministic key/value pairs; timing lives in a separate file."""
        c = self.confusion
        yield "n_samples", str(self.n_samples)
        yield "n_correct", str(self.n_correct)
        yield "subset_accuracy", f"{self.subset_accuracy:.6f}"
        yield "micro_precision", f"{c.precision:.6f}"
        yield "micro_recall", f"{c.recall:.6f}"
        yield "micro_f1", f"{c.f1:.6f}"
        yield "tp_total", str(int(c.tp.sum()))
        yield "fp_total", str(int(c.fp.sum()))
        yield "fn_total", str(int(c.fn.sum()))
        for name, n, acc in self.per_song:
            yield f"song.{name}.n_samples", str(n)
            yield f"song.{name}.subset_accuracy", f"{acc:.6f}"
        for k in range(len(c.tp)):
            yield f"pitch.{k}", f"{c.tp[k]},{c.fp[k]},{c.fn[k]}"


def write_report(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        for key, value in report.items():
            f.write(f"{key}\t{value}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            key, _, value = line.rstrip("\n").partition("\t")
            out[key] = value
    return out


def evaluate(pred, truth) -> EvalReport:
    pred, truth = _check_pair(pred, truth)
    return EvalReport(len(truth), exact_matches(pred, truth), confusion_counts(pred, truth))


def time_inference(params: ModelParams, features, threshold: float = 0.5) -> Tuple[np.ndarray, float]:
    start = time.perf_counter()
    labels = predict(params, features, threshold)
    return labels, time.perf_counter() - start


# -- piano roll ---------------------------------------------------------------

@dataclass(frozen=True)
class PianoRollStyle:
    tp_color: str = "#006400"
    fn_color: str = "#32CD32"
    fp_color: str = "#DC143C"
    pred_color: str = "#1E50A0"  # prediction-only renders
    cell_w: int = 4
    cell_h: int = 6
    low_pitch: int = 36
    margin: int = 40

    def __post_init__(self):
        if len({self.tp_color, self.fn_color, self.fp_color}) != 3:
            raise ValueError("TP, FN and FP colors must be distinct")


def pitch_name(midi: int) -> str:
    return f"{NOTE_NAMES[midi % 12]}{midi // 12 - 1}"


def render_pianoroll(pred, truth=None, style: PianoRollStyle = PianoRollStyle(),
                     out: Optional[Path] = None, title: str = "") -> str:
    """SVG piano roll with one rect per non-silent cell, coloured by outcome.

    Without ``truth`` every predicted cell is drawn in ``style.pred_color``.
    Pitch runs upward (lowest bin at the bottom), frames run left to right.
    """
    pred = np.asarray(pred).astype(bool)
    if truth is None:
        layers = [(pred, style.pred_color, "pred")]
    else:
        pred, truth = _check_pair(pred, truth)
        layers = [(pred & truth, style.tp_color, "tp"),
                  (~pred & truth, style.fn_color, "fn"),
                  (pred & ~truth, style.fp_color, "fp")]
    n_frames, n_bins = pred.shape
    m = style.margin
    width = 2 * m + n_frames * style.cell_w
    height = 2 * m + n_bins * style.cell_h
    top = m

    def y_of(k: int) -> int:
        return top + (n_bins - 1 - k) * style.cell_h

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    if title:
        parts.append(f'<title>{escape(title)}</title>')
    parts.append(f'<g stroke="#999999" stroke-width="1">'
                 f'<line x1="{m}" y1="{top}" x2="{m}" y2="{top + n_bins * style.cell_h}"/>'
                 f'<line x1="{m}" y1="{top + n_bins * style.cell_h}" x2="{width - m}" '
                 f'y2="{top + n_bins * style.cell_h}"/></g>')
    parts.append('<g font-family="sans-serif" font-size="9" text-anchor="end">')
    for k in range(n_bins):
        midi = style.low_pitch + k
        if midi % 12 == 0:
            parts.append(f'<text x="{m - 4}" y="{y_of(k) + style.cell_h}">{pitch_name(midi)}</text>')
    parts.append("</g>")
    for mask, color, cls in layers:
        parts.append(f'<g class="{cls}" fill="{color}">')
        for t, k in zip(*np.nonzero(mask)):
            parts.append(f'<rect x="{m + t * style.cell_w}" y="{y_of(k)}" '
                         f'width="{style.cell_w}" height="{style.cell_h}" fill="{color}"/>')
        parts.append("</g>")
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if out is not None:
        Path(out).write_text(svg)
    return svg
