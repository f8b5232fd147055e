"""Confusion matrices, per-class IoU / mIoU and before-vs-after comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ._atomic import atomic_write_bytes
from .errors import InvalidConfigError, MalformedLineError, ShapeError

DEFAULT_IGNORE = frozenset({0})

CORRECT, WRONG, CHANGED = 0, 1, 2


def _labels(a) -> np.ndarray:
    return np.asarray(getattr(a, "labels", a), dtype=np.int64)


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    ignored_points: int = 0

    @classmethod
    def zeros(cls, q: int) -> "ConfusionMatrix":
        return cls(np.zeros((q, q), dtype=np.int64), 0)

    @property
    def q(self) -> int:
        return self.counts.shape[0]

    @property
    def total_points(self) -> int:
        return int(self.counts.sum()) + self.ignored_points

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts, self.ignored_points + other.ignored_points)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix)
                and np.array_equal(self.counts, other.counts)
                and self.ignored_points == other.ignored_points)


def accumulate(cm: ConfusionMatrix, pred, gt, ignore: Iterable[int] = DEFAULT_IGNORE) -> ConfusionMatrix:
    """Return ``cm`` plus the tally of one frame; points with ignored ground truth are only counted."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction length {p.size} != ground-truth length {g.size}")
    q = cm.q
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= q):
        raise ShapeError(f"labels must lie in [0, {q})")
    keep = ~np.isin(g, np.fromiter(ignore, dtype=np.int64))
    tally = np.bincount(g[keep] * q + p[keep], minlength=q * q).reshape(q, q)
    return ConfusionMatrix(cm.counts + tally, cm.ignored_points + int((~keep).sum()))


@dataclass
class IoUReport:
    per_class: dict[int, float | None]
    miou: float
    evaluated: int
    strict: bool = False


def miou(cm: ConfusionMatrix, valid_classes: Iterable[int] | None = None,
         strict: bool = False) -> IoUReport:
    """Mean of TP / (TP + FP + FN) over ``valid_classes`` (default: every class but 0).

    Classes with an empty denominator are reported as ``None`` and left out of
    the mean; with ``strict`` they count as zero and the mean divides by the
    full class count.
    """
    classes = sorted(set(range(1, cm.q) if valid_classes is None else valid_classes))
    if not classes:
        raise InvalidConfigError("no valid classes to evaluate")
    if classes[0] < 0 or classes[-1] >= cm.q:
        raise InvalidConfigError(f"valid classes must lie in [0, {cm.q})")
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    per_class: dict[int, float | None] = {}
    defined = []
    for k in classes:
        denom = int(tp[k] + fp[k] + fn[k])
        if denom == 0:
            per_class[k] = None
        else:
            per_class[k] = int(tp[k]) / denom
            defined.append(per_class[k])
    if strict:
        mean = sum(defined) / len(classes)
        evaluated = len(classes)
    else:
        mean = sum(defined) / len(defined) if defined else 0.0
        evaluated = len(defined)
    return IoUReport(per_class, mean, evaluated, strict)


@dataclass
class DeltaReport:
    per_class: dict[int, float | None] = field(default_factory=dict)
    miou: float = 0.0


def compare(before: IoUReport, after: IoUReport) -> DeltaReport:
    """``after - before`` per class and for the mean; undefined on either side stays undefined."""
    per_class = {}
    for k in sorted(set(before.per_class) | set(after.per_class)):
        a, b = after.per_class.get(k), before.per_class.get(k)
        per_class[k] = None if a is None or b is None else a - b
    return DeltaReport(per_class, after.miou - before.miou)


def diff_labels(pred, gt, before=None) -> np.ndarray:
    """Per-point uint8 codes: CORRECT / WRONG, or CHANGED where ``pred`` differs from ``before``."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError("prediction and ground truth differ in length")
    codes = np.where(p == g, CORRECT, WRONG).astype(np.uint8)
    if before is not None:
        b = _labels(before)
        if b.shape != p.shape:
            raise ShapeError("the two predictions differ in length")
        codes[p != b] = CHANGED
    return codes


def write_diff(codes, path) -> None:
    atomic_write_bytes(path, np.asarray(codes, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Text reports
# ---------------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "undefined" if v is None else repr(float(v))


def format_iou_report(report: IoUReport) -> str:
    lines = [f"class_{k}_iou={_fmt(v)}" for k, v in sorted(report.per_class.items())]
    lines.append(f"miou={_fmt(report.miou)}")
    lines.append(f"evaluated_classes={report.evaluated}")
    return "\n".join(lines) + "\n"


def parse_iou_report(text: str) -> IoUReport:
    per_class: dict[int, float | None] = {}
    mean, evaluated = None, None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.strip().partition("=")
        if not sep:
            raise MalformedLineError(lineno, f"expected key=value, got {line!r}")
        val = None if value == "undefined" else float(value)
        if key.startswith("class_") and key.endswith("_iou"):
            per_class[int(key[6:-4])] = val
        elif key == "miou":
            mean = val
        elif key == "evaluated_classes":
            evaluated = int(value)
    if mean is None:
        raise MalformedLineError(0, "report has no miou line")
    if evaluated is None:
        evaluated = sum(v is not None for v in per_class.values())
    return IoUReport(per_class, mean, evaluated)


def format_delta_report(delta: DeltaReport, before: IoUReport | None = None,
                        after: IoUReport | None = None,
                        names: Mapping[int, str] | None = None) -> str:
    lines = []
    if before is not None and after is not None:
        lines += [f"miou_before={_fmt(before.miou)}", f"miou_after={_fmt(after.miou)}"]
    lines.append(f"miou_delta={_fmt(delta.miou)}")
    for k, v in sorted(delta.per_class.items()):
        suffix = f"  # {names[k]}" if names and k in names else ""
        lines.append(f"class_{k}_iou_delta={_fmt(v)}{suffix}")
    return "\n".join(lines) + "\n"
