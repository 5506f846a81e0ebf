"""Multi-label BCE objective and the evaluation metrics (GAP@k, micro-F1).

Labels are given per video as a sorted tuple of positive class indices.
GAP pools the top-k predictions of every video, sorts them once, and
normalises by the total number of positives in the set, so it is not
decomposable over shards: merge predictions first, then call
:func:`gap_at_k` once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from avfusion.errors import (
    CorruptFile,
    EmptyEvaluationSet,
    LabelOutOfRange,
    MIsZero,
    ShapeMismatch,
)

LabelSet = tuple[int, ...]
BCE_EPS = 1e-7


def make_label_set(indices: Iterable[int]) -> LabelSet:
    return tuple(sorted({int(i) for i in indices}))


def label_matrix(labels: Sequence[Sequence[int]], num_classes: int) -> np.ndarray:
    """Dense 0/1 matrix ``[len(labels), num_classes]``."""
    Y = np.zeros((len(labels), num_classes), dtype=np.float64)
    for i, ls in enumerate(labels):
        for c in ls:
            if not 0 <= c < num_classes:
                raise LabelOutOfRange(f"label {c} of video {i} outside [0, {num_classes})")
            Y[i, c] = 1.0
    return Y


def bce_loss(pred: np.ndarray, labels: Sequence[Sequence[int]]) -> tuple[float, np.ndarray]:
    """Binary cross-entropy summed over classes and averaged over videos.

    Returns the loss and its gradient with respect to ``pred``; both are
    evaluated on predictions clipped to ``[1e-7, 1 - 1e-7]``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] != len(labels):
        raise ShapeMismatch(f"predictions {pred.shape} vs {len(labels)} label sets")
    Y = label_matrix(labels, pred.shape[1])
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    B = pred.shape[0]
    per_entry = Y * np.log(p) + (1.0 - Y) * np.log1p(-p)
    loss = -float(per_entry.sum()) / B
    grad = (p - Y) / (p * (1.0 - p)) / B
    return loss, grad


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # descending score, ties by ascending class index
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def _pool_dense(preds: np.ndarray, k: int):
    B, C = preds.shape
    if not np.all(np.isfinite(preds)):
        raise ValueError("non-finite prediction score")
    classes = np.broadcast_to(np.arange(C), (B, C))
    order = np.lexsort((classes, -preds), axis=-1)[:, :k]
    score = np.take_along_axis(preds, order, axis=1).reshape(-1)
    video = np.repeat(np.arange(B), order.shape[1])
    return score, video, order.reshape(-1)


def _pool_lists(preds, k: int):
    pool_score, pool_video, pool_class = [], [], []
    for v, scored in enumerate(preds):
        if not len(scored):
            continue
        classes = np.array([int(c) for c, _ in scored], dtype=np.int64)
        scores = np.array([float(s) for _, s in scored], dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise ValueError(f"non-finite score for video {v}")
        order = np.lexsort((classes, -scores))[:k]
        pool_score.append(scores[order])
        pool_class.append(classes[order])
        pool_video.append(np.full(order.size, v, dtype=np.int64))
    if not pool_score:
        empty = np.zeros(0)
        return empty, empty.astype(np.int64), empty.astype(np.int64)
    return np.concatenate(pool_score), np.concatenate(pool_video), np.concatenate(pool_class)


def gap_at_k(preds, labels: Sequence[Sequence[int]], k: int = 20) -> float:
    """Global average precision over the pooled top-``k`` predictions.

    ``preds`` is either a dense ``[B, C]`` score array or, per video, a
    sequence of ``(class, score)`` pairs.  The pool is sorted by score
    descending with ties broken by (video index, class index) ascending.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(preds, np.ndarray):
        if preds.ndim != 2:
            raise ShapeMismatch(f"dense predictions must be rank 2, got {preds.shape}")
    if len(preds) != len(labels):
        raise ShapeMismatch(f"{len(preds)} prediction rows vs {len(labels)} label sets")
    if len(labels) == 0:
        raise EmptyEvaluationSet("no videos to evaluate")
    num_pos = sum(len(set(ls)) for ls in labels)
    if num_pos == 0:
        raise MIsZero("evaluation set has no positive labels")
    if isinstance(preds, np.ndarray):
        score, video, cls = _pool_dense(np.asarray(preds, dtype=np.float64), k)
    else:
        score, video, cls = _pool_lists(preds, k)
    positives = {(v, c) for v, ls in enumerate(labels) for c in ls}
    order = np.lexsort((cls, video, -score))
    ranked = np.array(
        [(int(video[i]), int(cls[i])) in positives for i in order], dtype=bool
    )
    if ranked.size == 0:
        return 0.0
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, ranked.size + 1)
    return float(precision[ranked].sum() / num_pos)


def micro_f1(preds: np.ndarray, labels: Sequence[Sequence[int]], threshold: float = 0.5) -> float:
    """F1 from TP/FP/FN pooled over every (video, class) decision ``pred >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] != len(labels):
        raise ShapeMismatch(f"predictions {preds.shape} vs {len(labels)} label sets")
    Y = label_matrix(labels, preds.shape[1]).astype(bool)
    decided = preds >= threshold
    tp = int(np.sum(decided & Y))
    fp = int(np.sum(decided & ~Y))
    fn = int(np.sum(~decided & Y))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


@dataclass(frozen=True)
class MetricsReport:
    gap: float
    micro_f1: float
    mean_loss: float
    num_videos: int
    k: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_report(
    preds: np.ndarray,
    labels: Sequence[Sequence[int]],
    k: int = 20,
    threshold: float = 0.5,
    mean_loss: float | None = None,
) -> MetricsReport:
    if mean_loss is None:
        mean_loss, _ = bce_loss(preds, labels)
    return MetricsReport(
        gap=gap_at_k(preds, labels, k),
        micro_f1=micro_f1(preds, labels, threshold),
        mean_loss=float(mean_loss),
        num_videos=len(labels),
        k=k,
        threshold=threshold,
    )


# Text formats: one video per line.
#   predictions: "<id> <class>:<score> <class>:<score> ..."
#   labels:      "<id> <class> <class> ..."


def write_predictions(out: TextIO, ids: Sequence[int], preds: np.ndarray, k: int) -> None:
    for vid, row in zip(ids, np.asarray(preds, dtype=np.float64)):
        top = _top_k(row, k)
        pairs = " ".join(f"{int(c)}:{float(row[c])!r}" for c in top)
        out.write(f"{int(vid)} {pairs}".rstrip() + "\n")


def write_labels(out: TextIO, ids: Sequence[int], labels: Sequence[Sequence[int]]) -> None:
    for vid, ls in zip(ids, labels):
        out.write(" ".join([str(int(vid)), *(str(int(c)) for c in ls)]) + "\n")


def _lines(source) -> list[str]:
    if isinstance(source, (str, Path)):
        return Path(source).read_text(encoding="utf-8").splitlines()
    return source.read().splitlines()


def read_predictions(source) -> dict[int, list[tuple[int, float]]]:
    out: dict[int, list[tuple[int, float]]] = {}
    for lineno, line in enumerate(_lines(source), 1):
        if not line.strip():
            continue
        head, *pairs = line.split()
        try:
            vid = int(head)
            scored = []
            for p in pairs:
                c, s = p.split(":")
                scored.append((int(c), float(s)))
        except ValueError as exc:
            raise CorruptFile(f"prediction line {lineno}: {exc}") from exc
        if vid in out:
            raise CorruptFile(f"prediction line {lineno}: duplicate video id {vid}")
        out[vid] = scored
    return out


def read_labels(source) -> dict[int, LabelSet]:
    out: dict[int, LabelSet] = {}
    for lineno, line in enumerate(_lines(source), 1):
        if not line.strip():
            continue
        try:
            vid, *classes = (int(t) for t in line.split())
        except ValueError as exc:
            raise CorruptFile(f"label line {lineno}: {exc}") from exc
        if vid in out:
            raise CorruptFile(f"label line {lineno}: duplicate video id {vid}")
        out[vid] = make_label_set(classes)
    return out


def gap_from_files(pred_source, label_source, k: int = 20) -> float:
    """GAP over the videos of the label file, in label-file order."""
    preds = read_predictions(pred_source)
    labels = read_labels(label_source)
    unknown = set(preds) - set(labels)
    if unknown:
        raise ShapeMismatch(f"predictions for unknown video ids: {sorted(unknown)[:5]}")
    ids = list(labels)
    return gap_at_k([preds.get(v, []) for v in ids], [labels[v] for v in ids], k)
