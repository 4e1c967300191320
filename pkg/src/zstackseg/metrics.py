"""Evaluation metrics: semantic IoU plus the two instance scores.

SEG averages, over ground-truth instances, the Jaccard index with the
unique prediction covering more than half of the instance (0 when none
does) - sensitive to false negatives. MUCov averages, over predicted
instances, the best Jaccard against any ground-truth instance -
sensitive to false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volio import Volume


@dataclass
class MatchRow:
    kind: str  # "seg": ref is a GT instance; "mucov": ref is a prediction
    ref_label: int
    matched_label: int  # 0 = unmatched
    jaccard: float


@dataclass
class EvalReport:
    iou: float
    seg: float
    mucov: float
    per_instance: list[MatchRow] = field(default_factory=list)


def _labels(a) -> np.ndarray:
    arr = a.data if isinstance(a, Volume) else np.asarray(a)
    return arr.astype(np.int64)


def iou(pred_fg, gt_fg) -> float:
    """Binary intersection over union; 1.0 when both masks are empty."""
    p = _labels(pred_fg) > 0
    g = _labels(gt_fg) > 0
    if p.shape != g.shape:
        raise ValueError(f"pred dims {p.shape} != gt dims {g.shape}")
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def _overlap_table(pred: np.ndarray, gt: np.ndarray):
    """Sizes of all instances and the intersection counts of (pred, gt) pairs."""
    pred_sizes = {int(k): int(c) for k, c in zip(*np.unique(pred[pred > 0], return_counts=True))}
    gt_sizes = {int(k): int(c) for k, c in zip(*np.unique(gt[gt > 0], return_counts=True))}
    both = (pred > 0) & (gt > 0)
    inter: dict[tuple[int, int], int] = {}
    if both.any():
        pairs = np.stack([pred[both], gt[both]])
        uniq, counts = np.unique(pairs, axis=1, return_counts=True)
        for (r, g), c in zip(uniq.T, counts):
            inter[(int(r), int(g))] = int(c)
    return pred_sizes, gt_sizes, inter


def _jaccard(inter: int, size_a: int, size_b: int) -> float:
    return inter / (size_a + size_b - inter)


def seg_score(pred, gt, rows: list[MatchRow] | None = None) -> float:
    """Mean over GT instances of the Jaccard with the single prediction
    covering >50% of the instance, 0 if no prediction does; 1.0 for an
    empty GT."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred dims {p.shape} != gt dims {g.shape}")
    pred_sizes, gt_sizes, inter = _overlap_table(p, g)
    if not gt_sizes:
        return 1.0
    total = 0.0
    for gl, gsize in sorted(gt_sizes.items()):
        best = 0.0
        match = 0
        for (rl, gl2), c in inter.items():
            if gl2 != gl or c * 2 <= gsize:
                continue
            # at most one prediction can cover more than half of g
            best = _jaccard(c, pred_sizes[rl], gsize)
            match = rl
        total += best
        if rows is not None:
            rows.append(MatchRow("seg", gl, match, best))
    return total / len(gt_sizes)


def mucov_score(pred, gt, rows: list[MatchRow] | None = None) -> float:
    """Mean over predicted instances of the best Jaccard against any GT
    instance; empty prediction scores 0.0 unless GT is empty too (1.0)."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred dims {p.shape} != gt dims {g.shape}")
    pred_sizes, gt_sizes, inter = _overlap_table(p, g)
    if not pred_sizes:
        return 1.0 if not gt_sizes else 0.0
    total = 0.0
    for rl, rsize in sorted(pred_sizes.items()):
        best = 0.0
        match = 0
        for (rl2, gl), c in inter.items():
            if rl2 != rl:
                continue
            j = _jaccard(c, rsize, gt_sizes[gl])
            if j > best:
                best = j
                match = gl
        total += best
        if rows is not None:
            rows.append(MatchRow("mucov", rl, match, best))
    return total / len(pred_sizes)


def evaluate(pred_instances, gt_instances) -> EvalReport:
    """Full report: IoU on the foregrounds plus both instance scores."""
    rows: list[MatchRow] = []
    seg = seg_score(pred_instances, gt_instances, rows)
    mucov = mucov_score(pred_instances, gt_instances, rows)
    return EvalReport(
        iou=iou(pred_instances, gt_instances),
        seg=seg,
        mucov=mucov,
        per_instance=rows,
    )


def write_report_csv(reports: dict[str, EvalReport], path) -> None:
    """One CSV row per volume plus a mean row."""
    lines = ["volume,iou,seg,mucov"]
    for name in sorted(reports):
        r = reports[name]
        lines.append(f"{name},{r.iou!r},{r.seg!r},{r.mucov!r}")
    if reports:
        n = len(reports)
        mi = sum(r.iou for r in reports.values()) / n
        ms = sum(r.seg for r in reports.values()) / n
        mm = sum(r.mucov for r in reports.values()) / n
        lines.append(f"mean,{mi!r},{ms!r},{mm!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
