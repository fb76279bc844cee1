"""Axis-aligned 3D IoU, average precision, mAP tables, and report rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D

# category order used for full-scale indoor-scan reports
SCAN_CATEGORIES = [
    "cab", "bed", "chair", "sofa", "table", "door", "window", "bkshf", "pic",
    "contr", "desk", "curtain", "fridge", "shower", "toilet", "sink", "bath",
    "grbin",
]


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    class_names: tuple[str, ...]
    iou_thresholds: tuple[float, ...] = (0.25, 0.5)
    ap_interpolation: str = "all-point"

    def __post_init__(self):
        if any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("iou thresholds must lie in (0, 1]")
        if list(self.iou_thresholds) != sorted(set(self.iou_thresholds)):
            raise ValueError("iou thresholds must be strictly increasing")


@dataclass
class PRCurve:
    scores: list[float]
    is_tp: list[bool]
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def iou_aabb(a: Box3D, b: Box3D) -> float:
    """Intersection volume over union volume; 0 when disjoint."""
    inter = 1.0
    for i in range(3):
        lo = max(a.center[i] - a.size[i] / 2, b.center[i] - b.size[i] / 2)
        hi = min(a.center[i] + a.size[i] / 2, b.center[i] + b.size[i] / 2)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


def match_detections(dets: list[Box3D], gts: list[Box3D], thr: float) -> list[bool]:
    """TP/FP flags for detections sorted by descending score (ties keep
    insertion order). Greedy: best-IoU unmatched same-class GT wins."""
    used = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if used[j] or gt.class_id != det.class_id:
                continue
            v = iou_aabb(det, gt)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= thr:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(scores: list[float], is_tp: list[bool], n_gt: int) -> PRCurve:
    """All-point interpolated AP: precision envelope integrated over recall.

    Inputs are per-detection scores and TP flags in ranked order (descending
    score, ties by insertion order); n_gt is the number of ground-truth
    instances of the class.
    """
    if n_gt <= 0:
        raise ValueError("average_precision needs at least one ground-truth instance")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.array([is_tp[i] for i in order], dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1.0)
    # precision envelope (running max from the right)
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return PRCurve(
        scores=[scores[i] for i in order],
        is_tp=[bool(is_tp[i]) for i in order],
        precision=precision,
        recall=recall,
        ap=float(ap),
    )


@dataclass
class EvalResult:
    # per threshold: {class_name: ap} for classes with >= 1 GT instance
    ap_per_class: dict[float, dict[str, float]]
    map_per_threshold: dict[float, float]
    curves: dict[float, dict[str, PRCurve]] = field(default_factory=dict)


def map_at(
    dets_by_scene: dict[str, list[Box3D]],
    gts_by_scene: dict[str, list[Box3D]],
    cfg: EvalConfig,
) -> EvalResult:
    """Per-class AP and mAP at each configured IoU threshold.

    Classes with zero ground-truth instances are absent from the tables, not
    reported as zero.
    """
    scene_ids = sorted(gts_by_scene.keys())
    n_classes = len(cfg.class_names)
    ap_per_class: dict[float, dict[str, float]] = {}
    map_per_thr: dict[float, float] = {}
    curves: dict[float, dict[str, PRCurve]] = {}
    for thr in cfg.iou_thresholds:
        per_class: dict[str, float] = {}
        per_class_curves: dict[str, PRCurve] = {}
        for c in range(n_classes):
            scores: list[float] = []
            flags: list[bool] = []
            n_gt = 0
            for sid in scene_ids:
                gts = [g for g in gts_by_scene[sid] if g.class_id == c]
                n_gt += len(gts)
                dets = [d for d in dets_by_scene.get(sid, []) if d.class_id == c]
                dets = sorted(enumerate(dets), key=lambda t: (-t[1].score, t[0]))
                dets = [d for _, d in dets]
                f = match_detections(dets, gts, thr)
                scores.extend(d.score for d in dets)
                flags.extend(f)
            if n_gt == 0:
                continue
            curve = average_precision(scores, flags, n_gt)
            per_class[cfg.class_names[c]] = curve.ap
            per_class_curves[cfg.class_names[c]] = curve
        ap_per_class[thr] = per_class
        curves[thr] = per_class_curves
        map_per_thr[thr] = (
            float(np.mean(list(per_class.values()))) if per_class else 0.0
        )
    return EvalResult(ap_per_class=ap_per_class, map_per_threshold=map_per_thr, curves=curves)


def render_report(result: EvalResult, class_names: list[str]) -> tuple[str, str]:
    """Per-category table, one row per threshold/method, columns in the
    configured class order then mAP. Returns (aligned text, CSV)."""
    for thr, table in result.ap_per_class.items():
        for name in table:
            if name not in class_names:
                raise ReportError(f"unknown class name {name!r} in results")
    header = ["threshold"] + list(class_names) + ["mAP"]
    rows = []
    for thr in sorted(result.ap_per_class):
        table = result.ap_per_class[thr]
        row = [f"AP@{thr:g}"]
        for name in class_names:
            row.append(f"{table[name] * 100:.2f}" if name in table else "-")
        row.append(f"{result.map_per_threshold[thr] * 100:.2f}")
        rows.append(row)
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    text = "\n".join(lines) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow(r)
    return text, buf.getvalue()


def render_figures(result: EvalResult, class_names: list[str], out_dir) -> list[str]:
    """Write per-class AP bar charts and PR curves as PNGs; returns paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for thr in sorted(result.ap_per_class):
        table = result.ap_per_class[thr]
        names = [n for n in class_names if n in table]
        vals = [table[n] * 100 for n in names]
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3.2))
        ax.bar(names, vals, color="#4878cf")
        ax.set_ylabel("AP (%)")
        ax.set_ylim(0, 105)
        ax.set_title(f"Per-category AP at IoU {thr:g}")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        path = out_dir / f"ap_per_class_iou{thr:g}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))

        curves = result.curves.get(thr, {})
        if curves:
            fig, ax = plt.subplots(figsize=(4.5, 4))
            for name in names:
                c = curves[name]
                ax.plot(c.recall, c.precision, label=name)
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.05)
            ax.set_title(f"PR curves at IoU {thr:g}")
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"pr_curves_iou{thr:g}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(str(path))
    return written
