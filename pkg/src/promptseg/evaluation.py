"""GFSS metrics and table emitters.

IoU is computed dataset-globally: one confusion matrix over all query
pixels, per-class IoU from its diagonal, and the headline score is the plain
average of base mIoU and novel mIoU. Classes absent from both prediction and
ground truth are excluded from averages rather than scored 0 or 1.
Background participates in base mIoU by default.

Emitted tables are CSV with percentages formatted to two decimals; sweep
figures consume the (x, y...) series files written here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SIZE_BUCKET_MEDIUM_MIN = 0.10  # closed lower bound: exactly 10% is medium
SIZE_BUCKET_LARGE_MIN = 0.30  # strictly more than 30% is large


@dataclass
class EvalReport:
    class_ids: list[int]
    per_class_iou: dict[int, float | None]
    base_miou: float
    novel_miou: float
    mean_miou: float
    confusion: np.ndarray  # counts, rows = ground truth, in class_ids order
    size_buckets: dict[str, float | None] | None = None

    @property
    def confusion_row_normalized(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        safe = np.where(rows == 0, 1.0, rows)
        return self.confusion / safe


def confusion_matrix(
    preds: Sequence[np.ndarray] | np.ndarray,
    gts: Sequence[np.ndarray] | np.ndarray,
    class_ids: Sequence[int],
) -> np.ndarray:
    """counts[gt_class, pred_class] accumulated over every pixel of every map."""
    if isinstance(preds, np.ndarray):
        preds, gts = [preds], [gts]
    index_of = {cid: i for i, cid in enumerate(class_ids)}
    n = len(class_ids)
    counts = np.zeros((n, n), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
        p = np.vectorize(index_of.__getitem__)(pred.reshape(-1))
        g = np.vectorize(index_of.__getitem__)(gt.reshape(-1))
        np.add.at(counts, (g, p), 1)
    return counts


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float | None:
    """Intersection over union for one class; None when the class is absent
    from both maps (excluded from averages, not scored)."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    union = np.logical_or(p, g).sum()
    if union == 0:
        return None
    return float(np.logical_and(p, g).sum() / union)


def _iou_from_confusion(counts: np.ndarray, index: int) -> float | None:
    inter = counts[index, index]
    union = counts[index, :].sum() + counts[:, index].sum() - inter
    if union == 0:
        return None
    return float(inter / union)


def _mean_present(values: Iterable[float | None]) -> float:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else 0.0


def gfss_mean(base_miou: float, novel_miou: float) -> float:
    """The headline score: arithmetic mean of base and novel mIoU."""
    return (base_miou + novel_miou) / 2.0


def evaluate(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    base_class_ids: Sequence[int],
    novel_class_ids: Sequence[int],
    include_background: bool = True,
) -> EvalReport:
    class_ids = list(base_class_ids) + list(novel_class_ids)
    counts = confusion_matrix(preds, gts, class_ids)
    per_class = {cid: _iou_from_confusion(counts, i) for i, cid in enumerate(class_ids)}
    base_ids = [c for c in base_class_ids if include_background or c != 0]
    base = _mean_present(per_class[c] for c in base_ids)
    novel = _mean_present(per_class[c] for c in novel_class_ids)
    return EvalReport(
        class_ids=class_ids,
        per_class_iou=per_class,
        base_miou=base,
        novel_miou=novel,
        mean_miou=gfss_mean(base, novel),
        confusion=counts,
    )


def bucket_of(area_fraction: float) -> str:
    if area_fraction > SIZE_BUCKET_LARGE_MIN:
        return "large"
    if area_fraction >= SIZE_BUCKET_MEDIUM_MIN:
        return "medium"
    return "small"


def size_bucket_report(
    preds: Sequence[np.ndarray],
    scenes: Sequence,
) -> dict[str, float | None]:
    """Per-bucket mean of per-object IoU, objects grouped by area fraction.

    Scenes carry their placed regions, so object identity is exact. An
    object's IoU counts every predicted pixel of its class in the image
    against the object's own pixels."""
    per_bucket: dict[str, list[float]] = {"small": [], "medium": [], "large": []}
    for pred, scene in zip(preds, scenes):
        h, w = scene.labels.shape
        total = h * w
        for region in scene.regions:
            obj = region.pixel_mask((h, w))
            predicted = pred == region.class_id
            union = np.logical_or(obj, predicted).sum()
            value = float(np.logical_and(obj, predicted).sum() / union) if union else None
            if value is not None:
                per_bucket[bucket_of(region.area / total)].append(value)
    return {k: (float(np.mean(v)) if v else None) for k, v in per_bucket.items()}


# -- table emitters ---------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def as_percent(fraction: float | None) -> float | None:
    return None if fraction is None else 100.0 * fraction


def write_results_csv(path, rows: Iterable[dict]) -> None:
    """Headline comparison rows: one line per (setting, shots) with the
    base/novel/mean triple in percent."""
    write_csv(
        path,
        ["setting", "shots", "base_miou", "novel_miou", "mean_miou"],
        [
            [r["setting"], r["shots"], as_percent(r["base"]), as_percent(r["novel"]), as_percent(r["mean"])]
            for r in rows
        ],
    )


def write_ablation_csv(path, rows: Iterable[dict]) -> None:
    write_csv(
        path,
        ["row", "causal_attention", "prompt_init", "transduction", "base_miou", "novel_miou", "mean_miou"],
        [
            [
                r["row"],
                r["causal_attention"],
                r["prompt_init"],
                "yes" if r["transduction"] else "no",
                as_percent(r["base"]),
                as_percent(r["novel"]),
                as_percent(r["mean"]),
            ]
            for r in rows
        ],
    )


def write_splitwise_csv(path, rows: Iterable[dict]) -> None:
    write_csv(
        path,
        ["split", "setting", "shots", "base_miou", "novel_miou", "mean_miou"],
        [
            [r["split"], r["setting"], r["shots"], as_percent(r["base"]), as_percent(r["novel"]), as_percent(r["mean"])]
            for r in rows
        ],
    )


def write_classwise_csv(path, report: EvalReport, labels: dict[int, str] | None = None) -> None:
    labels = labels or {}
    write_csv(
        path,
        ["class_id", "name", "iou"],
        [
            [cid, labels.get(cid, f"class-{cid}"), as_percent(report.per_class_iou[cid])]
            for cid in report.class_ids
        ],
    )


def write_size_bucket_csv(path, buckets: dict[str, float | None]) -> None:
    write_csv(
        path,
        ["bucket", "miou"],
        [[name, as_percent(buckets.get(name))] for name in ("small", "medium", "large")],
    )


def write_confusion_csv(path, report: EvalReport) -> None:
    header = ["gt\\pred"] + [str(c) for c in report.class_ids]
    rows = [
        [str(cid)] + [int(v) for v in report.confusion[i]]
        for i, cid in enumerate(report.class_ids)
    ]
    write_csv(path, header, rows)


def write_series_csv(path, x_name: str, xs: Sequence, series: dict[str, Sequence[float]]) -> None:
    """Plot-data file: one x column plus one column per named series."""
    names = list(series)
    rows = [[x] + [series[n][i] for n in names] for i, x in enumerate(xs)]
    write_csv(path, [x_name] + names, rows)
