"""Detection and localization metrics: image AUROC/AP, pixel AUROC, PRO."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import InputError, UndefinedMetricError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels).ravel()
    if y.size and not np.isin(y, (0, 1)).all():
        raise InputError("labels must be binary (0/1)")
    return y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied pos/neg pairs count 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_binary(labels)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks give the 1/2 tie credit
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over distinct descending thresholds of (R_i - R_{i-1}) * P_i."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_binary(labels)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of every run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    flat_m, flat_y = [], []
    for m, g in zip(maps, masks):
        m, g = np.asarray(m), np.asarray(g)
        if m.shape != g.shape:
            raise InputError(f"map shape {m.shape} != mask shape {g.shape}")
        flat_m.append(m.ravel())
        flat_y.append(g.ravel())
    return auroc(np.concatenate(flat_m), np.concatenate(flat_y))


def _components(masks):
    """(image index, flat pixel indices) of every 8-connected anomalous region."""
    comps = []
    for i, g in enumerate(masks):
        lab, n = ndimage.label(np.asarray(g) > 0, structure=EIGHT_CONNECTED)
        flat = lab.ravel()
        for c in range(1, n + 1):
            comps.append((i, np.flatnonzero(flat == c)))
    return comps


def pro_curve(maps, masks, thresholds: Optional[np.ndarray] = None, n_thresholds: int = 200):
    """Mean per-region overlap and normal-pixel FPR for each threshold.

    Thresholds default to ``n_thresholds`` evenly spaced quantiles of the pooled
    map values; pass ``thresholds="exhaustive"`` for every distinct value. A
    point for "nothing predicted" (FPR 0, overlap 0) is always prepended.
    Returns ``(fpr, pro)`` sorted by decreasing threshold.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(g) > 0 for g in masks]
    for m, g in zip(maps, masks):
        if m.shape != g.shape:
            raise InputError(f"map shape {m.shape} != mask shape {g.shape}")
    comps = _components(masks)
    if not comps:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    pooled = np.concatenate([m.ravel() for m in maps])
    normal = ~np.concatenate([g.ravel() for g in masks])
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("PRO needs normal pixels to measure false positives")
    if isinstance(thresholds, str) and thresholds == "exhaustive":
        thr = np.unique(pooled)
    elif thresholds is None:
        thr = np.unique(np.quantile(pooled, np.linspace(0, 1, n_thresholds)))
    else:
        thr = np.unique(np.asarray(thresholds, dtype=np.float64))
    thr = thr[::-1]

    # false positives via sorted normal scores
    neg_sorted = np.sort(pooled[normal])
    fp = n_normal - np.searchsorted(neg_sorted, thr, side="left")
    fpr = fp / n_normal

    offsets = np.cumsum([0] + [m.size for m in maps])
    overlaps = np.zeros((len(comps), len(thr)))
    for ci, (img, idx) in enumerate(comps):
        vals = np.sort(pooled[offsets[img] + idx])
        overlaps[ci] = (vals.size - np.searchsorted(vals, thr, side="left")) / vals.size
    pro = overlaps.mean(axis=0)
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def _area_to_limit(fpr, pro, limit):
    x, y = [0.0], [pro[0]]
    for i in range(1, len(fpr)):
        if fpr[i] >= limit:
            x0, x1, y0, y1 = fpr[i - 1], fpr[i], pro[i - 1], pro[i]
            y_lim = y0 if x1 == x0 else y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x.append(limit)
            y.append(y_lim)
            break
        x.append(fpr[i])
        y.append(pro[i])
    else:
        # curve ends below the cap: hold the last value flat
        x.append(limit)
        y.append(pro[-1])
    x, y = np.asarray(x), np.asarray(y)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2) / limit)


def pro_score(maps, masks, fpr_limit: float = 0.3, thresholds=None, n_thresholds: int = 200) -> float:
    """Normalized area under the PRO-vs-FPR curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise InputError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks, thresholds, n_thresholds)
    return _area_to_limit(fpr, pro, fpr_limit)


@dataclass
class MetricRow:
    image_auroc: Optional[float]
    image_ap: Optional[float]
    pixel_auroc: Optional[float]
    pro: Optional[float]
    n_images: int
    n_anomalous: int


@dataclass
class EvalReport:
    mean: MetricRow
    per_class: Dict[str, MetricRow] = field(default_factory=dict)
    pooled: Optional[MetricRow] = None

    def to_json(self) -> dict:
        return {
            "mean": asdict(self.mean),
            "pooled": asdict(self.pooled) if self.pooled else None,
            "per_class": {k: asdict(v) for k, v in sorted(self.per_class.items())},
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path) -> None:
        cols = ["class", "image_auroc", "image_ap", "pixel_auroc", "pro", "n_images", "n_anomalous"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            rows = [(k, v) for k, v in sorted(self.per_class.items())] + [("mean", self.mean)]
            if self.pooled:
                rows.append(("pooled", self.pooled))
            for name, r in rows:
                d = asdict(r)
                w.writerow([name] + ["" if d[c] is None else d[c] for c in cols[1:]])


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return None


def _metric_row(scores, labels, maps, masks, fpr_limit) -> MetricRow:
    return MetricRow(
        image_auroc=_safe(auroc, scores, labels),
        image_ap=_safe(average_precision, scores, labels),
        pixel_auroc=_safe(pixel_auroc, maps, masks),
        pro=_safe(pro_score, maps, masks, fpr_limit),
        n_images=len(labels),
        n_anomalous=int(np.sum(labels)),
    )


def evaluate(scores, labels, maps, masks, classes, fpr_limit: float = 0.3) -> EvalReport:
    """Per-class metrics plus their unweighted mean (and pooled over all images)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.asarray(classes)
    maps = np.asarray(maps)
    masks = np.asarray(masks)
    per_class = {}
    for c in sorted(set(classes.tolist())):
        sel = classes == c
        per_class[str(c)] = _metric_row(scores[sel], labels[sel], maps[sel], masks[sel], fpr_limit)

    def avg(name):
        vals = [getattr(r, name) for r in per_class.values() if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else None

    mean = MetricRow(avg("image_auroc"), avg("image_ap"), avg("pixel_auroc"), avg("pro"),
                     len(labels), int(labels.sum()))
    pooled = _metric_row(scores, labels, maps, masks, fpr_limit)
    return EvalReport(mean, per_class, pooled)
