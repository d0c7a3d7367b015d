"""Binary segmentation metrics: IoU, 95th-percentile Hausdorff distance,
false-positive rate and false-negative (miss) rate.

Undefined cases (empty masks, empty denominators) yield None; aggregation
reports exclusion counts instead of imputing values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ShapeError


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def _check_pair(pred, gt):
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """prob > threshold, strictly; ties go to background."""
    prob = np.asarray(prob)
    if prob.min() < 0 or prob.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    return prob > threshold


def iou(pred, gt) -> float:
    """Intersection over union; both-empty convention: 1.0."""
    p, g = _check_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def hd95(pred, gt, spacing=1.0) -> float | None:
    """Max of the two directed 95th-percentile point-to-set distances over
    foreground pixel centers (linear-interpolation percentile). None when
    either mask is empty."""
    p, g = _check_pair(pred, gt)
    if not p.any() or not g.any():
        return None
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (2,))
    d_to_g = distance_transform_edt(~g, sampling=spacing)
    d_to_p = distance_transform_edt(~p, sampling=spacing)
    fwd = np.percentile(d_to_g[p], 95)
    bwd = np.percentile(d_to_p[g], 95)
    return float(max(fwd, bwd))


def fp_fn_rates(pred, gt) -> tuple[float | None, float | None]:
    """(FP / background pixels, FN / foreground pixels); None on empty
    denominators."""
    p, g = _check_pair(pred, gt)
    n_bg = (~g).sum()
    n_fg = g.sum()
    fp = np.logical_and(p, ~g).sum()
    fn = np.logical_and(~p, g).sum()
    fp_rate = float(fp / n_bg) if n_bg > 0 else None
    fn_rate = float(fn / n_fg) if n_fg > 0 else None
    return fp_rate, fn_rate


@dataclass
class CaseMetrics:
    case_id: str
    iou: float
    hd95: float | None
    fp_rate: float | None
    fn_rate: float | None


METRIC_FIELDS = ("iou", "hd95", "fp_rate", "fn_rate")


class MetricsReport:
    """Per-case metrics plus mean/std aggregation for one evaluation run."""

    def __init__(self, param_count: int | None = None):
        self.rows: list[CaseMetrics] = []
        self.param_count = param_count

    def add_case(self, case_id: str, pred, gt, spacing=1.0):
        self.rows.append(
            CaseMetrics(
                case_id=case_id,
                iou=iou(pred, gt),
                hd95=hd95(pred, gt, spacing),
                fp_rate=fp_fn_rates(pred, gt)[0],
                fn_rate=fp_fn_rates(pred, gt)[1],
            )
        )

    def aggregate(self) -> dict:
        """{metric: (mean, std, n_excluded)} over defined values."""
        out = {}
        for name in METRIC_FIELDS:
            vals = [getattr(r, name) for r in self.rows]
            defined = [v for v in vals if v is not None]
            excluded = len(vals) - len(defined)
            if defined:
                out[name] = (float(np.mean(defined)), float(np.std(defined)), excluded)
            else:
                out[name] = (None, None, excluded)
        return out

    def to_csv(self, path):
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", *METRIC_FIELDS])
            for r in self.rows:
                w.writerow(
                    [r.case_id]
                    + ["" if getattr(r, m) is None else f"{getattr(r, m):.6f}" for m in METRIC_FIELDS]
                )
            w.writerow(
                ["mean±std"]
                + [
                    "" if agg[m][0] is None else f"{agg[m][0]:.6f}±{agg[m][1]:.6f}"
                    for m in METRIC_FIELDS
                ]
            )
            w.writerow(["n_excluded"] + [str(agg[m][2]) for m in METRIC_FIELDS])

    def summary(self) -> str:
        agg = self.aggregate()
        parts = []
        for m in METRIC_FIELDS:
            mean, std, excl = agg[m]
            txt = "undefined" if mean is None else f"{mean:.4f}±{std:.4f}"
            if excl:
                txt += f" ({excl} excluded)"
            parts.append(f"{m}={txt}")
        if self.param_count is not None:
            parts.append(f"params={self.param_count}")
        return "  ".join(parts)
