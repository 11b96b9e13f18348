"""Occlusion accuracy, position precision and average Jaccard.

Over the evaluated point-frames (``TrackSet.valid``), with distances measured
in pixels of the evaluation resolution and a point "within" threshold
``delta`` when its error is strictly below ``delta``:

* ``OA``: fraction of point-frames whose visibility is classified correctly;
* ``delta``: among ground-truth-visible point-frames, the fraction that is
  predicted visible and within the threshold; ``delta_avg`` is the mean over
  thresholds;
* ``AJ``: mean over thresholds of ``TP / (TP + FP + FN)`` with
  ``TP`` = visible, predicted visible and within;
  ``FP`` = predicted visible but occluded or outside;
  ``FN`` = visible but predicted occluded or outside.

Ratios with an empty denominator count as 1 (nothing to get wrong).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .synthdata import GroundTruth

THRESHOLDS = (1, 2, 4, 8, 16)


def _ratio(num, den):
    return 1.0 if den == 0 else float(num) / float(den)


@dataclass
class MetricsReport:
    OA: float
    delta_avg: float
    AJ: float
    per_threshold: list = field(default_factory=list)
    n_point_frames: int = 0

    def to_json(self, name=None) -> dict:
        out = {} if name is None else {"name": name}
        out.update({"AJ": self.AJ, "delta_avg": self.delta_avg, "OA": self.OA,
                    "per_threshold": self.per_threshold})
        return out


def compute_metrics(pred, gt, eval_resolution=(64, 64), thresholds=THRESHOLDS) -> MetricsReport:
    """Score ``pred`` (a TrackSet) against row-aligned ``gt`` (a GroundTruth)."""
    if pred.xy.shape != gt.xy.shape:
        raise ValidationError(f"prediction {pred.xy.shape} and ground truth {gt.xy.shape} "
                              "are not aligned")
    valid = pred.valid
    gt_vis = gt.vis & valid
    pv = pred.visible & valid
    h, w = eval_resolution
    err = np.linalg.norm((pred.xy - gt.xy) * np.array([w, h]), axis=-1)
    n_valid = int(valid.sum())
    oa = _ratio(int(((pred.visible == gt.vis) & valid).sum()), n_valid)
    rows = []
    for thr in thresholds:
        within = err < thr
        tp = int((gt_vis & pv & within).sum())
        fp = int((pv & (~gt.vis | ~within)).sum())
        fn = int((gt_vis & (~pred.visible | ~within)).sum())
        rows.append({"threshold": thr, "delta": _ratio(tp, int(gt_vis.sum())),
                     "jaccard": _ratio(tp, tp + fp + fn), "TP": tp, "FP": fp, "FN": fn})
    return MetricsReport(OA=oa, delta_avg=float(np.mean([r["delta"] for r in rows])),
                         AJ=float(np.mean([r["jaccard"] for r in rows])), per_threshold=rows,
                         n_point_frames=n_valid)


def aggregate(reports) -> dict:
    """Unweighted mean of the headline numbers over videos."""
    reports = list(reports)
    if not reports:
        raise ValidationError("nothing to aggregate")
    keys = ("AJ", "delta_avg", "OA")
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    out["per_threshold"] = [
        {"threshold": row["threshold"],
         "delta": float(np.mean([r.per_threshold[i]["delta"] for r in reports])),
         "jaccard": float(np.mean([r.per_threshold[i]["jaccard"] for r in reports]))}
        for i, row in enumerate(reports[0].per_threshold)]
    return out


def tracks_as_ground_truth(tracks):
    """Treat a TrackSet's own predictions as ground truth (self-evaluation)."""
    return GroundTruth(tracks.xy.copy(), tracks.visible.copy())
