"""ROC/AUC, sensitivity/specificity and lesion identification rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .volume_store import LOBES, LesionAnnotation

POLICIES = ("fixed_0.5", "youden")


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1D and equally long")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.min(initial=1) == y.max(initial=0) or len(y) == 0:
        raise ValueError("both classes must be present")
    return s, y.astype(np.int64)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) for the rule ``score >= threshold``, thresholds descending.

    The first point is (0, 0, +inf); the last is (1, 1, min score).
    """
    s, y = _check(scores, labels)
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each run of tied scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    points = [(0.0, 0.0, float("inf"))]
    for i in ends:
        points.append((fp[i] / n_neg, tp[i] / n_pos, float(s_sorted[i])))
    return points


def roc_auc(scores, labels) -> tuple[list[tuple[float, float, float]], float]:
    points = roc_curve(scores, labels)
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return points, auc


def confusion(scores, labels, thr: float, strict: bool = False) -> tuple[float, float]:
    s, y = _check(scores, labels)
    pred = s > thr if strict else s >= thr
    sens = np.sum(pred & (y == 1)) / np.sum(y == 1)
    spec = np.sum(~pred & (y == 0)) / np.sum(y == 0)
    return float(sens), float(spec)


def sens_spec(scores, labels, policy: str = "fixed_0.5") -> tuple[float, float, float]:
    """Sensitivity (typical = positive), specificity and the threshold used.

    ``fixed_0.5`` calls a case typical iff its likelihood exceeds 0.5, which
    agrees with the model's argmax tie-break.  ``youden`` maximizes
    sens + spec - 1 over the ``score >= t`` rules at the observed scores;
    ties go to the lower threshold.
    """
    if policy == "fixed_0.5":
        sens, spec = confusion(scores, labels, 0.5, strict=True)
        return sens, spec, 0.5
    if policy != "youden":
        raise ValueError(f"unknown operating-point policy {policy!r}")
    s, y = _check(scores, labels)
    best = None
    for t in np.unique(s):  # ascending, so the first maximum is the lowest threshold
        sens, spec = confusion(s, y, float(t))
        j = sens + spec - 1.0
        if best is None or j > best[0]:
            best = (j, sens, spec, float(t))
    return best[1], best[2], best[3]


@dataclass
class RateCell:
    identified: int = 0
    total: int = 0

    @property
    def rate(self) -> Optional[float]:
        return self.identified / self.total if self.total else None

    def to_json(self) -> dict:
        return {"identified": self.identified, "total": self.total, "rate": self.rate}


@dataclass
class IdentificationReport:
    lobes: dict[str, RateCell] = field(default_factory=lambda: {k: RateCell() for k in LOBES})
    case_level: RateCell = field(default_factory=RateCell)
    lesion_peaks: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "lobes": {k: v.to_json() for k, v in self.lobes.items()},
            "case_level": self.case_level.to_json(),
            "lesion_peaks": self.lesion_peaks,
        }


def identification_rate(
    heatmaps: Mapping[str, np.ndarray],
    annotations: Mapping[str, Sequence[LesionAnnotation]],
    tau: float = 0.1,
) -> IdentificationReport:
    """A lesion counts as identified iff the peak volume-scale heat inside its ellipsoid exceeds ``tau``.

    A case counts as identified iff at least one of its lesions is.  Cases
    with no annotated lesions are ignored.
    """
    report = IdentificationReport()
    for case_id, lesions in annotations.items():
        if not lesions:
            continue
        if case_id not in heatmaps:
            raise ValueError(f"no heatmap for annotated case {case_id!r}")
        heat = np.asarray(heatmaps[case_id])
        peaks = []
        hit_any = False
        for les in lesions:
            support = les.support(heat.shape)
            peak = float(heat[support].max()) if support.any() else 0.0
            peaks.append(peak)
            hit = peak > tau
            cell = report.lobes[les.lobe]
            cell.total += 1
            cell.identified += int(hit)
            hit_any |= hit
        report.case_level.total += 1
        report.case_level.identified += int(hit_any)
        report.lesion_peaks[case_id] = peaks
    return report


def format_rate(rate: float) -> str:
    """Percent with three significant digits, e.g. 0.8298 -> '83.0%'."""
    return f"{100.0 * rate:#.3g}".rstrip(".") + "%"
