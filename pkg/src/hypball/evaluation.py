"""Biometric metrics for presentation attack detection.

Conventions: higher scores mean "more bonafide"; a sample with score >= t is
accepted as bonafide. APCER is the fraction of attacks accepted, BPCER the
fraction of bonafide rejected.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class ScoreSet:
    bonafide_scores: np.ndarray
    attack_scores: np.ndarray

    def __init__(self, bonafide_scores, attack_scores):
        object.__setattr__(self, "bonafide_scores", np.asarray(bonafide_scores, dtype=np.float64).ravel())
        object.__setattr__(self, "attack_scores", np.asarray(attack_scores, dtype=np.float64).ravel())

    @classmethod
    def from_labels(cls, scores, labels) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        return cls(scores[labels == 1], scores[labels == 0])

    def swapped(self) -> "ScoreSet":
        return ScoreSet(self.attack_scores, self.bonafide_scores)

    def require_both(self):
        if self.bonafide_scores.size == 0 or self.attack_scores.size == 0:
            raise UsageError("metric needs at least one bonafide and one attack score")


def roc_auc(s: ScoreSet) -> float:
    """P(bonafide score > attack score), ties counted one half."""
    s.require_both()
    att = np.sort(s.attack_scores)
    below = np.searchsorted(att, s.bonafide_scores, side="left")
    upto = np.searchsorted(att, s.bonafide_scores, side="right")
    wins = 2 * int(below.sum()) + int((upto - below).sum())
    return wins / (2 * att.size * s.bonafide_scores.size)


def error_rates(s: ScoreSet, threshold: float) -> tuple[float, float]:
    s.require_both()
    apcer = float(np.mean(s.attack_scores >= threshold))
    bpcer = float(np.mean(s.bonafide_scores < threshold))
    return apcer, bpcer


def candidate_thresholds(s: ScoreSet) -> np.ndarray:
    """Midpoints between sorted unique scores plus one threshold beyond each end."""
    u = np.unique(np.concatenate([s.bonafide_scores, s.attack_scores]))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def operating_points(s: ScoreSet) -> list[tuple[Fraction, Fraction]]:
    """Exact (APCER, BPCER) at every candidate threshold."""
    s.require_both()
    n_a, n_b = s.attack_scores.size, s.bonafide_scores.size
    att = np.sort(s.attack_scores)
    bona = np.sort(s.bonafide_scores)
    pts = []
    for t in candidate_thresholds(s):
        accepted = n_a - int(np.searchsorted(att, t, side="left"))
        rejected = int(np.searchsorted(bona, t, side="left"))
        pts.append((Fraction(accepted, n_a), Fraction(rejected, n_b)))
    return pts


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def eer(s: ScoreSet) -> float:
    """Equal error rate on the convex hull of the (APCER, BPCER) operating points.

    The hull edge that crosses APCER == BPCER gives the rate; this is the
    error reachable by randomising between the two thresholds at the edge's
    ends.
    """
    pts = sorted(set(operating_points(s)))
    hull: list = []
    for p in pts:
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    for (x1, y1), (x2, y2) in zip(hull, hull[1:]):
        d1, d2 = x1 - y1, x2 - y2
        if d1 <= 0 <= d2:
            if d1 == d2:
                return float(x1)
            lam = -d1 / (d2 - d1)
            return float(x1 + lam * (x2 - x1))
    return float(hull[0][0])  # unreachable: hull runs from (0, 1) to (1, 0)


def threshold_at_bpcer(dev_bonafide, target_bpcer: float) -> float:
    """Largest threshold rejecting at most ``target_bpcer`` of the dev bonafide scores."""
    scores = np.sort(np.asarray(dev_bonafide, dtype=np.float64).ravel())
    if scores.size == 0:
        raise UsageError("threshold needs at least one bonafide score")
    if not 0.0 <= target_bpcer < 1.0:
        raise UsageError(f"target BPCER must lie in [0, 1), got {target_bpcer}")
    k = min(math.floor(target_bpcer * scores.size + 1e-9), scores.size - 1)
    return float(scores[k])


def acer(s: ScoreSet, threshold: float) -> tuple[float, float, float]:
    apcer, bpcer = error_rates(s, threshold)
    return apcer, bpcer, (apcer + bpcer) / 2.0


def hter_fixed(s: ScoreSet, threshold: float = 0.5) -> float:
    return acer(s, threshold)[2]


def protocol_report(dev: ScoreSet, test: ScoreSet, protocol: str, target_bpcer: float = 0.01) -> dict:
    """Threshold on dev bonafide at the target BPCER, then score the test set."""
    t = threshold_at_bpcer(dev.bonafide_scores, target_bpcer)
    apcer, bpcer, ac = acer(test, t)
    return {
        "protocol": protocol,
        "threshold": t,
        "apcer": apcer,
        "bpcer": bpcer,
        "acer": ac,
        "eer": eer(test),
        "auc": roc_auc(test),
        "hter": hter_fixed(test),
    }


REPORT_KEYS = ("protocol", "threshold", "apcer", "bpcer", "acer", "eer", "auc", "hter")


def format_table(reports: list[dict]) -> str:
    header = f"{'protocol':<20}" + "".join(f"{k:>10}" for k in REPORT_KEYS[1:])
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{str(r['protocol']):<20}" + "".join(f"{r[k]:>10.4f}" for k in REPORT_KEYS[1:]))
    if len(reports) > 1:
        for label, fn in (("mean", np.mean), ("std", np.std)):
            lines.append(f"{label:<20}" + "".join(f"{fn([r[k] for r in reports]):>10.4f}" for k in REPORT_KEYS[1:]))
    return "\n".join(lines)


def write_report(path, reports: list[dict]) -> None:
    payload = reports[0] if len(reports) == 1 else reports
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
