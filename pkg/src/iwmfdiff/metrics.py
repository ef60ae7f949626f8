"""Verification error rates over cosine-similarity scores.

A comparison is accepted when ``score >= tau``.
"""

from __future__ import annotations

import numpy as np


def _scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} scores are empty")
    return arr


def frr(genuine_scores, tau: float) -> float:
    """Fraction of genuine scores rejected (below ``tau``)."""
    g = _scores(genuine_scores, "genuine")
    return float(np.count_nonzero(g < tau)) / g.size


def far(imposter_scores, tau: float) -> float:
    """Fraction of imposter or attack scores accepted (at or above ``tau``).

    For adversarial examples this is the attack success rate.
    """
    s = _scores(imposter_scores, "imposter")
    return float(np.count_nonzero(s >= tau)) / s.size


def candidate_thresholds(*score_lists) -> np.ndarray:
    """Smallest score, midpoints between consecutive distinct scores, and
    the float just above the largest score (which rejects everything)."""
    u = np.unique(np.concatenate([np.ravel(s) for s in score_lists]))
    mids = (u[:-1] + u[1:]) / 2
    return np.concatenate([u[:1], mids, [np.nextafter(u[-1], np.inf)]])


def rate_curves(genuine_scores, other_scores, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """FRR of ``genuine_scores`` and FAR of ``other_scores`` at each threshold."""
    g = np.sort(_scores(genuine_scores, "genuine"))
    o = np.sort(_scores(other_scores, "imposter"))
    t = np.asarray(thresholds, dtype=np.float64)
    frr_c = np.searchsorted(g, t, side="left") / g.size
    far_c = (o.size - np.searchsorted(o, t, side="left")) / o.size
    return frr_c, far_c


def crossing(genuine_scores, other_scores) -> tuple[float, float, float]:
    """Threshold where FRR(genuine) and FAR(other) are closest.

    Ties on ``|FAR - FRR|`` go to the smaller ``FAR + FRR``; any remaining tie
    (a flat stretch, e.g. a gap between perfectly separated sets) resolves to
    the middle candidate.  Returns ``(tau, frr, far)``.
    """
    cands = candidate_thresholds(genuine_scores, other_scores)
    frr_c, far_c = rate_curves(genuine_scores, other_scores, cands)
    gap = np.abs(far_c - frr_c)
    keep = np.flatnonzero(gap == gap.min())
    total = (far_c + frr_c)[keep]
    keep = keep[total == total.min()]
    k = keep[(len(keep) - 1) // 2]
    return float(cands[k]), float(frr_c[k]), float(far_c[k])


def eer(genuine_scores, imposter_scores) -> tuple[float, float]:
    """Equal error rate and its threshold, from a discrete threshold sweep.

    No interpolation: the reported rate is ``(FAR + FRR) / 2`` at the swept
    threshold where the two are closest.
    """
    tau, r, a = crossing(genuine_scores, imposter_scores)
    return (r + a) / 2, tau


def roc_curve(genuine_scores, imposter_scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(far, tar, thresholds)`` with thresholds descending, from (0, 0) to (1, 1)."""
    t = candidate_thresholds(genuine_scores, imposter_scores)[::-1]
    frr_c, far_c = rate_curves(genuine_scores, imposter_scores, t)
    return far_c, 1.0 - frr_c, t


def auc(genuine_scores, imposter_scores) -> float:
    """Trapezoidal area under the (FAR, TAR) curve.

    Accumulated in integer counts so the result is exactly the
    Mann-Whitney statistic with ties counted as one half.
    """
    g = np.sort(_scores(genuine_scores, "genuine"))
    o = np.sort(_scores(imposter_scores, "imposter"))
    t = candidate_thresholds(g, o)[::-1]
    accepted_g = g.size - np.searchsorted(g, t, side="left")
    accepted_o = o.size - np.searchsorted(o, t, side="left")
    twice_area = np.sum(np.diff(accepted_o) * (accepted_g[1:] + accepted_g[:-1]))
    return float(twice_area) / (2 * g.size * o.size)
