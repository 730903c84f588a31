"""Verification scoring and metrics: centered cosine scores, DET curves,
EER, and normalized minimum detection cost.

Conventions (fixed so that independent implementations agree exactly):

* A score equal to the decision threshold counts as an acceptance, i.e.
  ``P_fa(t)`` is the fraction of non-target scores ``>= t`` and
  ``P_miss(t)`` the fraction of target scores ``< t``.
* The DET curve enumerates every distinct score as a threshold plus the
  ``-inf`` (accept everything) and ``+inf`` (reject everything) corners.
* EER interpolates linearly between the two adjacent operating points
  that bracket the sign change of ``P_miss - P_fa``.
"""

from __future__ import annotations

import json
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .synthdata import TrialList


class EmptyScores(ValueError):
    """Raised when metrics are requested for an empty score set."""


class ZeroVector(ValueError):
    """Raised when a centered embedding has numerically zero norm."""


class MissingEmbedding(KeyError):
    """Raised when a trial references an utterance with no embedding."""


@dataclass
class ScoreSet:
    """Trial scores partitioned into target and non-target."""

    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self) -> None:
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64)
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64)


@dataclass
class DetCurve:
    """Operating points ordered by increasing threshold.

    As the threshold grows, ``p_fa`` never increases and ``p_miss`` never
    decreases; the endpoints are the accept-everything point
    (p_fa=1, p_miss=0) and the reject-everything point (p_fa=0, p_miss=1).
    Both invariants are asserted at construction.
    """

    thresholds: np.ndarray
    p_fa: np.ndarray
    p_miss: np.ndarray

    def __post_init__(self) -> None:
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.p_fa = np.asarray(self.p_fa, dtype=np.float64)
        self.p_miss = np.asarray(self.p_miss, dtype=np.float64)
        if not (self.thresholds.size == self.p_fa.size == self.p_miss.size):
            raise ValueError("threshold/p_fa/p_miss lengths disagree")
        if np.any(np.diff(self.p_fa) > 0) or np.any(np.diff(self.p_miss) < 0):
            raise ValueError("DET curve is not monotone")
        if not (
            self.p_fa[0] == 1.0
            and self.p_miss[0] == 0.0
            and self.p_fa[-1] == 0.0
            and self.p_miss[-1] == 1.0
        ):
            raise ValueError("DET curve endpoints must be (1, 0) and (0, 1)")


@dataclass
class MetricsReport:
    """EER and minDCF for a score set, with the cost model echoed back."""

    eer: float
    min_dcf: float
    n_target: int
    n_nontarget: int
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def to_dict(self, **extra) -> dict:
        doc = {
            "eer": self.eer,
            "min_dcf": self.min_dcf,
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
            "p_target": self.p_target,
            "c_miss": self.c_miss,
            "c_fa": self.c_fa,
        }
        doc.update(extra)
        return doc


def center_and_cosine_score(
    enroll: np.ndarray, test: np.ndarray, train_mean: np.ndarray
) -> float:
    """Cosine similarity of two embeddings after subtracting the overall
    training-set mean.

    Raises:
        ZeroVector: if either centered embedding has norm < 1e-12.
    """
    a = np.asarray(enroll, dtype=np.float64) - train_mean
    b = np.asarray(test, dtype=np.float64) - train_mean
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("centered embedding has (numerically) zero norm")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_trials(
    trials: TrialList,
    embeddings: Mapping[int, np.ndarray],
    train_mean: np.ndarray,
) -> ScoreSet:
    """Apply :func:`center_and_cosine_score` to every trial pair and split
    the scores by target flag.

    Raises:
        MissingEmbedding: if a trial references an unknown utterance id.
    """
    target, nontarget = [], []
    for a, b, is_target in zip(trials.utt_a, trials.utt_b, trials.is_target):
        try:
            ea, eb = embeddings[int(a)], embeddings[int(b)]
        except KeyError as exc:
            raise MissingEmbedding(f"no embedding for utterance {exc.args[0]}") from exc
        score = center_and_cosine_score(ea, eb, train_mean)
        (target if is_target else nontarget).append(score)
    return ScoreSet(np.asarray(target), np.asarray(nontarget))


def compute_det(scores: ScoreSet) -> DetCurve:
    """Exact empirical DET curve over all distinct score thresholds plus
    the two boundary corners."""
    tgt = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    if tgt.size == 0 or non.size == 0:
        raise EmptyScores("both target and non-target scores are required")
    inner = np.unique(np.concatenate([tgt, non]))
    thresholds = np.concatenate([[-np.inf], inner, [np.inf]])
    # score >= t accepts: P_miss counts targets < t, P_fa non-targets >= t.
    p_miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    p_fa = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    return DetCurve(thresholds=thresholds, p_fa=p_fa, p_miss=p_miss)


def compute_eer(curve: DetCurve) -> float:
    """Equal error rate: the common value of P_miss and P_fa where the two
    step functions cross, linearly interpolated between the bracketing
    operating points."""
    diff = curve.p_miss - curve.p_fa
    idx = int(np.argmax(diff >= 0))
    if diff[idx] == 0:
        return float(curve.p_miss[idx])
    pm0, pf0 = curve.p_miss[idx - 1], curve.p_fa[idx - 1]
    pm1, pf1 = curve.p_miss[idx], curve.p_fa[idx]
    t = (pf0 - pm0) / ((pm1 - pm0) - (pf1 - pf0))
    return float(pm0 + t * (pm1 - pm0))


def compute_min_dcf(
    curve: DetCurve,
    p_target: float = 0.01,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Normalized minimum detection cost over all operating points.

    ``min_t (c_miss * p_target * P_miss + c_fa * (1 - p_target) * P_fa)``
    divided by ``min(c_miss * p_target, c_fa * (1 - p_target))``. Never
    exceeds 1 because the boundary corners are part of the curve.
    """
    if not 0 < p_target < 1:
        raise ValueError("p_target must lie in (0, 1)")
    if c_miss <= 0 or c_fa <= 0:
        raise ValueError("costs must be > 0")
    costs = c_miss * p_target * curve.p_miss + c_fa * (1 - p_target) * curve.p_fa
    return float(costs.min() / min(c_miss * p_target, c_fa * (1 - p_target)))


def metrics_report(
    scores: ScoreSet,
    p_target: float = 0.01,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> MetricsReport:
    """EER and minDCF of a score set in one shot."""
    curve = compute_det(scores)
    return MetricsReport(
        eer=compute_eer(curve),
        min_dcf=compute_min_dcf(curve, p_target, c_miss, c_fa),
        n_target=int(scores.target_scores.size),
        n_nontarget=int(scores.nontarget_scores.size),
        p_target=p_target,
        c_miss=c_miss,
        c_fa=c_fa,
    )


def operating_point(curve: DetCurve, index: int) -> dict:
    """One curve point as a JSON-friendly mapping."""
    return {
        "threshold": float(curve.thresholds[index]),
        "p_fa": float(curve.p_fa[index]),
        "p_miss": float(curve.p_miss[index]),
    }


def save_det_csv(curve: DetCurve, path: str | Path) -> None:
    """CSV export: threshold, p_fa, p_miss (infinities serialized as text)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "p_fa", "p_miss"])
        for t, fa, miss in zip(curve.thresholds, curve.p_fa, curve.p_miss):
            writer.writerow([repr(float(t)), repr(float(fa)), repr(float(miss))])


def save_metrics_json(report: MetricsReport, path: str | Path, **extra) -> None:
    """JSON export of a metrics report plus caller-supplied context fields
    (loss kind, domain tag, seed, ...)."""
    Path(path).write_text(json.dumps(report.to_dict(**extra), sort_keys=True, indent=2))
