"""Output-distribution diagnostics for trained classifiers.

Given posteriors of evaluation utterances over the training classes, the
top-training-speaker count of an utterance is the size of the smallest
set of classes, taken in decreasing probability order, whose cumulative
mass reaches a retention threshold ``tau``. Utterances from data far from
the training domain spread their mass over many classes, so the mean
count rises with domain mismatch; the expected-KL comparison
(:func:`mean_kl_gap`) quantifies the same effect against two reference
posteriors.

Eval-side posteriors carry no ground-truth training class, so these
operations accept bare probability vectors as well as
:class:`~losslab.losses.Posterior` objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import EPS, Posterior


class EmptyDataset(ValueError):
    """Raised when a diagnostic is requested for zero utterances."""


@dataclass
class ProbeResult:
    """Per-utterance top-training-speaker counts and their mean."""

    per_utterance_top_counts: np.ndarray
    mean_top_count: float
    domain_tag: str
    tau: float

    def to_dict(self, include_counts: bool = True) -> dict:
        doc = {
            "mean_top_count": self.mean_top_count,
            "n_utterances": int(self.per_utterance_top_counts.size),
            "domain_tag": self.domain_tag,
            "tau": self.tau,
        }
        if include_counts:
            doc["per_utterance_top_counts"] = [
                int(c) for c in self.per_utterance_top_counts
            ]
        return doc


def _as_prob_vector(p) -> np.ndarray:
    probs = p.probs if isinstance(p, Posterior) else np.asarray(p, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise ValueError("expected a 1-D probability vector with at least 2 classes")
    if abs(float(probs.sum()) - 1.0) > 1e-6 or np.any(probs < 0):
        raise ValueError("expected a probability vector on the simplex")
    return probs


def top_training_speakers(p, tau: float = 0.9) -> int:
    """Size of the smallest high-probability class set covering mass ``tau``.

    Classes are taken in decreasing probability order; ties are broken by
    the lower index first, so the result is deterministic.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    probs = _as_prob_vector(p)
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    reached = np.flatnonzero(cumulative >= tau)
    # Rounding may leave the full cumsum a hair under tau == 1.
    return int(reached[0]) + 1 if reached.size else int(probs.size)


def probe_dataset(posteriors, tau: float = 0.9, domain_tag: str = "") -> ProbeResult:
    """Aggregate :func:`top_training_speakers` over a set of utterances.

    ``posteriors`` is an iterable of probability vectors (or a
    ``[n, K]`` matrix).
    """
    counts = [top_training_speakers(p, tau) for p in posteriors]
    if not counts:
        raise EmptyDataset("no posteriors to probe")
    arr = np.asarray(counts, dtype=np.int64)
    return ProbeResult(
        per_utterance_top_counts=arr,
        mean_top_count=float(arr.mean()),
        domain_tag=domain_tag,
        tau=tau,
    )


def mean_kl_gap(posteriors, q1, q2) -> tuple[float, float]:
    """Mean KL divergence from a posterior set to two reference posteriors.

    Returns ``(E_p[D_KL(p || q1)], E_p[D_KL(p || q2)])``. Because the
    entropy of ``p`` cancels in the difference, the gap between the two
    expectations equals ``E[p] . (log q2 - log q1)`` — comparing mean
    divergences against fixed references reduces to one dot product with
    the mean posterior.
    """
    rows = [_as_prob_vector(p) for p in posteriors]
    if not rows:
        raise EmptyDataset("no posteriors to compare")
    p = np.vstack(rows)
    ref1 = np.clip(_as_prob_vector(q1), EPS, None)
    ref2 = np.clip(_as_prob_vector(q2), EPS, None)
    if ref1.size != p.shape[1] or ref2.size != p.shape[1]:
        raise ValueError("reference posteriors must match the class count")
    safe_p = np.clip(p, EPS, None)
    entropy_part = (p * np.log(safe_p)).sum(axis=1)
    kl1 = entropy_part - (p * np.log(ref1)).sum(axis=1)
    kl2 = entropy_part - (p * np.log(ref2)).sum(axis=1)
    return float(kl1.mean()), float(kl2.mean())


def save_probe_json(result: ProbeResult, path: str | Path, include_counts: bool = True) -> None:
    Path(path).write_text(json.dumps(result.to_dict(include_counts), sort_keys=True, indent=2))


def save_probe_counts_csv(result: ProbeResult, path: str | Path) -> None:
    """Optional per-utterance CSV export: index, top_count."""
    lines = ["index,top_count"]
    lines += [f"{i},{int(c)}" for i, c in enumerate(result.per_utterance_top_counts)]
    Path(path).write_text("\n".join(lines) + "\n")
