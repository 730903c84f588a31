"""Losses for cosine-classifier training and their analytic logit gradients.

Everything here is a pure function of its inputs. The regularizers act on
the non-target slice of a softmax posterior: with target class ``k`` and
posterior ``p``, the non-target sub-vector ``[p_i]_{i != k}`` is L1-normalized
by ``1 - p_k`` into a distribution ``q`` that the losses compare against the
uniform distribution over the remaining ``K - 1`` classes.

Two equivalent routes to the symmetric-KL (Jeffreys) regularizer are
provided on purpose: :func:`jeffreys_direct` evaluates both KL divergences
against the uniform reference, while :func:`jeffreys_loss` evaluates the
simplified two-term form (label-smoothing term plus weighted non-target
entropy term). Their agreement is a tested invariant, not an implementation
shortcut.

All logarithms are natural. Probabilities are clamped to
``[EPS, 1 - EPS]`` so every loss stays finite and differentiable almost
everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-12

LOSS_KINDS = ("ce", "ce_ls", "ce_jeffreys", "ce_pereyra")


class DegenerateTarget(ValueError):
    """Raised when a posterior has collapsed onto its target class.

    With ``p_k > 1 - EPS`` the non-target mass ``1 - p_k`` is numerically
    zero and the normalized non-target distribution is undefined.
    """


@dataclass(frozen=True)
class LossWeights:
    """Independent weights for the two regularizer terms.

    ``alpha`` scales the label-smoothing term, ``beta`` the non-target
    entropy term. Setting ``alpha == beta`` recovers the single-weight
    symmetric-KL objective; ``beta == 0`` recovers plain label smoothing.
    """

    alpha: float = 0.1
    beta: float = 0.025

    def __post_init__(self) -> None:
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class AamConfig:
    """Additive-angular-margin head settings: temperature ``scale`` and
    additive angle ``margin`` (radians) applied to the target cosine."""

    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self) -> None:
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be finite and > 0, got {self.scale}")
        if not (0 <= self.margin < math.pi / 2):
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")


@dataclass(frozen=True)
class Posterior:
    """A point on the probability simplex with a designated target class.

    The plain constructor validates but does not clamp, so degenerate
    posteriors (target mass within ``EPS`` of 1) are representable and
    surface as :class:`DegenerateTarget` in the operations that cannot
    handle them. Use :meth:`from_probs` (or :func:`softmax`) for the
    clamped production path.
    """

    probs: np.ndarray
    target: int

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size < 2:
            raise ValueError("probs must be a 1-D vector with at least 2 classes")
        if not np.all(np.isfinite(probs)):
            raise ValueError("probs must be finite")
        if np.any(probs <= 0) or np.any(probs >= 1):
            raise ValueError("probs must lie strictly inside (0, 1)")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probs must sum to 1 within 1e-9, got {probs.sum()!r}")
        if not 0 <= self.target < probs.size:
            raise ValueError(f"target {self.target} out of range for K={probs.size}")

    @classmethod
    def from_probs(cls, probs: np.ndarray, target: int) -> "Posterior":
        """Clamp ``probs`` into ``[EPS, 1 - EPS]``, renormalize, and wrap."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or not np.all(np.isfinite(probs)):
            raise ValueError("probs must be a finite 1-D vector")
        clamped = np.clip(probs, EPS, 1.0 - EPS)
        return cls(clamped / clamped.sum(), int(target))

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)

    @property
    def target_prob(self) -> float:
        return float(self.probs[self.target])

    def nontarget_probs(self) -> np.ndarray:
        """The raw non-target probabilities ``[p_i]_{i != k}``."""
        return np.delete(self.probs, self.target)

    def nontarget_distribution(self) -> np.ndarray:
        """The L1-normalized non-target distribution ``q_i = p_i / (1 - p_k)``."""
        residual = 1.0 - self.target_prob
        if residual < EPS:
            raise DegenerateTarget(
                f"target mass {self.target_prob} leaves no non-target probability"
            )
        return self.nontarget_probs() / residual


@dataclass(frozen=True)
class LossBreakdown:
    """Per-example decomposition of the combined objective.

    ``total == ce + alpha * ls_term + beta * entropy_term`` by construction.
    """

    ce: float
    ls_term: float
    entropy_term: float
    total: float


def softmax(logits: np.ndarray, target: int) -> Posterior:
    """Softmax with max-subtraction, clamped to ``[EPS, 1 - EPS]`` and
    renormalized.

    Args:
        logits: finite score vector, one entry per class (K >= 2).
        target: index of the ground-truth class.

    Returns:
        The resulting :class:`Posterior`.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("logits must be a 1-D vector with at least 2 classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return Posterior.from_probs(softmax_matrix(z[None, :])[0], target)


def softmax_matrix(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a ``[batch, K]`` matrix, clamped and
    renormalized like :func:`softmax`."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    p = np.clip(p, EPS, 1.0 - EPS)
    return p / p.sum(axis=1, keepdims=True)


def aam_transform(cosines: np.ndarray, target: int, cfg: AamConfig) -> np.ndarray:
    """Turn class cosines into margin-adjusted, temperature-scaled logits.

    The target entry becomes ``scale * cos(arccos(c_target) + margin)``;
    every other entry is plain ``scale * c_i``. With ``margin == 0`` the
    transform is pure scaling.

    Raises:
        ValueError: if any cosine lies outside ``[-1, 1]`` by more than
            1e-9 (a sign of unnormalized embeddings). Excess within that
            slack is clamped.
    """
    c = np.asarray(cosines, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise ValueError("cosines must be a 1-D vector with at least 2 classes")
    if not 0 <= target < c.size:
        raise ValueError(f"target {target} out of range for K={c.size}")
    if np.any(np.abs(c) > 1.0 + 1e-9):
        raise ValueError(
            f"cosines must lie in [-1, 1] (max |c| = {np.max(np.abs(c))!r}); "
            "inputs look unnormalized"
        )
    c = np.clip(c, -1.0, 1.0)
    z = cfg.scale * c
    if cfg.margin != 0.0:
        z[target] = cfg.scale * math.cos(math.acos(c[target]) + cfg.margin)
    return z


def aam_transform_matrix(
    cosines: np.ndarray, targets: np.ndarray, cfg: AamConfig
) -> np.ndarray:
    """Batched :func:`aam_transform` for a ``[batch, K]`` cosine matrix."""
    c = np.clip(np.asarray(cosines, dtype=np.float64), -1.0, 1.0)
    rows = np.arange(c.shape[0])
    z = cfg.scale * c
    if cfg.margin != 0.0:
        z[rows, targets] = cfg.scale * np.cos(np.arccos(c[rows, targets]) + cfg.margin)
    return z


def cross_entropy(p: Posterior) -> float:
    """Hard-target cross entropy, ``-log p_k``."""
    return float(-np.log(p.target_prob))


def label_smoothing_term(p: Posterior) -> float:
    """Label-smoothing regularizer ``-(1/(K-1)) * sum_{i != k} log p_i``.

    Strictly positive; over the non-target slice, minimized when the
    non-target mass is spread uniformly.
    """
    return float(-np.log(p.nontarget_probs()).sum() / (p.num_classes - 1))


def entropy_term(p: Posterior) -> float:
    """Weighted non-target entropy term ``sum_{i != k} p_i log p_i / (1 - p_k)``.

    Always <= 0. Equals ``sum_i q_i log q_i + log(1 - p_k)`` for the
    normalized non-target distribution ``q``, so it simultaneously rewards
    uniform non-target mass and a large target probability.

    Raises:
        DegenerateTarget: if ``1 - p_k < EPS``.
    """
    residual = 1.0 - p.target_prob
    if residual < EPS:
        raise DegenerateTarget(
            f"target mass {p.target_prob} leaves no non-target probability"
        )
    nt = p.nontarget_probs()
    return float((nt * np.log(nt)).sum() / residual)


def jeffreys_direct(p: Posterior) -> float:
    """Symmetric KL divergence between the normalized non-target
    distribution and the uniform distribution, from the definition.

    Computes ``D_KL(u || q) + D_KL(q || u)`` with ``u = 1/(K-1)``.
    Nonnegative; zero iff all non-target probabilities are equal. For
    ``K == 2`` the single non-target point always equals the uniform
    reference, so the divergence is 0 by convention.
    """
    if p.num_classes == 2:
        return 0.0
    q = p.nontarget_distribution()
    u = 1.0 / (p.num_classes - 1)
    log_ratio = np.log(q / u)
    return float((q * log_ratio).sum() - u * log_ratio.sum())


def jeffreys_loss(p: Posterior) -> float:
    """The simplified form of :func:`jeffreys_direct`:
    ``label_smoothing_term(p) + entropy_term(p)``.

    Must agree with the direct evaluation to within
    ``1e-9 + 1e-9 * |value|``; returns 0 for ``K == 2`` by the same
    convention.
    """
    if p.num_classes == 2:
        return 0.0
    return label_smoothing_term(p) + entropy_term(p)


def confidence_penalty_variant(p: Posterior) -> float:
    """Negative entropy over all classes, ``sum_i p_i log p_i``, including
    the target and without the ``1 - p_k`` denominator.

    Ablation alternative to :func:`entropy_term`.
    """
    return float((p.probs * np.log(p.probs)).sum())


def combined_loss(p: Posterior, weights: LossWeights) -> LossBreakdown:
    """Cross entropy plus independently weighted regularizer terms.

    ``total = ce + alpha * ls_term + beta * entropy_term``. With
    ``alpha == beta`` this equals ``ce + alpha * jeffreys_loss(p)``; with
    ``beta == 0`` it is the label-smoothing objective.
    """
    ce = cross_entropy(p)
    ls = label_smoothing_term(p)
    ent = entropy_term(p)
    return LossBreakdown(
        ce=ce,
        ls_term=ls,
        entropy_term=ent,
        total=ce + weights.alpha * ls + weights.beta * ent,
    )


def effective_weights(kind: str, weights: LossWeights) -> tuple[float, float]:
    """Map a loss kind to the (alpha, beta) actually applied.

    ``ce`` ignores both weights, ``ce_ls`` drops beta, ``ce_jeffreys`` uses
    both, and ``ce_pereyra`` applies beta to the all-label confidence
    penalty (alpha is unused there).
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if kind == "ce":
        return 0.0, 0.0
    if kind == "ce_ls":
        return weights.alpha, 0.0
    if kind == "ce_pereyra":
        return 0.0, weights.beta
    return weights.alpha, weights.beta


def breakdown_matrix(
    probs: np.ndarray,
    targets: np.ndarray,
    weights: LossWeights,
    kind: str = "ce_jeffreys",
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-row loss decomposition for a ``[batch, K]`` posterior matrix.

    Returns ``(ce, ls, ent, total)`` arrays of length ``batch``. For
    ``ce_pereyra`` the ``ent`` column holds the all-label confidence
    penalty instead of the non-target entropy term; in every case
    ``total == ce + alpha_eff * ls + beta_eff * ent``.
    """
    alpha, beta = effective_weights(kind, weights)
    p = np.asarray(probs, dtype=np.float64)
    batch, num_classes = p.shape
    rows = np.arange(batch)
    logp = np.log(p)
    pk = p[rows, targets]

    ce = -logp[rows, targets]
    ls = -(logp.sum(axis=1) - logp[rows, targets]) / (num_classes - 1)
    if kind == "ce_pereyra":
        ent = (p * logp).sum(axis=1)
    else:
        residual = 1.0 - pk
        if np.any(residual < EPS):
            raise DegenerateTarget("a posterior row has collapsed onto its target")
        ent = ((p * logp).sum(axis=1) - pk * logp[rows, targets]) / residual
    return ce, ls, ent, ce + alpha * ls + beta * ent


def grad_logits_matrix(
    probs: np.ndarray,
    targets: np.ndarray,
    weights: LossWeights,
    kind: str = "ce_jeffreys",
) -> np.ndarray:
    """Row-wise gradient of the combined loss w.r.t. the logits.

    Closed forms per term (k the target, q the normalized non-target
    distribution, H(q) its entropy):

    * cross entropy:     ``p_i - [i == k]``
    * label smoothing:   ``p_i - [i != k] / (K - 1)``
    * non-target entropy: ``-p_k`` at the target;
      ``q_i * (log q_i + 1 - (1 - p_k) + H(q))`` elsewhere
    * confidence penalty: ``p_i * (log p_i - sum_j p_j log p_j)``

    Each term's components sum to zero, preserving softmax shift
    invariance.
    """
    alpha, beta = effective_weights(kind, weights)
    p = np.asarray(probs, dtype=np.float64)
    batch, num_classes = p.shape
    rows = np.arange(batch)
    logp = np.log(p)
    pk = p[rows, targets]

    grad = p.copy()
    grad[rows, targets] -= 1.0

    if alpha > 0:
        ls_grad = p - 1.0 / (num_classes - 1)
        ls_grad[rows, targets] = pk
        grad += alpha * ls_grad

    if beta > 0:
        if kind == "ce_pereyra":
            neg_entropy = (p * logp).sum(axis=1)
            grad += beta * p * (logp - neg_entropy[:, None])
        else:
            residual = 1.0 - pk
            if np.any(residual < EPS):
                raise DegenerateTarget("a posterior row has collapsed onto its target")
            q = p / residual[:, None]
            logq = logp - np.log(residual)[:, None]
            entropy_q = -((q * logq).sum(axis=1)
                          - q[rows, targets] * logq[rows, targets])
            ent_grad = q * (logq + (1.0 - residual[:, None]) + entropy_q[:, None])
            ent_grad[rows, targets] = -pk
            grad += beta * ent_grad

    return grad


def _margin_grad_factor(cos_target: np.ndarray, cfg: AamConfig) -> np.ndarray:
    """d(margin-adjusted target logit)/d(cosine), divided by ``scale``.

    Equals ``sin(theta + margin) / sin(theta)`` with ``theta = arccos(c)``;
    1 when the margin is zero. The denominator is floored at 1e-12, so the
    factor is only meaningful away from ``|c| == 1``.
    """
    if cfg.margin == 0.0:
        return np.ones_like(cos_target)
    theta = np.arccos(np.clip(cos_target, -1.0, 1.0))
    return np.sin(theta + cfg.margin) / np.maximum(np.sin(theta), 1e-12)


def grad_cosines_matrix(
    cosines: np.ndarray,
    targets: np.ndarray,
    weights: LossWeights,
    cfg: AamConfig,
    kind: str = "ce_jeffreys",
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the combined loss w.r.t. raw class cosines, through the
    margin transform and softmax.

    Returns ``(grad, probs)`` so callers can reuse the posterior matrix.
    """
    c = np.asarray(cosines, dtype=np.float64)
    rows = np.arange(c.shape[0])
    z = aam_transform_matrix(c, targets, cfg)
    p = softmax_matrix(z)
    grad = cfg.scale * grad_logits_matrix(p, targets, weights, kind)
    grad[rows, targets] *= _margin_grad_factor(c[rows, targets], cfg)
    return grad, p


def combined_loss_grad(
    logits: np.ndarray,
    target: int,
    weights: LossWeights,
    aam: AamConfig | None = None,
) -> np.ndarray:
    """Analytic gradient of the combined loss for a single example.

    Without ``aam``, ``logits`` are used as-is and the gradient is taken
    w.r.t. them. With ``aam``, ``logits`` are interpreted as raw cosines
    and the gradient is taken w.r.t. those cosines, through the margin
    transform.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("logits must be a 1-D vector with at least 2 classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    targets = np.array([target])
    if aam is None:
        p = softmax_matrix(z[None, :])
        return grad_logits_matrix(p, targets, weights, "ce_jeffreys")[0]
    grad, _ = grad_cosines_matrix(z[None, :], targets, weights, aam, "ce_jeffreys")
    return grad[0]
