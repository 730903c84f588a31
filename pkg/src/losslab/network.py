"""A small deterministic embedding network with a cosine classification head.

The network is a plain MLP: affine + activation hidden layers, a linear
embedding layer, then L2 normalization. Class logits are cosines between
the unit embedding and unit-norm class-weight rows, passed through the
additive-angular-margin transform during training.

Training is SGD with momentum and optional weight decay. Class-weight rows
are renormalized to unit length after every optimizer step (rather than
being projected in the forward pass), which keeps the backward pass a
plain matrix chain. Every run is a pure function of (data, config): the
per-epoch shuffle is keyed by (seed, epoch) and all parameter state lives
in explicit arrays.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import (
    AamConfig,
    LOSS_KINDS,
    LossBreakdown,
    LossWeights,
    aam_transform_matrix,
    breakdown_matrix,
    grad_cosines_matrix,
    softmax_matrix,
)

PARAMS_FORMAT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh")


class NonFiniteLoss(FloatingPointError):
    """Raised when a training step produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the embedding network."""

    input_dim: int = 20
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 16
    num_classes: int = 50
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, self.embed_dim, *self.hidden_dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.num_classes < 3:
            raise ValueError("num_classes must be >= 3 so non-target regularizers are nondegenerate")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        """Input dim, hidden dims, embedding dim."""
        return (self.input_dim, *self.hidden_dims, self.embed_dim)


@dataclass
class NetworkParams:
    """Weights of the network: per-layer affine parameters plus the
    class-weight matrix (unit-norm rows)."""

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    class_weights: np.ndarray

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            class_weights=self.class_weights.copy(),
        )

    def tensors(self) -> list[np.ndarray]:
        """All trainable arrays, in a stable order."""
        return [*self.weights, *self.biases, self.class_weights]


@dataclass
class OptimizerState:
    """SGD-with-momentum state; buffers are shaped like the parameters."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 2e-4
    weight_decay_enabled: bool = True
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def for_params(
        cls,
        params: NetworkParams,
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 2e-4,
        weight_decay_enabled: bool = True,
    ) -> "OptimizerState":
        return cls(
            learning_rate=learning_rate,
            momentum=momentum,
            weight_decay=weight_decay,
            weight_decay_enabled=weight_decay_enabled,
            velocities=[np.zeros_like(t) for t in params.tensors()],
        )


@dataclass(frozen=True)
class LrSchedule:
    """Constant learning rate or step decay by ``factor`` every
    ``every_n_epochs`` epochs."""

    kind: str = "step_decay"
    factor: float = 0.5
    every_n_epochs: int = 10

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "step_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step_decay" and (self.factor <= 0 or self.every_n_epochs < 1):
            raise ValueError("step_decay needs factor > 0 and every_n_epochs >= 1")

    def rate_at(self, base_rate: float, epoch: int) -> float:
        if self.kind == "constant":
            return base_rate
        return base_rate * self.factor ** (epoch // self.every_n_epochs)


@dataclass(frozen=True)
class TrainConfig:
    """Everything (besides the data) that determines a training run."""

    loss_kind: str = "ce_jeffreys"
    weights: LossWeights = LossWeights()
    aam: AamConfig = AamConfig()
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 0.05
    lr_schedule: LrSchedule = LrSchedule()
    momentum: float = 0.9
    weight_decay: float = 2e-4
    weight_decay_enabled: bool = True

    def __post_init__(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative 64-bit integer")


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Initialize parameters deterministically from ``seed``.

    Affine weights are drawn uniformly from ``[-b, b]`` with
    ``b = sqrt(6 / (fan_in + fan_out))``; biases start at zero; the
    class-weight rows are drawn from the same scheme and then normalized
    to unit length.
    """
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    bound = math.sqrt(6.0 / (spec.embed_dim + spec.num_classes))
    cw = rng.uniform(-bound, bound, size=(spec.num_classes, spec.embed_dim))
    cw /= np.linalg.norm(cw, axis=1, keepdims=True)
    return NetworkParams(spec=spec, weights=weights, biases=biases, class_weights=cw)


def _activation(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    return (pre > 0).astype(np.float64) if name == "relu" else 1.0 - post * post


def _forward_cached(params: NetworkParams, inputs: np.ndarray):
    """Forward pass keeping the intermediates the backward pass needs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"inputs must have shape [batch, {params.spec.input_dim}], got {x.shape}"
        )
    activations = [x]
    pre_acts = []
    n_hidden = len(params.spec.hidden_dims)
    for i in range(n_hidden):
        pre = activations[-1] @ params.weights[i] + params.biases[i]
        pre_acts.append(pre)
        activations.append(_activation(params.spec.activation, pre))
    raw = activations[-1] @ params.weights[-1] + params.biases[-1]
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    # Degenerate-embedding guard: nudge all-zero vectors off the origin.
    guarded = raw.copy()
    guarded[norms[:, 0] < 1e-9, 0] += 1e-9
    norms = np.linalg.norm(guarded, axis=1, keepdims=True)
    embeddings = guarded / norms
    return activations, pre_acts, guarded, norms, embeddings


def forward_embed(params: NetworkParams, inputs: np.ndarray) -> np.ndarray:
    """Map a ``[batch, input_dim]`` matrix to unit-norm embeddings."""
    return _forward_cached(params, inputs)[4]


def forward_cosines(params: NetworkParams, embeddings: np.ndarray) -> np.ndarray:
    """Cosines between unit embeddings and the unit class-weight rows,
    clipped into ``[-1, 1]`` (excess beyond rounding noise means the
    inputs were not normalized)."""
    e = np.asarray(embeddings, dtype=np.float64)
    cos = e @ params.class_weights.T
    if np.any(np.abs(cos) > 1.0 + 1e-9):
        raise ValueError("cosines exceed [-1, 1]; embeddings or class weights are unnormalized")
    return np.clip(cos, -1.0, 1.0)


def forward_posteriors(params: NetworkParams, inputs: np.ndarray, scale: float) -> np.ndarray:
    """Inference-time posteriors ``softmax(scale * cosines)`` for a batch.

    No margin is applied: the margin needs a ground-truth class and exists
    only inside the training loss.
    """
    cos = forward_cosines(params, forward_embed(params, inputs))
    return softmax_matrix(scale * cos)


def batch_loss(
    params: NetworkParams,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Mean loss decomposition of a batch under the configured objective."""
    labels = np.asarray(labels, dtype=np.int64)
    embeddings = forward_embed(params, inputs)
    cosines = forward_cosines(params, embeddings)
    logits = aam_transform_matrix(cosines, labels, cfg.aam)
    probs = softmax_matrix(logits)
    ce, ls, ent, total = breakdown_matrix(probs, labels, cfg.weights, cfg.loss_kind)
    return LossBreakdown(
        ce=float(ce.mean()),
        ls_term=float(ls.mean()),
        entropy_term=float(ent.mean()),
        total=float(total.mean()),
    )


def _backward(
    params: NetworkParams,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Gradients of the batch-mean loss for every tensor in
    ``params.tensors()`` order, plus the loss decomposition."""
    labels = np.asarray(labels, dtype=np.int64)
    activations, pre_acts, raw, norms, embeddings = _forward_cached(params, inputs)
    batch = inputs.shape[0]
    cosines = forward_cosines(params, embeddings)

    grad_cos, probs = grad_cosines_matrix(
        cosines, labels, cfg.weights, cfg.aam, cfg.loss_kind
    )
    grad_cos = grad_cos / batch
    ce, ls, ent, total = breakdown_matrix(probs, labels, cfg.weights, cfg.loss_kind)
    breakdown = LossBreakdown(
        ce=float(ce.mean()),
        ls_term=float(ls.mean()),
        entropy_term=float(ent.mean()),
        total=float(total.mean()),
    )

    grad_class = grad_cos.T @ embeddings
    grad_embed = grad_cos @ params.class_weights
    # Through L2 normalization: project out the radial component.
    radial = (grad_embed * embeddings).sum(axis=1, keepdims=True)
    grad_raw = (grad_embed - radial * embeddings) / norms

    n_hidden = len(params.spec.hidden_dims)
    grad_weights: list[np.ndarray] = [None] * (n_hidden + 1)
    grad_biases: list[np.ndarray] = [None] * (n_hidden + 1)
    grad_weights[-1] = activations[-1].T @ grad_raw
    grad_biases[-1] = grad_raw.sum(axis=0)
    upstream = grad_raw @ params.weights[-1].T
    for i in range(n_hidden - 1, -1, -1):
        upstream = upstream * _activation_grad(
            params.spec.activation, pre_acts[i], activations[i + 1]
        )
        grad_weights[i] = activations[i].T @ upstream
        grad_biases[i] = upstream.sum(axis=0)
        upstream = upstream @ params.weights[i].T
    return breakdown, [*grad_weights, *grad_biases, grad_class]


def apply_sgd_update(
    params: NetworkParams, opt: OptimizerState, grads: list[np.ndarray]
) -> None:
    """One in-place SGD-with-momentum update.

    ``v <- momentum * v + (g + wd * theta)``, ``theta <- theta - lr * v``,
    then class-weight rows are renormalized to unit length.
    """
    tensors = params.tensors()
    if len(opt.velocities) != len(tensors):
        raise ValueError("optimizer state does not match the parameter layout")
    for theta, v, g in zip(tensors, opt.velocities, grads):
        step = g + opt.weight_decay * theta if opt.weight_decay_enabled else g
        v *= opt.momentum
        v += step
        theta -= opt.learning_rate * v
    params.class_weights /= np.linalg.norm(params.class_weights, axis=1, keepdims=True)


def train_step(
    params: NetworkParams,
    opt: OptimizerState,
    batch_inputs: np.ndarray,
    batch_labels: np.ndarray,
    cfg: TrainConfig,
) -> LossBreakdown:
    """One optimization step on a batch; mutates ``params`` and ``opt``.

    Raises:
        NonFiniteLoss: if the loss or any gradient is non-finite, which
            signals divergence; the caller should abort the run.
    """
    breakdown, grads = _backward(params, batch_inputs, batch_labels, cfg)
    if not math.isfinite(breakdown.total) or any(
        not np.all(np.isfinite(g)) for g in grads
    ):
        raise NonFiniteLoss(f"non-finite loss or gradient (total={breakdown.total})")
    apply_sgd_update(params, opt, grads)
    return breakdown


def fit(
    spec: NetworkSpec,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[NetworkParams, list[LossBreakdown]]:
    """Train a fresh network; returns final parameters and the per-epoch
    mean loss decomposition.

    Shuffling is keyed by ``(seed, epoch)``, so identical (data, config)
    pairs give bitwise-identical runs.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= spec.num_classes:
        raise ValueError("labels must lie in [0, num_classes)")
    params = init_params(spec, cfg.seed)
    opt = OptimizerState.for_params(
        params,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        weight_decay_enabled=cfg.weight_decay_enabled,
    )
    history: list[LossBreakdown] = []
    n = inputs.shape[0]
    for epoch in range(cfg.epochs):
        opt.learning_rate = cfg.lr_schedule.rate_at(cfg.learning_rate, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            b = train_step(params, opt, inputs[idx], labels[idx], cfg)
            sums += len(idx) * np.array([b.ce, b.ls_term, b.entropy_term, b.total])
        mean = sums / n
        history.append(LossBreakdown(*mean))
    return params, history


def save_params(params: NetworkParams, path: str | Path) -> None:
    """Serialize parameters as a versioned JSON document.

    Layout: format version, then the architecture header, then per-layer
    weight matrices (row-major nested lists) and bias vectors in network
    order, then the class-weight matrix.
    """
    doc = {
        "format_version": PARAMS_FORMAT_VERSION,
        "spec": {
            "input_dim": params.spec.input_dim,
            "hidden_dims": list(params.spec.hidden_dims),
            "embed_dim": params.spec.embed_dim,
            "num_classes": params.spec.num_classes,
            "activation": params.spec.activation,
        },
        "layers": [
            {"weights": w.tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
        "class_weights": params.class_weights.tolist(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_params(path: str | Path) -> NetworkParams:
    """Inverse of :func:`save_params`; exact float round-trip."""
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported params format version {version!r}")
    spec = NetworkSpec(
        input_dim=doc["spec"]["input_dim"],
        hidden_dims=tuple(doc["spec"]["hidden_dims"]),
        embed_dim=doc["spec"]["embed_dim"],
        num_classes=doc["spec"]["num_classes"],
        activation=doc["spec"]["activation"],
    )
    return NetworkParams(
        spec=spec,
        weights=[np.asarray(layer["weights"], dtype=np.float64) for layer in doc["layers"]],
        biases=[np.asarray(layer["bias"], dtype=np.float64) for layer in doc["layers"]],
        class_weights=np.asarray(doc["class_weights"], dtype=np.float64),
    )


def save_history(history: list[LossBreakdown], path: str | Path) -> None:
    """Write the per-epoch loss decomposition as CSV
    (epoch, ce, ls_term, entropy_term, total)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "ce", "ls_term", "entropy_term", "total"])
        for epoch, b in enumerate(history):
            writer.writerow([epoch, repr(b.ce), repr(b.ls_term), repr(b.entropy_term), repr(b.total)])
