"""losslab: a loss-function laboratory for cosine-classifier embeddings.

Implements hard-target cross entropy, label smoothing, a symmetric-KL
(Jeffreys) regularizer of the non-target posterior, and a confidence-
penalty ablation, together with an additive-angular-margin head, a small
deterministic trainer, synthetic domain-shift benchmarks, verification
metrics (DET / EER / minDCF), and output-distribution probes. A FastAPI
service exposes the operations; the CLI is a thin client of that service.
"""

from .losses import (
    AamConfig,
    DegenerateTarget,
    LossBreakdown,
    LossWeights,
    Posterior,
    aam_transform,
    combined_loss,
    combined_loss_grad,
    confidence_penalty_variant,
    cross_entropy,
    entropy_term,
    jeffreys_direct,
    jeffreys_loss,
    label_smoothing_term,
    softmax,
)
from .metrics import (
    DetCurve,
    EmptyScores,
    MetricsReport,
    MissingEmbedding,
    ScoreSet,
    ZeroVector,
    center_and_cosine_score,
    compute_det,
    compute_eer,
    compute_min_dcf,
    score_trials,
)
from .network import (
    NetworkParams,
    NetworkSpec,
    NonFiniteLoss,
    OptimizerState,
    TrainConfig,
    fit,
    forward_cosines,
    forward_embed,
    init_params,
    train_step,
)
from .probe import EmptyDataset, ProbeResult, mean_kl_gap, probe_dataset, top_training_speakers
from .synthdata import (
    DomainShift,
    InsufficientData,
    SpeakerPrototype,
    TrialList,
    UtteranceSet,
    generate_speakers,
    make_trials,
    sample_utterances,
)
from .experiment import ExperimentConfig, UnknownRun, emit_det_data, run_experiment
from .selftest import self_test

__version__ = "0.1.0"
