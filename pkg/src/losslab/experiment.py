"""End-to-end experiment orchestration: generate domains, train each loss
variant, score verification trials, probe posteriors, and aggregate a
report.

A run is fully determined by its :class:`ExperimentConfig`; the run id is
a hash of the canonical config JSON, so re-running the same config lands
in the same directory and reproduces the same report (modulo the
timestamp). Per-run rows are flushed to ``rows.jsonl`` as they complete so
partial results survive an abort, and raw trial scores are kept per
(variant, domain, seed) so DET curves can be emitted later without
retraining.

The per-seed data world (speakers, utterances, shifts, trials) is shared
by all loss variants, making the comparison between variants paired
rather than independent.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import csv
from pathlib import Path
from typing import Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import metrics as M
from . import network as N
from . import probe as P
from . import synthdata as S
from .losses import LOSS_KINDS, AamConfig, LossWeights

REPORT_SCHEMA_VERSION = 1


class UnknownRun(KeyError):
    """Raised when a run id has no directory under the output root."""


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkSettings(_StrictModel):
    """Architecture of the embedding network."""

    input_dim: int = 20
    hidden_dims: list[int] = Field(default_factory=lambda: [64])
    embed_dim: int = 16
    activation: str = "relu"


class AamSettings(_StrictModel):
    """Margin head: temperature and additive angle (radians)."""

    scale: float = 30.0
    margin: float = 0.2


class ScheduleSettings(_StrictModel):
    """Learning-rate schedule."""

    kind: str = "step_decay"
    factor: float = 0.5
    every_n_epochs: int = 10


class TrainSettings(_StrictModel):
    """Optimization protocol shared by all variants."""

    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_schedule: ScheduleSettings = Field(default_factory=lambda: ScheduleSettings(every_n_epochs=20))
    aam: AamSettings = Field(default_factory=AamSettings)


class DataSettings(_StrictModel):
    """Synthetic speaker population. Train and eval speakers are disjoint
    id ranges (open-set evaluation); eval speakers sit a controlled angle
    away from training speakers so the identity shift really is
    in-domain and feature rotations move the population off the trained
    manifold."""

    n_speakers_train: int = 50
    n_speakers_eval: int = 20
    per_speaker: int = 40
    spread: float = 0.15
    eval_speaker_offset_degrees: float = 20.0

    @model_validator(mode="after")
    def _check(self) -> "DataSettings":
        if self.n_speakers_train < 3:
            raise ValueError("n_speakers_train must be >= 3 (non-target regularizers need K >= 3)")
        if self.n_speakers_eval < 2 or self.per_speaker < 1:
            raise ValueError("need n_speakers_eval >= 2 and per_speaker >= 1")
        if self.spread <= 0:
            raise ValueError("spread must be > 0")
        if not 0 <= self.eval_speaker_offset_degrees <= 180:
            raise ValueError("eval_speaker_offset_degrees must lie in [0, 180]")
        return self


class DomainSettings(_StrictModel):
    """One evaluation domain; severity is the rotation angle (degrees)
    every feature direction is turned by, plus bias and noise inflation.
    Zero angle, zero bias, and unit noise scale is the in-domain case."""

    tag: str
    angle_degrees: float = 0.0
    bias_scale: float = 0.0
    noise_scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.angle_degrees == 0 and self.bias_scale == 0 and self.noise_scale == 1


class TrialSettings(_StrictModel):
    """Verification trial counts per domain (non-target:target defaults
    to the conventional 4:1)."""

    n_target: int = 2000
    n_nontarget: int = 8000


class VariantSettings(_StrictModel):
    """One training objective to compare: loss kind, regularizer weights,
    and whether weight decay is applied."""

    loss_kind: str
    alpha: float = 0.1
    beta: float = 0.025
    weight_decay_enabled: bool = False

    @model_validator(mode="after")
    def _check_kind(self) -> "VariantSettings":
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        return self

    @property
    def name(self) -> str:
        return self.loss_kind + ("_wd" if self.weight_decay_enabled else "")


def default_variants() -> list[VariantSettings]:
    """The benchmark comparison: plain cross entropy with weight decay as
    the baseline, label smoothing and the Jeffreys objective without it
    (weight decay clashes with the smoothing regularizers)."""
    return [
        VariantSettings(loss_kind="ce", weight_decay_enabled=True),
        VariantSettings(loss_kind="ce_ls", weight_decay_enabled=False),
        VariantSettings(loss_kind="ce_jeffreys", weight_decay_enabled=False),
    ]


def default_domains() -> list[DomainSettings]:
    """Severities calibrated so the desk-scale benchmark stays in the
    regime where output regularization measurably helps: shifts much
    harsher than this push every variant into near-chance scoring where
    the comparison is pure noise."""
    return [
        DomainSettings(tag="in_domain"),
        DomainSettings(tag="mild_shift", angle_degrees=18.0, bias_scale=0.05, noise_scale=1.08),
        DomainSettings(tag="strong_shift", angle_degrees=35.0, bias_scale=0.1, noise_scale=1.18),
    ]


class ExperimentConfig(_StrictModel):
    """Full experiment description; unknown keys are rejected.

    The defaults are the "paper-mini" benchmark: 50 training speakers, 20
    disjoint evaluation speakers, 40 utterances each in dimension 20,
    three domains of increasing shift severity, five seeds, and the
    ce / ce_ls / ce_jeffreys comparison with alpha=0.1, beta=0.025.
    """

    network: NetworkSettings = Field(default_factory=NetworkSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    data: DataSettings = Field(default_factory=DataSettings)
    domains: list[DomainSettings] = Field(default_factory=default_domains)
    trials: TrialSettings = Field(default_factory=TrialSettings)
    variants: list[VariantSettings] = Field(default_factory=default_variants)
    probe_tau: float = 0.9
    seeds: list[int] = Field(default_factory=lambda: [106, 107, 108, 109, 110])
    output_dir: str | None = None

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.domains:
            raise ValueError("at least one domain is required")
        if not self.variants:
            raise ValueError("at least one variant is required")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"variant names collide: {names}")
        tags = [d.tag for d in self.domains]
        if len(set(tags)) != len(tags):
            raise ValueError(f"domain tags collide: {tags}")
        if not 0 < self.probe_tau <= 1:
            raise ValueError("probe_tau must lie in (0, 1]")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def spearman_rank_correlation(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equal-length sequences of length >= 2")

    def ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(1, v.size + 1, dtype=np.float64)
        for value in np.unique(v):
            mask = v == value
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def _network_spec(config: ExperimentConfig) -> N.NetworkSpec:
    return N.NetworkSpec(
        input_dim=config.network.input_dim,
        hidden_dims=tuple(config.network.hidden_dims),
        embed_dim=config.network.embed_dim,
        num_classes=config.data.n_speakers_train,
        activation=config.network.activation,
    )


def _train_config(config: ExperimentConfig, variant: VariantSettings, seed: int) -> N.TrainConfig:
    t = config.train
    return N.TrainConfig(
        loss_kind=variant.loss_kind,
        weights=LossWeights(alpha=variant.alpha, beta=variant.beta),
        aam=AamConfig(scale=t.aam.scale, margin=t.aam.margin),
        epochs=t.epochs,
        batch_size=t.batch_size,
        seed=seed,
        learning_rate=t.learning_rate,
        lr_schedule=N.LrSchedule(
            kind=t.lr_schedule.kind,
            factor=t.lr_schedule.factor,
            every_n_epochs=t.lr_schedule.every_n_epochs,
        ),
        momentum=t.momentum,
        weight_decay=t.weight_decay,
        weight_decay_enabled=variant.weight_decay_enabled,
    )


def _domain_shift(config: ExperimentConfig, domain: DomainSettings, index: int, seed: int) -> S.DomainShift:
    dim = config.network.input_dim
    if domain.is_identity:
        return S.DomainShift.identity(dim)
    return S.DomainShift.sampled(
        dim=dim,
        angle=np.deg2rad(domain.angle_degrees),
        bias_scale=domain.bias_scale,
        noise_scale=domain.noise_scale,
        seed=[seed, 200 + index],
    )


def _seed_world(config: ExperimentConfig, seed: int):
    """Build the data shared by every variant for one seed: training set,
    per-domain eval sets, and per-domain trial lists."""
    d = config.data
    dim = config.network.input_dim
    train_speakers = S.generate_speakers(d.n_speakers_train, dim, d.spread, seed=[seed, 0])
    eval_speakers = S.generate_anchored_speakers(
        train_speakers,
        d.n_speakers_eval,
        offset_angle=float(np.deg2rad(d.eval_speaker_offset_degrees)),
        spread=d.spread,
        seed=[seed, 1],
        id_offset=d.n_speakers_train,
    )
    train_set = S.sample_utterances(
        train_speakers, d.per_speaker, S.DomainShift.identity(dim), seed=[seed, 2]
    )
    eval_sets, trial_lists = {}, {}
    offset = len(train_set)
    for i, domain in enumerate(config.domains):
        shift = _domain_shift(config, domain, i, seed)
        eval_set = S.sample_utterances(
            eval_speakers, d.per_speaker, shift, seed=[seed, 10 + i],
            domain=domain.tag, id_offset=offset,
        )
        offset += len(eval_set)
        eval_sets[domain.tag] = eval_set
        trial_lists[domain.tag] = S.make_trials(
            eval_set, config.trials.n_target, config.trials.n_nontarget, seed=[seed, 100 + i]
        )
    return train_set, eval_sets, trial_lists


def _save_scores_csv(scores: M.ScoreSet, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "is_target"])
        for s in scores.target_scores:
            writer.writerow([repr(float(s)), 1])
        for s in scores.nontarget_scores:
            writer.writerow([repr(float(s)), 0])


def _load_scores_csv(path: Path) -> M.ScoreSet:
    target, nontarget = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for value, flag in reader:
            (target if int(flag) else nontarget).append(float(value))
    return M.ScoreSet(np.asarray(target), np.asarray(nontarget))


def run_dir_for(run_id: str, output_dir: str | Path) -> Path:
    return Path(output_dir) / "runs" / run_id


def iter_run_rows(config: ExperimentConfig) -> Iterator[tuple[dict, M.ScoreSet]]:
    """Execute the experiment grid, yielding one result row (plus its raw
    scores) per (seed, variant, domain)."""
    spec = _network_spec(config)
    for seed in config.seeds:
        train_set, eval_sets, trial_lists = _seed_world(config, seed)
        for variant in config.variants:
            cfg = _train_config(config, variant, seed)
            params, history = N.fit(spec, train_set.features, train_set.labels, cfg)
            train_mean = N.forward_embed(params, train_set.features).mean(axis=0)
            for domain in config.domains:
                eval_set = eval_sets[domain.tag]
                embeddings = N.forward_embed(params, eval_set.features)
                by_id = {int(uid): embeddings[i] for i, uid in enumerate(eval_set.ids)}
                scores = M.score_trials(trial_lists[domain.tag], by_id, train_mean)
                report = M.metrics_report(scores)
                posteriors = N.forward_posteriors(
                    params, eval_set.features, config.train.aam.scale
                )
                probe = P.probe_dataset(posteriors, config.probe_tau, domain.tag)
                row = {
                    "seed": seed,
                    "variant": variant.name,
                    "loss_kind": variant.loss_kind,
                    "weight_decay_enabled": variant.weight_decay_enabled,
                    "domain": domain.tag,
                    "eer": report.eer,
                    "min_dcf": report.min_dcf,
                    "n_target": report.n_target,
                    "n_nontarget": report.n_nontarget,
                    "mean_top_count": probe.mean_top_count,
                    "final_train_loss": history[-1].total if history else None,
                    "final_train_ce": history[-1].ce if history else None,
                }
                yield row, scores


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def summarize_rows(config: ExperimentConfig, rows: list[dict]) -> dict:
    """Aggregate raw rows into medians, the probe trend, and relative
    gains of each regularized variant over the plain-CE baseline."""
    domains = [d.tag for d in config.domains]
    variants = [v.name for v in config.variants]

    summary: dict = {}
    for variant in variants:
        summary[variant] = {}
        for domain in domains:
            sel = [r for r in rows if r["variant"] == variant and r["domain"] == domain]
            summary[variant][domain] = {
                "eer_median": _median([r["eer"] for r in sel]),
                "min_dcf_median": _median([r["min_dcf"] for r in sel]),
                "mean_top_count_median": _median([r["mean_top_count"] for r in sel]),
            }

    domain_medians = {}
    for domain in domains:
        sel = [r for r in rows if r["domain"] == domain]
        domain_medians[domain] = {
            "eer_median": _median([r["eer"] for r in sel]),
            "mean_top_count_median": _median([r["mean_top_count"] for r in sel]),
        }
    trend = {
        "domains": domains,
        "eer_medians": [domain_medians[d]["eer_median"] for d in domains],
        "mean_top_count_medians": [domain_medians[d]["mean_top_count_median"] for d in domains],
    }
    trend["spearman_top_count_vs_eer"] = (
        spearman_rank_correlation(trend["mean_top_count_medians"], trend["eer_medians"])
        if len(domains) >= 2
        else 0.0
    )

    gains = {}
    baseline = next((v.name for v in config.variants if v.loss_kind == "ce"), None)
    if baseline is not None:
        for variant in variants:
            if variant == baseline:
                continue
            gains[variant] = {}
            for domain in domains:
                base = summary[baseline][domain]
                cur = summary[variant][domain]
                gains[variant][domain] = {
                    "eer_relative_gain_pct": (
                        100.0 * (base["eer_median"] - cur["eer_median"]) / base["eer_median"]
                        if base["eer_median"] > 0 else 0.0
                    ),
                    "min_dcf_relative_gain_pct": (
                        100.0 * (base["min_dcf_median"] - cur["min_dcf_median"]) / base["min_dcf_median"]
                        if base["min_dcf_median"] > 0 else 0.0
                    ),
                }
    return {"by_variant": summary, "domain_medians": domain_medians, "probe_trend": trend, "gains": gains}


def run_experiment(config: ExperimentConfig, output_dir: str | Path = ".") -> dict:
    """Run the full grid and write the run directory.

    Layout under ``<output_dir>/runs/<run_id>/``: ``config.json``,
    ``rows.jsonl`` (flushed row by row), ``scores/<variant>_<domain>_<seed>.csv``,
    and the final ``report.json``. Returns the report as a dict.
    """
    if config.output_dir is not None:
        output_dir = config.output_dir
    run_id = config.run_id()
    run_dir = run_dir_for(run_id, output_dir)
    scores_dir = run_dir / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.canonical_json())

    rows: list[dict] = []
    with open(run_dir / "rows.jsonl", "w") as fh:
        for row, scores in iter_run_rows(config):
            rows.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            _save_scores_csv(
                scores, scores_dir / f"{row['variant']}_{row['domain']}_{row['seed']}.csv"
            )

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "run_id": run_id,
        "config": config.model_dump(mode="json"),
        "rows": rows,
        **summarize_rows(config, rows),
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (run_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    return report


def load_report(run_id: str, output_dir: str | Path = ".") -> dict:
    path = run_dir_for(run_id, output_dir) / "report.json"
    if not path.exists():
        raise UnknownRun(f"no report for run {run_id!r} under {output_dir}")
    return json.loads(path.read_text())


def emit_det_data(run_id: str, output_dir: str | Path = ".") -> list[str]:
    """Write one DET CSV per (variant, domain), pooling scores over seeds,
    with a JSON sidecar marking the EER and minDCF operating points.

    Idempotent: re-emission overwrites the same files. Returns the paths
    written.

    Raises:
        UnknownRun: if the run directory does not exist.
    """
    run_dir = run_dir_for(run_id, output_dir)
    if not run_dir.is_dir():
        raise UnknownRun(f"unknown run {run_id!r} under {output_dir}")
    report = load_report(run_id, output_dir)
    config = ExperimentConfig.model_validate(report["config"])
    det_dir = run_dir / "det"
    det_dir.mkdir(exist_ok=True)

    written: list[str] = []
    for variant in config.variants:
        for domain in config.domains:
            pooled_target, pooled_nontarget = [], []
            for seed in config.seeds:
                path = run_dir / "scores" / f"{variant.name}_{domain.tag}_{seed}.csv"
                part = _load_scores_csv(path)
                pooled_target.append(part.target_scores)
                pooled_nontarget.append(part.nontarget_scores)
            scores = M.ScoreSet(
                np.concatenate(pooled_target), np.concatenate(pooled_nontarget)
            )
            curve = M.compute_det(scores)
            eer = M.compute_eer(curve)
            min_dcf = M.compute_min_dcf(curve)
            costs = 0.01 * curve.p_miss + 0.99 * curve.p_fa
            eer_idx = int(np.argmax((curve.p_miss - curve.p_fa) >= 0))
            sidecar = {
                "run_id": run_id,
                "variant": variant.name,
                "domain": domain.tag,
                "pooled_seeds": list(config.seeds),
                "eer": eer,
                "min_dcf": min_dcf,
                "eer_operating_point": M.operating_point(curve, eer_idx),
                "min_dcf_operating_point": M.operating_point(curve, int(np.argmin(costs))),
            }
            base = det_dir / f"det_{variant.name}_{domain.tag}"
            M.save_det_csv(curve, base.with_suffix(".csv"))
            base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
            written += [str(base.with_suffix(".csv")), str(base.with_suffix(".json"))]
    return written
