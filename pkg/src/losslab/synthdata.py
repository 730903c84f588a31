"""Synthetic speakers, utterances, domain shifts, and verification trials.

Speakers are unit mean directions on the input sphere; an utterance is the
mean plus isotropic Gaussian within-speaker noise. A domain shift is an
orthogonal rotation plus a bias plus a noise-scale multiplier, which
stands in for channel/language mismatch: the rotation angle is the
severity knob, applied as equal-angle 2x2 rotations in a random
orthonormal basis so that (for even dimension) every vector moves by
exactly that angle.

All generators are pure functions of their arguments and a seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InsufficientData(ValueError):
    """Raised when a trial list cannot be built from the available labels."""


@dataclass(frozen=True)
class SpeakerPrototype:
    """A synthetic speaker: unit mean direction and within-speaker spread."""

    id: int
    mean_direction: np.ndarray
    within_spread: float

    def __post_init__(self) -> None:
        direction = np.asarray(self.mean_direction, dtype=np.float64)
        object.__setattr__(self, "mean_direction", direction)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError("mean_direction must be unit-norm")
        if self.within_spread <= 0:
            raise ValueError("within_spread must be > 0")


@dataclass(frozen=True)
class DomainShift:
    """An affine domain transform: x -> rotation @ x + bias, with the
    within-speaker noise inflated by ``noise_scale``."""

    rotation: np.ndarray
    bias: np.ndarray
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "bias", bias)
        dim = rotation.shape[0]
        if rotation.shape != (dim, dim) or bias.shape != (dim,):
            raise ValueError("rotation must be square and bias must match its dimension")
        residual = np.abs(rotation.T @ rotation - np.eye(dim)).max()
        if residual > 1e-9:
            raise ValueError(f"rotation is not orthogonal (max residual {residual:.3e})")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0")

    @classmethod
    def identity(cls, dim: int) -> "DomainShift":
        return cls(rotation=np.eye(dim), bias=np.zeros(dim), noise_scale=1.0)

    @classmethod
    def sampled(
        cls,
        dim: int,
        angle: float,
        bias_scale: float,
        noise_scale: float,
        seed,
    ) -> "DomainShift":
        """Draw a shift of controlled severity.

        The rotation applies ``angle`` radians inside each plane of a
        random orthonormal basis (QR of a Gaussian matrix with sign
        correction), so every input direction turns by ``angle`` when
        ``dim`` is even (the leftover axis is fixed when odd). The bias is
        ``bias_scale`` times a random unit vector.
        """
        rng = np.random.default_rng(seed)
        basis, r = np.linalg.qr(rng.normal(size=(dim, dim)))
        basis *= np.sign(np.diag(r))
        block = np.eye(dim)
        c, s = math.cos(angle), math.sin(angle)
        for i in range(0, dim - 1, 2):
            block[i, i] = c
            block[i + 1, i + 1] = c
            block[i, i + 1] = -s
            block[i + 1, i] = s
        rotation = basis @ block @ basis.T
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        return cls(rotation=rotation, bias=bias_scale * direction, noise_scale=noise_scale)


@dataclass
class UtteranceSet:
    """Labeled feature vectors with stable utterance ids and a domain tag."""

    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    domain: str = "in_domain"

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass
class TrialList:
    """Verification trials: pairs of utterance ids and a target flag."""

    utt_a: np.ndarray
    utt_b: np.ndarray
    is_target: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.utt_a == self.utt_b):
            raise ValueError("a trial must not pair an utterance with itself")

    def __len__(self) -> int:
        return int(self.utt_a.size)

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def n_nontarget(self) -> int:
        return len(self) - self.n_target


def generate_speakers(
    n: int, input_dim: int, spread: float, seed, id_offset: int = 0
) -> list[SpeakerPrototype]:
    """Draw ``n`` speakers with mean directions uniform on the unit sphere
    (normalized Gaussian samples)."""
    if n < 2:
        raise ValueError("need at least 2 speakers")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return [
        SpeakerPrototype(id=id_offset + i, mean_direction=directions[i], within_spread=spread)
        for i in range(n)
    ]


def generate_anchored_speakers(
    anchors: list[SpeakerPrototype],
    n: int,
    offset_angle: float,
    spread: float,
    seed,
    id_offset: int = 0,
) -> list[SpeakerPrototype]:
    """Draw ``n`` new speakers, each at a fixed angle from an anchor speaker.

    Speaker ``i`` is rotated ``offset_angle`` radians away from anchor
    ``i % len(anchors)`` in a random direction orthogonal to it. This
    builds evaluation populations whose distance to the training
    population is controlled: small offsets mimic an evaluation corpus
    drawn from the training domain, large offsets a foreign one.
    """
    if n < 2:
        raise ValueError("need at least 2 speakers")
    if not 0 <= offset_angle <= math.pi:
        raise ValueError("offset_angle must lie in [0, pi]")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        anchor = anchors[i % len(anchors)].mean_direction
        ortho = rng.normal(size=anchor.size)
        ortho -= (ortho @ anchor) * anchor
        ortho /= np.linalg.norm(ortho)
        direction = math.cos(offset_angle) * anchor + math.sin(offset_angle) * ortho
        direction /= np.linalg.norm(direction)
        out.append(
            SpeakerPrototype(id=id_offset + i, mean_direction=direction, within_spread=spread)
        )
    return out


def sample_utterances(
    speakers: list[SpeakerPrototype],
    per_speaker: int,
    shift: DomainShift,
    seed,
    domain: str = "in_domain",
    id_offset: int = 0,
) -> UtteranceSet:
    """Sample ``per_speaker`` utterances per speaker under a domain shift.

    Each utterance is ``rotation @ (mean + spread * noise_scale * g) + bias``
    with ``g`` standard normal. Utterance ids are sequential from
    ``id_offset``; labels are speaker ids.
    """
    if per_speaker < 1:
        raise ValueError("per_speaker must be >= 1")
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for speaker in speakers:
        noise = rng.normal(size=(per_speaker, speaker.mean_direction.size))
        local = speaker.mean_direction + speaker.within_spread * shift.noise_scale * noise
        rows.append(local @ shift.rotation.T + shift.bias)
        labels.extend([speaker.id] * per_speaker)
    features = np.vstack(rows)
    n = features.shape[0]
    return UtteranceSet(
        ids=np.arange(id_offset, id_offset + n, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64),
        features=features,
        domain=domain,
    )


def make_trials(
    utterances: UtteranceSet,
    n_target: int | None = None,
    n_nontarget: int | None = None,
    seed=0,
    same_class_balance: bool = True,
) -> TrialList:
    """Build a verification trial list with exact pair counts.

    Target pairs share a label, non-target pairs do not, and no utterance
    is paired with itself. When counts are omitted they default to one
    target pair per utterance and the conventional 4:1
    non-target-to-target ratio. With ``same_class_balance`` target pairs
    are spread round-robin over the eligible speakers instead of drawn
    uniformly.

    Raises:
        InsufficientData: if no label has two utterances (and target pairs
            were requested) or only one label exists (and non-target pairs
            were requested).
    """
    if n_target is None:
        n_target = len(utterances)
    if n_nontarget is None:
        n_nontarget = 4 * n_target
    if n_target < 0 or n_nontarget < 0:
        raise ValueError("trial counts must be >= 0")

    rng = np.random.default_rng(seed)
    labels = utterances.labels
    ids = utterances.ids
    by_label: dict[int, np.ndarray] = {
        int(lbl): np.flatnonzero(labels == lbl) for lbl in np.unique(labels)
    }
    eligible = sorted(lbl for lbl, idx in by_label.items() if idx.size >= 2)

    utt_a, utt_b, flags = [], [], []
    if n_target > 0:
        if not eligible:
            raise InsufficientData("no speaker has two utterances; cannot build target pairs")
        if same_class_balance:
            chosen = [eligible[i % len(eligible)] for i in range(n_target)]
        else:
            chosen = [eligible[int(rng.integers(len(eligible)))] for _ in range(n_target)]
        for lbl in chosen:
            pair = rng.choice(by_label[lbl], size=2, replace=False)
            utt_a.append(ids[pair[0]])
            utt_b.append(ids[pair[1]])
            flags.append(True)
    if n_nontarget > 0:
        if len(by_label) < 2:
            raise InsufficientData("need at least two speakers to build non-target pairs")
        n = len(utterances)
        made = 0
        while made < n_nontarget:
            i, j = rng.integers(n), rng.integers(n)
            if labels[i] == labels[j]:
                continue
            utt_a.append(ids[i])
            utt_b.append(ids[j])
            flags.append(False)
            made += 1
    return TrialList(
        utt_a=np.asarray(utt_a, dtype=np.int64),
        utt_b=np.asarray(utt_b, dtype=np.int64),
        is_target=np.asarray(flags, dtype=bool),
    )


def save_utterances(utterances: UtteranceSet, path: str | Path) -> None:
    """CSV export, one row per utterance: id, label, domain, features."""
    dim = utterances.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "domain"] + [f"f{i}" for i in range(dim)])
        for i in range(len(utterances)):
            writer.writerow(
                [int(utterances.ids[i]), int(utterances.labels[i]), utterances.domain]
                + [repr(v) for v in utterances.features[i]]
            )


def load_utterances(path: str | Path) -> UtteranceSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["id", "label", "domain"]:
            raise ValueError(f"unexpected utterance CSV header: {header[:3]}")
        ids, labels, domains, feats = [], [], [], []
        for row in reader:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            domains.append(row[2])
            feats.append([float(v) for v in row[3:]])
    if not ids:
        raise ValueError(f"{path} contains no utterances")
    return UtteranceSet(
        ids=np.asarray(ids, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64),
        features=np.asarray(feats, dtype=np.float64),
        domain=domains[0],
    )


def save_trials(trials: TrialList, path: str | Path) -> None:
    """CSV export: utt_a, utt_b, is_target."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_a", "utt_b", "is_target"])
        for a, b, t in zip(trials.utt_a, trials.utt_b, trials.is_target):
            writer.writerow([int(a), int(b), int(t)])


def load_trials(path: str | Path) -> TrialList:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["utt_a", "utt_b", "is_target"]:
            raise ValueError(f"unexpected trial CSV header: {header}")
        rows = [(int(a), int(b), bool(int(t))) for a, b, t in reader]
    return TrialList(
        utt_a=np.asarray([r[0] for r in rows], dtype=np.int64),
        utt_b=np.asarray([r[1] for r in rows], dtype=np.int64),
        is_target=np.asarray([r[2] for r in rows], dtype=bool),
    )
