"""Embedding a trigger-set watermark by training, and black-box verification."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import DatasetBundle, PartitionPlan, Samples
from .trigger import NEW_CLASS, TriggerSet

DEFAULT_DELTA = 0.15
_EPS = 1e-12  # keeps 1 - 0.85 <= 0.15 true despite binary rounding


def decide(accuracy: float, delta: float) -> bool:
    return 1.0 - accuracy <= delta + _EPS


@dataclass
class EmbeddingJob:
    bundle: DatasetBundle
    plan: PartitionPlan
    B1: TriggerSet
    B2: TriggerSet
    strategy: str = NEW_CLASS
    arch: str = "tinycnn"
    cfg: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    init_seed: int = 0

    @property
    def class_count(self) -> int:
        """Output width of the marked model."""
        extra = 1 if self.strategy == NEW_CLASS else 0
        return self.bundle.class_count + extra

    def train_set(self) -> Samples:
        return Samples.concat(self.bundle.D1, _as_samples(self.B1))

    def val_set(self) -> Samples:
        return Samples.concat(self.bundle.D2, _as_samples(self.B2))


def _as_samples(t: TriggerSet) -> Samples:
    return Samples(np.asarray(t.images, dtype=np.float32), np.asarray(t.labels),
                   np.asarray(t.source_ids))


def embed(job: EmbeddingJob) -> tuple[nn.Classifier, list[dict]]:
    """Train a fresh model on D1 + B1, validating on D2 + B2."""
    train_set, val_set = job.train_set(), job.val_set()
    for name, s in (("train", train_set), ("validation", val_set)):
        if len(s) and (s.labels.min() < 0 or s.labels.max() >= job.class_count):
            raise ValueError(f"{name} label outside [0, {job.class_count}); "
                             "were trigger labels assigned?")
    model = nn.init(job.arch, job.class_count, job.init_seed,
                    input_shape=job.bundle.image_shape)
    marked, history = nn.train(model, train_set, val_set, job.cfg)
    marked.meta.update({"strategy": job.strategy, "q_t": job.plan.q_t,
                        "partition_seed": job.plan.seed, "init_seed": job.init_seed,
                        "train_seed": job.cfg.seed,
                        "key_fingerprint": job.B1.key_fingerprint})
    return marked, history


def accuracy(model, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty sample set")
    return float(np.mean(model.predict(images) == labels))


def fidelity_gap(m0, m1, U) -> float:
    """``|acc(m0, U) - acc(m1, U)|``; a prediction of the extra class counts as wrong."""
    return abs(accuracy(m0, U.images, U.labels) - accuracy(m1, U.images, U.labels))


def trigger_accuracy(model, T2) -> float:
    return accuracy(model, T2.images, T2.labels)


@dataclass(frozen=True)
class VerificationReport:
    accuracy: float
    delta: float
    verified: bool
    ids: np.ndarray
    predicted: np.ndarray
    expected: np.ndarray
    attack: str = ""

    def recompute(self) -> bool:
        acc = float(np.mean(self.predicted == self.expected))
        return decide(acc, self.delta)

    def to_text(self) -> str:
        lines = [
            f"trigger_accuracy={self.accuracy:.6f}",
            f"delta={self.delta}",
            f"decision={'verified' if self.verified else 'not verified'}",
            f"attack={self.attack or 'none'}",
            f"n={len(self.ids)}",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "predicted", "expected", "correct"])
        for i, p, e in zip(self.ids, self.predicted, self.expected):
            writer.writerow([int(i), int(p), int(e), int(p == e)])
        return buf.getvalue()


def verify(model, T2: TriggerSet, delta: float = DEFAULT_DELTA, attack=None) -> VerificationReport:
    """Query ``model.predict`` on the triggers (optionally attacked first).

    Verified iff ``1 - accuracy <= delta``.  Only ``predict`` is called, so
    any object exposing it can stand in for a remote model.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    if len(T2) == 0:
        raise ValueError("trigger set is empty")
    images = np.asarray(T2.images)
    label = ""
    if attack is not None:
        from .attacks import AttackDescriptor, apply_image_attack
        desc = attack if isinstance(attack, AttackDescriptor) else AttackDescriptor.parse(attack)
        images = apply_image_attack(images, desc)
        label = str(desc)
    predicted = np.asarray(model.predict(images))
    expected = np.asarray(T2.labels)
    acc = float(np.mean(predicted == expected))
    return VerificationReport(acc, float(delta), decide(acc, delta),
                              np.asarray(T2.source_ids), predicted, expected, label)
