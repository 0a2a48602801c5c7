"""Training losses: detection BCE, logit-adjusted source CE, and their blend.

The source loss adds log-priors to the logits inside the softmax, so rare
sources demand less raw confidence and keep receiving gradient signal. With
uniform priors it reduces exactly to standard cross-entropy (softmax shift
invariance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import N_SOURCES
from .scanio import ManifestRecord


@dataclass(frozen=True)
class SourcePriors:
    """Empirical per-source proportions p(d) from the training split."""

    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        if np.any(self.p <= 0):
            raise ValueError("every source prior must be positive")
        if abs(float(self.p.sum()) - 1.0) > 1e-12:
            raise ValueError(f"priors must sum to 1, got {self.p.sum()!r}")

    @property
    def log_p(self) -> np.ndarray:
        return np.log(self.p)

    @classmethod
    def uniform(cls, n_sources: int = N_SOURCES) -> "SourcePriors":
        return cls(np.full(n_sources, 1.0 / n_sources))


@dataclass(frozen=True)
class LossBreakdown:
    detection_loss: float
    source_loss: float
    gamma: float
    total: float


def estimate_priors(
    records: list[ManifestRecord], split: str = "train", n_sources: int = N_SOURCES
) -> SourcePriors:
    """p(d) = per-source train count / train total. Errors on an empty source."""
    counts = np.zeros(n_sources, dtype=np.int64)
    for rec in records:
        if rec.split == split:
            counts[rec.source] += 1
    total = int(counts.sum())
    if total == 0:
        raise ValueError(f"no records in split {split!r}")
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"sources {missing} have no {split} scans; log-prior undefined")
    return SourcePriors(counts / total)


def bce(covid_logit: float, label: int) -> float:
    """Numerically stable sigmoid binary cross-entropy.

    max(z, 0) - z*y + log(1 + exp(-|z|)), finite for all finite logits.
    """
    z = float(covid_logit)
    y = float(label)
    return max(z, 0.0) - z * y + float(np.log1p(np.exp(-abs(z))))


def bce_grad(covid_logit: float, label: int) -> float:
    """d bce / d logit = sigmoid(z) - y."""
    z = float(covid_logit)
    if z >= 0:
        sig = 1.0 / (1.0 + np.exp(-z))
    else:
        e = np.exp(z)
        sig = e / (1.0 + e)
    return float(sig - float(label))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def standard_ce(source_logits: np.ndarray, source: int) -> float:
    """-log softmax(f)_d via log-sum-exp."""
    logits = np.asarray(source_logits, dtype=np.float64)
    return float(-_log_softmax(logits)[source])


def standard_ce_grad(source_logits: np.ndarray, source: int) -> np.ndarray:
    """softmax(f) - onehot(d)."""
    logits = np.asarray(source_logits, dtype=np.float64)
    grad = _softmax(logits)
    grad[source] -= 1.0
    return grad


def logit_adjusted_ce(source_logits: np.ndarray, source: int, priors: SourcePriors) -> float:
    """-log softmax(f + log p)_d: cross-entropy on prior-adjusted logits."""
    logits = np.asarray(source_logits, dtype=np.float64)
    return float(-_log_softmax(logits + priors.log_p)[source])


def logit_adjusted_ce_grad(
    source_logits: np.ndarray, source: int, priors: SourcePriors
) -> np.ndarray:
    """softmax(f + log p) - onehot(d)."""
    logits = np.asarray(source_logits, dtype=np.float64)
    grad = _softmax(logits + priors.log_p)
    grad[source] -= 1.0
    return grad


def combined_loss(
    covid_logit: float,
    label: int,
    source_logits: np.ndarray,
    source: int,
    priors: SourcePriors,
    gamma: float,
    adjusted: bool = True,
) -> LossBreakdown:
    """Detection BCE plus gamma times the source loss for one scan.

    ``adjusted`` selects logit-adjusted (True) or standard (False) source CE;
    gamma = 0 collapses to the single-task detection loss.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    detection = bce(covid_logit, label)
    if adjusted:
        source_l = logit_adjusted_ce(source_logits, source, priors)
    else:
        source_l = standard_ce(source_logits, source)
    return LossBreakdown(
        detection_loss=detection,
        source_loss=source_l,
        gamma=float(gamma),
        total=detection + gamma * source_l,
    )
