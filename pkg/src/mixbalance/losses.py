"""Class weights, weighted cross-entropy, uncertainty mixing and the add-up loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import ClassifierHead, FeatureBundle, classify
from .tensor import Tensor, index_select, log_softmax

MIX_EPS = 1e-8
LOSS_MODES = ("ce", "wce", "mix", "cucn")
WEIGHT_SCHEMES = ("none", "inv_freq", "manual")


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("class weights must be a non-empty vector")
        if not np.isfinite(w).all() or (w <= 0).any():
            raise ValueError(f"class weights must be finite and positive, got {w}")
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.size

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes))


def class_weights_from_counts(counts: Sequence[int], scheme: str = "inv_freq",
                              manual: Sequence[float] | None = None) -> ClassWeights:
    """``none``: all ones; ``inv_freq``: total / (C * count_c); ``manual``: as given."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size < 1:
        raise ValueError("counts must be a non-empty vector")
    if (counts < 1).any():
        raise ValueError(f"every class needs at least one sample, got counts {counts.tolist()}")
    scheme = scheme.replace("-", "_")
    c = counts.size
    if scheme == "none":
        return ClassWeights.uniform(c)
    if scheme == "inv_freq":
        return ClassWeights(counts.sum() / (c * counts.astype(np.float64)))
    if scheme == "manual":
        if manual is None or len(manual) != c:
            raise ValueError(f"manual weights need exactly {c} values")
        return ClassWeights(np.asarray(manual, dtype=np.float64))
    raise ValueError(f"unknown weighting scheme {scheme!r}")


def parse_weights_scheme(text: str) -> tuple[str, list[float] | None]:
    """Parse ``none``, ``inv-freq`` or ``manual:1.0,2.5,...``."""
    text = text.strip()
    if text.startswith("manual:"):
        values = [float(v) for v in text[len("manual:"):].split(",") if v.strip()]
        return "manual", values
    scheme = text.replace("-", "_")
    if scheme not in WEIGHT_SCHEMES or scheme == "manual":
        raise ValueError(f"unknown weights scheme {text!r}")
    return scheme, None


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def _weighted_nll(logp: Tensor, labels: np.ndarray, weights: ClassWeights) -> Tensor:
    """Sum over samples of w_{y_n} * log p(y_n); the caller negates and scales."""
    n = logp.shape[0]
    picked = index_select(logp, (np.arange(n), labels))
    w = Tensor(weights.w[labels].astype(logp.dtype))
    return (picked * w).sum()


def weighted_ce(logits: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    """-(1/N) * sum_n w_{y_n} * log_softmax(logits)[n, y_n]."""
    n, c = logits.shape
    labels = _check_labels(labels, c)
    if labels.size != n:
        raise ValueError("one label per logit row required")
    weights = ClassWeights.uniform(c) if weights is None else weights
    if len(weights) != c:
        raise ValueError(f"{len(weights)} weights for {c} classes")
    return _weighted_nll(log_softmax(logits), labels, weights) * logits.dtype.type(-1.0 / n)


def pair_permutation(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random pairing i -> perm[i]; fixed points allowed."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    return rng.permutation(batch_size)


@dataclass
class MixedBatch:
    perm: np.ndarray
    mu_tilde: Tensor
    labels_i: np.ndarray | None = None
    labels_j: np.ndarray | None = None


def mix_features(bundle: FeatureBundle, perm, labels=None) -> MixedBatch:
    """mu~ = (sigma_i*mu_i + sigma_j*mu_j) / (sigma_i + sigma_j + eps), j = perm[i].

    The sample with the larger uncertainty feature takes the larger share.
    """
    mu, sigma = bundle
    perm = np.asarray(perm, dtype=np.int64)
    n = mu.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm must be a permutation of the batch indices")
    if (sigma.data <= 0).any():
        raise ValueError("uncertainty features must be strictly positive")
    mu_j = index_select(mu, perm)
    sigma_j = index_select(sigma, perm)
    eps = mu.dtype.type(MIX_EPS)
    mu_tilde = (sigma * mu + sigma_j * mu_j) / (sigma + sigma_j + eps)
    labels_i = labels_j = None
    if labels is not None:
        labels_i = np.asarray(labels, dtype=np.int64)
        labels_j = labels_i[perm]
    return MixedBatch(perm, mu_tilde, labels_i, labels_j)


def addup_loss(logits_mixed: Tensor, labels_i, labels_j,
               weights: ClassWeights | None = None) -> Tensor:
    """-(1/N) * sum_n [w_{y_i} log p(y_i | mu~) + w_{y_j} log p(y_j | mu~)]."""
    n, c = logits_mixed.shape
    labels_i = _check_labels(labels_i, c)
    labels_j = _check_labels(labels_j, c)
    if labels_i.size != n or labels_j.size != n:
        raise ValueError("one label pair per logit row required")
    weights = ClassWeights.uniform(c) if weights is None else weights
    if len(weights) != c:
        raise ValueError(f"{len(weights)} weights for {c} classes")
    logp = log_softmax(logits_mixed)
    total = _weighted_nll(logp, labels_i, weights) + _weighted_nll(logp, labels_j, weights)
    return total * logits_mixed.dtype.type(-1.0 / n)


def training_loss(bundle: FeatureBundle, head: ClassifierHead, labels,
                  weights: ClassWeights | None, mode: str, rng: np.random.Generator,
                  perm=None) -> Tensor:
    """Objective selected by ``mode``.

    ce: unweighted CE on classify(mu); wce: weighted CE; mix: unweighted
    add-up loss on classify(mu~); cucn: weighted add-up loss. ``perm``
    overrides the random pairing.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    labels = np.asarray(labels, dtype=np.int64)
    c = head.weight.shape[0]
    unit = ClassWeights.uniform(c)
    if weights is None:
        weights = unit
    if mode in ("ce", "wce"):
        return weighted_ce(classify(bundle.mu, head), labels, unit if mode == "ce" else weights)
    if perm is None:
        perm = pair_permutation(labels.size, rng)
    mixed = mix_features(bundle, perm, labels)
    logits = classify(mixed.mu_tilde, head)
    return addup_loss(logits, mixed.labels_i, mixed.labels_j, unit if mode == "mix" else weights)
