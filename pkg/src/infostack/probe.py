"""Linear probes over frozen representations.

A probe is a softmax regression trained with Adam on detached features; it
never touches encoder parameters, which is the whole point: its accuracy is
the quality metric for the representations. Grid features are mean-pooled
into a single vector per image before probing; sequence features are probed
per time step without pooling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng
from .tensor import (Tensor, add, backward, gather_cross_entropy, log_softmax,
                     matmul, zero_grads)
from .training import Adam


@dataclass
class LinearProbe:
    W: np.ndarray               # [d, classes]
    b: np.ndarray               # [classes]
    module_index: int = -1
    pooling: str = "none"

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.W + self.b

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=1)


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    module_index: int
    sample_count: int

    def as_dict(self) -> dict:
        return {"module": self.module_index, "accuracy": self.accuracy,
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "samples": self.sample_count}


def pool_features(z) -> np.ndarray:
    """Mean over all leading axes, keeping the trailing channel axis."""
    arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("pool_features: empty input")
    if arr.ndim == 1:
        return arr
    return arr.reshape(-1, arr.shape[-1]).mean(axis=0)


def train_probe(features: np.ndarray, labels: np.ndarray, classes: int,
                lr: float = 1e-3, epochs: int = 50,
                rng: SeededRng | None = None,
                module_index: int = -1) -> LinearProbe:
    """Full-batch Adam softmax regression on detached features.

    Weights start at zero, which makes the convex fit deterministic; the
    rng argument is accepted for interface symmetry but unused. A single
    represented class is allowed (with a warning) so degenerate data still
    yields a probe.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError(f"train_probe: features {features.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"train_probe: label out of range [0, {classes})")
    if np.unique(labels).size < 2:
        warnings.warn("train_probe: single-class data; probe is degenerate")

    X = Tensor(features)
    W = Tensor(np.zeros((features.shape[1], classes)), requires_grad=True, name="probe.W")
    b = Tensor(np.zeros(classes), requires_grad=True, name="probe.b")
    opt = Adam([W, b], lr=lr)
    for _ in range(epochs):
        zero_grads([W, b])
        lp = log_softmax(add(matmul(X, W), b), axis=1)
        loss = gather_cross_entropy(lp, labels)
        backward(loss, params=[W, b])
        opt.step()
    return LinearProbe(W.data.copy(), b.data.copy(), module_index)


def evaluate_probe(probe: LinearProbe, features: np.ndarray,
                   labels: np.ndarray, classes: int) -> ProbeResult:
    """Exact accuracy = correct/total, plus per-class accuracies."""
    pred = probe.predict(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    correct = pred == labels
    per_class = {}
    for c in range(classes):
        mask = labels == c
        if mask.any():
            per_class[c] = float(correct[mask].mean())
    return ProbeResult(float(correct.mean()), per_class, probe.module_index,
                       int(labels.shape[0]))


def fit_and_score(train_feats, train_labels, eval_feats, eval_labels, classes,
                  lr: float = 1e-3, epochs: int = 50,
                  module_index: int = -1) -> ProbeResult:
    probe = train_probe(train_feats, train_labels, classes, lr=lr, epochs=epochs,
                        module_index=module_index)
    return evaluate_probe(probe, eval_feats, eval_labels, classes)
