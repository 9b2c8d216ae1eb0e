"""Log-bilinear scoring heads, negative sampling, and the module-local
contrastive loss.

Each module m owns one weight matrix per prediction delay k. A bag holds
one positive (the true k-steps-ahead encoding) and N-1 negatives drawn
with replacement from every encoding in the mini-batch; the loss is the
softmax cross-entropy of picking the positive out of the bag. Scores stay
in the log domain end to end, so large activations cannot overflow, and
``ln N - loss`` is the per-delay mutual-information lower bound.

Two evaluation paths produce identical numbers: ``infonce_loss`` scores
explicit per-anchor bags (the reference path used by tests and small runs)
while ``delay_loss`` assembles whole delay groups as matrices (the path
the trainer uses; see tests for the equivalence check).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng
from .tensor import (Tensor, ShapeError, batched_dot, concat,
                     gather_cross_entropy, log_softmax, matmul, mul, reshape,
                     slice_rows, take_rows, transpose, tsum)


@dataclass
class PredictionHead:
    """Per-delay scoring matrices W_k of one module; discarded after training."""
    module_index: int
    weights: dict[int, Tensor]

    @property
    def delays(self) -> list[int]:
        return sorted(self.weights)

    def parameters(self) -> list[Tensor]:
        return [self.weights[k] for k in self.delays]

    def freeze(self) -> None:
        for w in self.weights.values():
            w.requires_grad = False
            w.grad = None


def build_head(module_index: int, d_target: int, d_anchor: int, delays) -> PredictionHead:
    """One [d_target, d_anchor] matrix per delay, initialized to zero.

    Zero weights score every bag uniformly, so training starts exactly at
    loss = ln N regardless of the encoder's output scale; the head matrices
    receive nonzero gradients immediately and move first.
    """
    weights = {}
    for k in sorted(delays):
        w = np.zeros((d_target, d_anchor))
        weights[k] = Tensor(w, requires_grad=True, name=f"head{module_index}.k{k}.W")
    return PredictionHead(module_index, weights)


def score_log_bilinear(z_target: Tensor, anchor: Tensor, W: Tensor) -> Tensor:
    """log f = z_target^T W anchor (no exponentiation; softmax handles it)."""
    if W.ndim != 2 or z_target.shape != (W.shape[0],) or anchor.shape != (W.shape[1],):
        raise ShapeError("score_log_bilinear", z_target.shape, W.shape, anchor.shape)
    return matmul(z_target, matmul(W, anchor))


def sample_negatives(pool: Tensor, count: int, rng: SeededRng) -> Tensor:
    """``count`` rows drawn uniformly with replacement from the pool [P, d].

    The pool is every encoding in the current mini-batch, so the positive
    itself may be drawn; that is intentional and harmless.
    """
    if pool.ndim != 2 or pool.shape[0] < 1:
        raise ValueError(f"sample_negatives: pool must be non-empty [P, d], got {pool.shape}")
    idx = rng.integers(0, pool.shape[0], size=count)
    return take_rows(pool, idx)


@dataclass
class ContrastiveBatch:
    """One bag: an anchor, its true future encoding, and sampled negatives."""
    anchor: Tensor            # [d_anchor]
    positive: Tensor          # [d_target]
    negatives: Tensor         # [N-1, d_target]
    delay: int
    positive_index: int = 0

    def __post_init__(self):
        n = self.negatives.shape[0] + 1
        if not 0 <= self.positive_index < n:
            raise ValueError(f"positive_index {self.positive_index} outside bag of size {n}")

    @property
    def bag_size(self) -> int:
        return self.negatives.shape[0] + 1


@dataclass
class ScoreMatrix:
    """Log-domain bag scores for one (anchor, delay) evaluation."""
    log_scores: Tensor  # [N]
    positive_index: int


@dataclass
class LossReport:
    """Per-delay losses (nats), their total, and the derived MI bounds."""
    per_delay: dict[int, Tensor]
    total: Tensor
    bag_size: int
    module_index: int = -1
    step: int = -1
    epoch: int = -1

    @property
    def per_delay_values(self) -> dict[int, float]:
        return {k: float(v.data) for k, v in self.per_delay.items()}

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    @property
    def mi_bound_per_delay(self) -> dict[int, float]:
        ln_n = math.log(self.bag_size)
        return {k: ln_n - float(v.data) for k, v in self.per_delay.items()}


def score_bag(batch: ContrastiveBatch, W: Tensor) -> ScoreMatrix:
    """Assemble the bag's log scores with the positive at its declared slot."""
    u = matmul(W, batch.anchor)                       # [d_target]
    pos = reshape(matmul(batch.positive, u), (1,))
    negs = matmul(batch.negatives, u)                 # [N-1]
    i = batch.positive_index
    if i == 0:
        scores = concat([pos, negs])
    elif i == negs.shape[0]:
        scores = concat([negs, pos])
    else:
        head = take_rows(negs, np.arange(i))
        tail = take_rows(negs, np.arange(i, negs.shape[0]))
        scores = concat([head, pos, tail])
    return ScoreMatrix(scores, i)


def infonce_loss(batches: list[ContrastiveBatch], head: PredictionHead,
                 module_index: int | None = None, step: int = -1,
                 epoch: int = -1) -> LossReport:
    """Reference bag-by-bag loss: mean within each delay, summed across delays."""
    if not batches:
        raise ValueError("infonce_loss: empty batch list")
    bag_size = batches[0].bag_size
    grouped: dict[int, list[Tensor]] = {}
    for b in batches:
        if b.delay not in head.weights:
            raise KeyError(f"infonce_loss: no head matrix for delay {b.delay}")
        if b.bag_size != bag_size:
            raise ValueError("infonce_loss: mixed bag sizes in one report")
        sm = score_bag(b, head.weights[b.delay])
        lp = log_softmax(reshape(sm.log_scores, (1, bag_size)), axis=1)
        nll = gather_cross_entropy(lp, np.array([sm.positive_index]))
        grouped.setdefault(b.delay, []).append(nll)
    per_delay: dict[int, Tensor] = {}
    for k, losses in grouped.items():
        acc = losses[0]
        for extra in losses[1:]:
            acc = acc + extra
        per_delay[k] = acc * (1.0 / len(losses))
    total = None
    for k in sorted(per_delay):
        total = per_delay[k] if total is None else total + per_delay[k]
    idx = head.module_index if module_index is None else module_index
    return LossReport(per_delay, total, bag_size, idx, step, epoch)


def _rows(t: Tensor, index) -> Tensor:
    """Row selection that is a zero-copy view for contiguous ranges."""
    if isinstance(index, slice):
        return slice_rows(t, index.start or 0, index.stop)
    return take_rows(t, index)


def _index_count(index, total: int) -> int:
    if isinstance(index, slice):
        return (index.stop - (index.start or 0))
    return index.shape[0]


def delay_loss(flat: Tensor, anchor_idx, target_idx,
               W: Tensor, n_negatives: int, rng: SeededRng,
               target_flat: Tensor | None = None,
               neg_idx: np.ndarray | None = None) -> Tensor:
    """Mean bag loss for one delay, assembled as whole matrices.

    ``flat`` is the [P, d_anchor] matrix of every anchor encoding in the
    batch; targets and negatives come from ``target_flat`` (defaults to
    ``flat``; passed separately when the target side is a different, possibly
    grad-blocked, representation). Anchor/target indices may be arrays or
    contiguous slices. Negatives are drawn with replacement from all P rows,
    fresh per anchor; the positive sits at slot 0 of every bag.
    """
    tf = flat if target_flat is None else target_flat
    n = _index_count(anchor_idx, flat.shape[0])
    if neg_idx is None:
        neg_idx = rng.integers(0, tf.shape[0], size=(n, n_negatives))
    anchors = _rows(flat, anchor_idx)                          # [n, d_a]
    positives = _rows(tf, target_idx)                          # [n, d_t]
    negatives = reshape(take_rows(tf, neg_idx.ravel()), (n, n_negatives, tf.shape[1]))
    u = matmul(anchors, transpose(W))                          # rows are (W a_i)^T
    pos_scores = reshape(tsum(mul(positives, u), axes=1), (n, 1))
    neg_scores = batched_dot(negatives, u)                     # [n, N-1]
    bag = concat([pos_scores, neg_scores], axis=1)             # [n, N]
    lp = log_softmax(bag, axis=1)
    return gather_cross_entropy(lp, np.zeros(n, dtype=np.intp))


def module_loss(flat: Tensor, pairs_by_delay: dict[int, tuple[np.ndarray, np.ndarray]],
                head: PredictionHead, n_negatives: int, rng: SeededRng,
                target_flat: Tensor | None = None, step: int = -1,
                epoch: int = -1) -> LossReport:
    """Per-delay mean losses over all pairs, summed into the module total."""
    per_delay: dict[int, Tensor] = {}
    for k in sorted(pairs_by_delay):
        if k not in head.weights:
            raise KeyError(f"module_loss: no head matrix for delay {k}")
        a_idx, t_idx = pairs_by_delay[k]
        per_delay[k] = delay_loss(flat, a_idx, t_idx, head.weights[k],
                                  n_negatives, rng, target_flat=target_flat)
    total = None
    for k in sorted(per_delay):
        total = per_delay[k] if total is None else total + per_delay[k]
    return LossReport(per_delay, total, n_negatives + 1, head.module_index, step, epoch)


def mi_lower_bound(report: LossReport) -> dict[int, float]:
    """ln N - loss_k per delay; never exceeds ln N, may be negative."""
    return report.mi_bound_per_delay
