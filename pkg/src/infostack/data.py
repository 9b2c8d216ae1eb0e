"""Synthetic slow-feature datasets with known ground truth.

Three generators stand in for real corpora at desk scale, each built around
a discrete class latent that persists across neighboring time steps or
patches, which is exactly the structure the contrastive objective exploits:

- ``seq_global``: one class per sequence; every step is the class embedding
  plus isotropic Gaussian noise (a speaker-identification-like regime).
- ``seq_local``: the latent symbol is resampled every ``coherence`` steps
  and labels are per step (a phone-classification-like regime).
- ``grid_class``: class-conditioned smooth random fields, so neighboring
  patches of an image share class information.

``true_mi_oracle`` computes the exact mutual information between the latent
at two positions by enumerating the discrete joint, giving the tests an
independent reference for the bound checks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng


@dataclass
class SyntheticSpec:
    """Parameters of one synthetic dataset."""
    kind: str                  # seq_global | seq_local | grid_class
    n_items: int = 1024
    length: int = 64           # T for sequences
    height: int = 64           # grid kinds
    width: int = 64
    n_classes: int = 8
    embed_dim: int = 8         # raw channels per step (sequences)
    noise_sigma: float = 0.5
    coherence: int = 8         # steps per latent segment (seq_local)
    mean_scale: float = 1.0    # scale of class embeddings / field coefficients
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("seq_global", "seq_local", "grid_class"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.kind == "seq_local" and self.coherence > self.length:
            raise ValueError("coherence must be <= sequence length")


def _balanced_labels(n: int, classes: int, rng: SeededRng) -> np.ndarray:
    """A shuffled, maximally balanced class assignment."""
    base = np.arange(n) % classes
    return base[rng.permutation(n)]


def _class_means(spec: SyntheticSpec, rng: SeededRng) -> np.ndarray:
    return spec.mean_scale * rng.normal(size=(spec.n_classes, spec.embed_dim))


def gen_seq_global(spec: SyntheticSpec, rng: SeededRng):
    """Sequences [n, embed_dim, T] with one label per sequence.

    Every step of a sequence is mu_class + sigma * noise, so nearby steps
    share exactly the class factor and nothing else.
    """
    if spec.n_classes < 2:
        raise ValueError("gen_seq_global: need at least 2 classes")
    means = _class_means(spec, rng.child("means"))
    items = rng.child("items")
    labels = _balanced_labels(spec.n_items, spec.n_classes, items.child("labels"))
    noise = items.child("noise").normal(size=(spec.n_items, spec.embed_dim, spec.length))
    x = means[labels][:, :, None] + spec.noise_sigma * noise
    return x, labels


def gen_seq_local(spec: SyntheticSpec, rng: SeededRng):
    """Sequences [n, embed_dim, T] with per-step labels [n, T].

    The latent symbol is redrawn independently at the start of every
    ``coherence``-step segment (segments are aligned across items).
    """
    if spec.n_classes < 2:
        raise ValueError("gen_seq_local: need at least 2 classes")
    if spec.coherence >= spec.length:
        warnings.warn("coherence >= length: seq_local degenerates to seq_global")
    means = _class_means(spec, rng.child("means"))
    items = rng.child("items")
    n_seg = -(-spec.length // spec.coherence)
    symbols = items.child("symbols").integers(0, spec.n_classes,
                                              size=(spec.n_items, n_seg))
    labels = np.repeat(symbols, spec.coherence, axis=1)[:, :spec.length]
    noise = items.child("noise").normal(size=(spec.n_items, spec.embed_dim, spec.length))
    x = means[labels].transpose(0, 2, 1) + spec.noise_sigma * noise
    return x, labels


def _fourier_basis(h: int, w: int, n_basis: int) -> np.ndarray:
    """Low-frequency separable cosine basis over the image plane, unit RMS."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    basis = []
    freqs = [(fy, fx) for fy in range(3) for fx in range(3) if fy or fx]
    for fy, fx in freqs[:n_basis]:
        b = np.cos(np.pi * fy * ys)[:, None] * np.cos(np.pi * fx * xs)[None, :]
        basis.append(b / np.sqrt((b ** 2).mean()))
    return np.stack(basis)


def gen_grid_class(spec: SyntheticSpec, rng: SeededRng):
    """Grayscale images [n, 1, H, W] with one label per image.

    Each image is a smooth random field: a low-frequency cosine basis with
    class-specific mean coefficients plus per-image coefficient jitter and
    per-pixel noise. Any two patches of an image see the same field, so
    neighboring patches share the class information.
    """
    if spec.n_classes < 2:
        raise ValueError("gen_grid_class: need at least 2 classes")
    n_basis = 8
    basis = _fourier_basis(spec.height, spec.width, n_basis)
    mean_rng = rng.child("means")
    coeff_means = spec.mean_scale * mean_rng.normal(size=(spec.n_classes, n_basis))
    items = rng.child("items")
    labels = _balanced_labels(spec.n_items, spec.n_classes, items.child("labels"))
    jitter = 0.25 * spec.mean_scale * items.child("jitter").normal(
        size=(spec.n_items, n_basis))
    coeffs = coeff_means[labels] + jitter
    fields = np.einsum("nb,bhw->nhw", coeffs, basis)
    noise = items.child("noise").normal(size=(spec.n_items, spec.height, spec.width))
    x = (fields + spec.noise_sigma * noise)[:, None, :, :]
    return x, labels


def generate(spec: SyntheticSpec, rng: SeededRng | None = None):
    rng = SeededRng(spec.seed) if rng is None else rng
    if spec.kind == "seq_global":
        return gen_seq_global(spec, rng)
    if spec.kind == "seq_local":
        return gen_seq_local(spec, rng)
    return gen_grid_class(spec, rng)


def true_mi_oracle(spec: SyntheticSpec, delay: int = 1) -> float:
    """Exact I(latent at t; latent at t+delay) in nats, by joint enumeration.

    For seq_global and grid_class the latent is shared by every position, so
    the MI equals the class entropy ln(n_classes). For seq_local the two
    positions share a segment with probability q = max(0, 1 - delay/coherence)
    (uniform anchor position, aligned segments); the joint is the q-mixture
    of the diagonal and the independent table.
    """
    C = spec.n_classes
    if spec.kind in ("seq_global", "grid_class"):
        q = 1.0
    elif spec.kind == "seq_local":
        q = max(0.0, 1.0 - delay / spec.coherence)
    else:
        raise ValueError(f"true_mi_oracle: no discrete latent for kind {spec.kind!r}")
    joint = np.full((C, C), (1.0 - q) / (C * C))
    joint[np.diag_indices(C)] += q / C
    marg = joint.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = joint * np.log(joint / np.outer(marg, marg))
    return float(np.nansum(terms))


def plugin_mi(a: np.ndarray, b: np.ndarray, classes: int) -> float:
    """Plug-in MI estimate from paired discrete samples, for oracle checks."""
    joint = np.zeros((classes, classes))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / np.outer(pa, pb)[mask])).sum())
