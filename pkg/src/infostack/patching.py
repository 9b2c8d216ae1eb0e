"""Patch/frame extraction and (anchor, target, delay) pair enumeration.

Images get a top-down ordering: prediction pairs run from a patch to
patches in the rows below it, within the same column, with the first few
(overlapping) rows optionally skipped. Sequences predict forward in time
with no skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng
from .tensor import Tensor, take_rows


@dataclass
class PatchGrid:
    """A rows x cols grid of patches cut from one image."""
    rows: int
    cols: int
    patch_px: int
    stride_px: int
    patches: np.ndarray  # [rows, cols, channels, patch_px, patch_px]


def extract_patch_grid(image, patch_px: int, overlap_px: int) -> PatchGrid:
    """Cut an image [C, H, W] into a grid of partly overlapping patches.

    The stride is patch_px - overlap_px; H and W must place an exact whole
    number of patches, i.e. (H - patch_px) must be divisible by the stride.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"extract_patch_grid: expected [C, H, W], got shape {img.shape}")
    if not 0 <= overlap_px < patch_px:
        raise ValueError(f"extract_patch_grid: need 0 <= overlap ({overlap_px}) < patch ({patch_px})")
    stride = patch_px - overlap_px
    C, H, W = img.shape
    for name, extent in (("H", H), ("W", W)):
        if extent < patch_px or (extent - patch_px) % stride != 0:
            lo = extent - (extent - patch_px) % stride if extent >= patch_px else patch_px
            hi = lo + stride
            raise ValueError(
                f"extract_patch_grid: {name}={extent} does not tile with patch {patch_px}, "
                f"stride {stride}; nearest valid sizes are {lo} and {hi}")
    rows = (H - patch_px) // stride + 1
    cols = (W - patch_px) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(img, (patch_px, patch_px), axis=(1, 2))
    patches = np.ascontiguousarray(win[:, ::stride, ::stride].transpose(1, 2, 0, 3, 4))
    return PatchGrid(rows, cols, patch_px, stride, patches)


def reconstruct_from_grid(grid: PatchGrid) -> np.ndarray:
    """Average overlapping patches back onto the image plane."""
    C = grid.patches.shape[2]
    H = (grid.rows - 1) * grid.stride_px + grid.patch_px
    W = (grid.cols - 1) * grid.stride_px + grid.patch_px
    acc = np.zeros((C, H, W))
    count = np.zeros((1, H, W))
    for i in range(grid.rows):
        for j in range(grid.cols):
            ys = i * grid.stride_px
            xs = j * grid.stride_px
            acc[:, ys:ys + grid.patch_px, xs:xs + grid.patch_px] += grid.patches[i, j]
            count[:, ys:ys + grid.patch_px, xs:xs + grid.patch_px] += 1.0
    return acc / count


@dataclass
class PredictionPairSet:
    """(anchor, target, delay) triples over a grid or a sequence.

    Pairs are stored as flat position indices: ``t`` for sequences,
    ``i * cols + j`` for grids. Targets are always strictly later than
    their anchors in the imposed order.
    """
    pairs: list[tuple[int, int, int]]
    k_max: int
    skip: int
    grid_shape: tuple[int, int] | None = None
    _by_delay: dict[int, tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    @property
    def delays(self) -> list[int]:
        return sorted({k for _, _, k in self.pairs})

    def by_delay(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Anchor/target index arrays grouped per delay, for vectorized scoring."""
        if self._by_delay is None:
            grouped: dict[int, tuple[list[int], list[int]]] = {}
            for a, t, k in self.pairs:
                grouped.setdefault(k, ([], []))[0].append(a)
                grouped[k][1].append(t)
            self._by_delay = {k: (np.asarray(a, dtype=np.intp), np.asarray(t, dtype=np.intp))
                              for k, (a, t) in grouped.items()}
        return self._by_delay

    def __len__(self) -> int:
        return len(self.pairs)


def build_prediction_pairs_grid(grid_dims: tuple[int, int], K: int,
                                skip: int = 1) -> PredictionPairSet:
    """Pairs ((i,j), (i+k,j), k) for k in [1+skip, K+skip], strictly downward.

    Prediction never leaves the column; the first ``skip`` rows below the
    anchor are excluded (they overlap the anchor patch).
    """
    rows, cols = grid_dims
    if K < 1 or skip < 0:
        raise ValueError(f"build_prediction_pairs_grid: need K >= 1, skip >= 0, got K={K}, skip={skip}")
    pairs = []
    for k in range(1 + skip, K + skip + 1):
        for i in range(rows - k):
            for j in range(cols):
                pairs.append((i * cols + j, (i + k) * cols + j, k))
    if not pairs:
        raise ValueError(
            f"build_prediction_pairs_grid: no pairs for grid {rows}x{cols} with "
            f"K={K}, skip={skip} (need rows >= skip + 2)")
    return PredictionPairSet(pairs, K, skip, grid_shape=(rows, cols))


def build_prediction_pairs_seq(T: int, K: int) -> PredictionPairSet:
    """Pairs (t, t+k, k) for k in [1, K]; requires T >= K + 1."""
    if K < 1:
        raise ValueError(f"build_prediction_pairs_seq: need K >= 1, got {K}")
    if T <= K:
        raise ValueError(f"build_prediction_pairs_seq: need T > K, got T={T}, K={K}")
    pairs = [(t, t + k, k) for k in range(1, K + 1) for t in range(T - k)]
    return PredictionPairSet(pairs, K, 0)


def subsample_loss_window(z_seq: Tensor, window: int, rng: SeededRng) -> Tensor:
    """Contiguous random slice of ``window`` leading-axis steps.

    Gradients flow through the slice; only the loss evaluation sees the
    reduced length, never the forward shape.
    """
    T = z_seq.shape[0]
    if T < window:
        raise ValueError(f"subsample_loss_window: window {window} exceeds length {T}")
    offset = int(rng.integers(0, T - window + 1))
    return take_rows(z_seq, np.arange(offset, offset + window))
