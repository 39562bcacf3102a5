"""Noise sample suppression: down-weight foreground cells that look like background."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import BevFeatureMap
from .prototypes import NORM_FLOOR, PrototypeBank

DEFAULT_SIM_THRESHOLD = 0.3


@dataclass
class NoiseMask:
    values: np.ndarray  # (H, W) entries in {alpha, 1.0}
    alpha: float
    sim_threshold: float = DEFAULT_SIM_THRESHOLD

    @property
    def suppressed(self) -> np.ndarray:
        return self.values != 1.0 if self.alpha != 1.0 else np.zeros(self.values.shape, dtype=bool)


def build_mask(fmap: BevFeatureMap, fg_cells: np.ndarray, bank: PrototypeBank, alpha: float,
               sim_threshold: float = DEFAULT_SIM_THRESHOLD) -> NoiseMask:
    """Foreground cells with cosine similarity to the background prototype above the threshold get alpha.

    ``fg_cells`` is either an (H, W) boolean mask or an (M, 2) array of (iy, ix).
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    h, w, _ = fmap.features.shape
    values = np.ones((h, w))
    cells = np.asarray(fg_cells)
    if cells.dtype == bool:
        iy, ix = np.nonzero(cells)
    else:
        cells = cells.reshape(-1, 2)
        iy, ix = cells[:, 0], cells[:, 1]
    if iy.size == 0:
        return NoiseMask(values, alpha, sim_threshold)
    f = fmap.features[iy, ix]
    g = bank.background
    nf = np.linalg.norm(f, axis=1)
    ng = np.linalg.norm(g)
    degenerate = (nf < NORM_FLOOR) | (ng < NORM_FLOOR)
    sim = (f @ g) / np.maximum(nf * ng, NORM_FLOOR * NORM_FLOOR)
    noisy = degenerate | (sim > sim_threshold)
    values[iy[noisy], ix[noisy]] = alpha
    return NoiseMask(values, alpha, sim_threshold)


def apply_mask(cell_loss: np.ndarray, mask: NoiseMask | np.ndarray, cell_grads: np.ndarray | None = None):
    """Weight per-cell loss contributions (and optionally per-cell gradients) by the mask."""
    m = mask.values if isinstance(mask, NoiseMask) else np.asarray(mask, dtype=np.float64)
    masked = float((np.asarray(cell_loss) * m).sum())
    if cell_grads is None:
        return masked
    g = np.asarray(cell_grads)
    return masked, g * m.reshape(m.shape + (1,) * (g.ndim - m.ndim))


def write_pgm(path, mask: NoiseMask | np.ndarray) -> None:
    """Binary PGM (P5): 1.0 -> 255, alpha -> round(alpha * 255); top image row is the largest y."""
    m = mask.values if isinstance(mask, NoiseMask) else np.asarray(mask)
    img = np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)[::-1]
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
