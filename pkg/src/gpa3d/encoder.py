"""BEV backbone: pillar statistics -> one affine layer over a cell neighbourhood -> tanh.

With ``patch == 1`` the layer is exactly cellwise ``tanh(W s + b)``; larger odd
patches let each cell read the statistics of its neighbours (a single 2-D
convolution), which is what gives a cell inside a car a view of the car's
visible faces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .geometry import Box3D, Scene, group_index

N_STATS = _kernels.N_STATS
OCC = 7  # index of the 0/1 occupancy statistic


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-25.6, 25.6)
    cell_size: float = 0.8

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        if self.W < 1 or self.H < 1:
            raise ValueError(f"grid {self} has no cells")

    @property
    def W(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def H(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(H, W) arrays of cell-center x and y."""
        xs = self.x_range[0] + (np.arange(self.W) + 0.5) * self.cell_size
        ys = self.y_range[0] + (np.arange(self.H) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def contains(self, x: float, y: float) -> bool:
        return self.x_range[0] <= x < self.x_range[1] and self.y_range[0] <= y < self.y_range[1]


@dataclass
class EncoderParams:
    weight: np.ndarray  # (C, D * patch * patch), input order (dy, dx, stat)
    bias: np.ndarray  # (C,)
    patch: int = 1
    # fixed (not learned) standardisation of occupied-cell statistics; identity by default
    input_shift: np.ndarray | None = None  # (D,)
    input_scale: np.ndarray | None = None  # (D,)

    def __post_init__(self):
        if self.input_shift is None:
            self.input_shift = np.zeros(N_STATS)
        if self.input_scale is None:
            self.input_scale = np.ones(N_STATS)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
        if self.input_shift[OCC] != 0.0 or self.input_scale[OCC] != 1.0:
            raise ValueError("the occupancy statistic must not be shifted or scaled")
        if (self.input_scale <= 0).any():
            raise ValueError("input_scale must be positive")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def normalised(self) -> bool:
        return bool(self.input_shift.any() or (self.input_scale != 1.0).any())

    @classmethod
    def init(cls, channels: int = 16, patch: int = 1, seed: int = 0, scale: float = 1.0) -> "EncoderParams":
        if patch < 1 or patch % 2 == 0:
            raise ValueError("patch must be a positive odd integer")
        rng = np.random.default_rng(seed)
        fan_in = N_STATS * patch * patch
        w = rng.normal(0.0, scale / math.sqrt(fan_in), (channels, fan_in))
        return cls(w, np.zeros(channels), patch)


@dataclass
class BevFeatureMap:
    grid: BevGrid
    features: np.ndarray  # (H, W, C)
    raw_stats: np.ndarray  # (H, W, D)
    occupancy: np.ndarray  # (H, W) bool
    inputs: np.ndarray | None = field(default=None, repr=False)  # (H*W, D*p*p) cache for backprop
    active: np.ndarray | None = field(default=None, repr=False)  # rows of ``inputs`` that are nonzero
    occupied: np.ndarray | None = field(default=None, repr=False)  # (n, 2) nonzero cells, sparse route
    patch: int = 1
    occupied_inputs: np.ndarray | None = field(default=None, repr=False)  # (n, D) normalised stats of ``occupied``


@dataclass
class FeatureSequences:
    fg: np.ndarray  # (M, C)
    fg_group: np.ndarray  # (M,) 1-based group index
    fg_cells: np.ndarray  # (M, 2) (iy, ix)
    bg: np.ndarray  # (M, C)
    bg_cells: np.ndarray  # (M, 2)
    fg_box: np.ndarray | None = None  # (M,) index of the owning box

    def __len__(self) -> int:
        return self.fg.shape[0]

    @classmethod
    def empty(cls, channels: int) -> "FeatureSequences":
        z = np.zeros((0, channels))
        zi = np.zeros((0, 2), dtype=np.int64)
        return cls(z, np.zeros(0, dtype=np.int64), zi, z.copy(), zi.copy(), np.zeros(0, dtype=np.int64))


@dataclass
class Projection:
    """Box footprints burned into the grid (cell centers inside rotated rectangles)."""

    fg: np.ndarray  # (H, W) bool
    box_id: np.ndarray  # (H, W) int, -1 outside all boxes
    group: np.ndarray  # (H, W) int, 0 outside all boxes


def rasterize(scene: Scene | np.ndarray, grid: BevGrid) -> np.ndarray:
    points = scene.points if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float64)
    return _kernels.rasterize(points, grid.x_range[0], grid.y_range[0], grid.cell_size, grid.W, grid.H)


def normalise_stats(stats: np.ndarray, params: EncoderParams) -> np.ndarray:
    """``(s - shift * occupied) / scale``: linear in ``s``, so empty cells stay exactly zero."""
    if not params.normalised:
        return stats
    return (stats - stats[..., OCC:OCC + 1] * params.input_shift) / params.input_scale


def fit_input_norm(stats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of each statistic over the occupied cells of ``stats`` maps."""
    rows = [s.reshape(-1, N_STATS) for s in stats]
    x = np.concatenate(rows) if rows else np.zeros((0, N_STATS))
    x = x[x[:, OCC] > 0]
    shift, scale = np.zeros(N_STATS), np.ones(N_STATS)
    if x.shape[0] >= 2:
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-6] = 1.0
    shift[OCC], scale[OCC] = 0.0, 1.0
    return shift, scale


def _patches(stats: np.ndarray, patch: int) -> np.ndarray:
    h, w, d = stats.shape
    if patch == 1:
        return stats.reshape(h * w, d)
    r = patch // 2
    padded = np.pad(stats, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(padded, (patch, patch), axis=(0, 1))  # (h, w, d, p, p)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, patch * patch * d)


def encode(stats: np.ndarray, params: EncoderParams, grid: BevGrid | None = None,
           method: str = "sparse") -> BevFeatureMap:
    """Cellwise ``tanh(W @ patch + b)``.

    ``method="sparse"`` scatters the contribution of each occupied cell to its
    neighbours; ``"dense"`` builds the full patch matrix.  Both give the same
    features, the sparse route is much cheaper on LiDAR-like occupancy.
    """
    stats = np.asarray(stats, dtype=np.float64)
    h, w, d = stats.shape
    if d != N_STATS or params.weight.shape[1] != d * params.patch ** 2:
        raise ValueError(f"stat dim {d} / patch {params.patch} do not match weight {params.weight.shape}")
    if grid is None:
        grid = BevGrid(x_range=(0.0, float(w)), y_range=(0.0, float(h)), cell_size=1.0)
    c = params.channels
    inp = normalise_stats(stats, params)
    if method == "dense":
        x = _patches(inp, params.patch)
        active = np.flatnonzero(np.any(x != 0.0, axis=1))
        pre = np.broadcast_to(params.bias, (h * w, c)).copy()
        if active.size:
            pre[active] += x[active] @ params.weight.T
        feats = np.tanh(pre).reshape(h, w, c)
        return BevFeatureMap(grid, feats, stats, stats[:, :, OCC] > 0, x, active)
    if method != "sparse":
        raise ValueError(f"unknown encode method {method!r}")
    p = params.patch
    r = p // 2
    nz = np.any(stats != 0.0, axis=2)
    iy, ix = np.nonzero(nz)
    pre = np.empty((h + 2 * r, w + 2 * r, c))
    pre[:] = params.bias
    if iy.size:
        s = inp[iy, ix]
        # weight (C, dy, dx, stat) -> (stat, dy*dx*C)
        wr = params.weight.reshape(c, p * p, d).transpose(2, 1, 0).reshape(d, p * p * c)
        # output cell (y, x) reads input (y + dy - r, x + dx - r)
        _kernels.patch_scatter((s @ wr).reshape(-1, p, p, c), iy, ix, pre)
    feats = np.tanh(pre[r:r + h, r:r + w])
    return BevFeatureMap(grid, feats, stats, stats[:, :, OCC] > 0, None, None, np.column_stack([iy, ix]), p,
                         inp[iy, ix])


def encode_scene(scene: Scene, params: EncoderParams, grid: BevGrid) -> BevFeatureMap:
    return encode(rasterize(scene, grid), params, grid)


def encode_backward(fmap: BevFeatureMap, grad_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d weight, d bias) given dLoss/dfeatures of shape (H, W, C)."""
    h, w, c = fmap.features.shape
    dpre = np.asarray(grad_features, dtype=np.float64).reshape(h, w, c) * (1.0 - fmap.features ** 2)
    gb = dpre.reshape(-1, c).sum(axis=0)
    if fmap.occupied is not None:
        p = fmap.patch
        r = p // 2
        d = fmap.raw_stats.shape[2]
        iy, ix = fmap.occupied[:, 0], fmap.occupied[:, 1]
        if iy.size == 0:
            return np.zeros((c, p * p * d)), gb
        pad = np.zeros((h + 2 * r, w + 2 * r, c))
        pad[r:r + h, r:r + w] = dpre
        s = fmap.occupied_inputs
        g = _kernels.patch_gather(pad, iy, ix, p)
        gw = (g.reshape(iy.size, -1).T @ s).reshape(p * p, c, d).transpose(1, 0, 2).reshape(c, p * p * d)
        return gw, gb
    if fmap.inputs is None:
        raise ValueError("feature map has no cached inputs; re-run encode() before backprop")
    dpre = dpre.reshape(-1, c)
    if fmap.active is not None and fmap.active.size < dpre.shape[0]:
        idx = fmap.active
        gw = dpre[idx].T @ fmap.inputs[idx] if idx.size else np.zeros((c, fmap.inputs.shape[1]))
    else:
        gw = dpre.T @ fmap.inputs
    return gw, gb


# ---------------------------------------------------------------------------
# box projection and sequence extraction
# ---------------------------------------------------------------------------

def project_boxes(grid: BevGrid, boxes: Sequence[Box3D], k: int) -> Projection:
    h, w = grid.H, grid.W
    if not boxes:
        return Projection(np.zeros((h, w), dtype=bool), np.full((h, w), -1, dtype=np.int64),
                          np.zeros((h, w), dtype=np.int64))
    bev = np.array([b.bev for b in boxes], dtype=np.float64)
    owner = _kernels.box_cells(bev, grid.x_range[0], grid.y_range[0], grid.cell_size, w, h)
    fg = owner >= 0
    groups = np.array([0] + [group_index(b, k) for b in boxes], dtype=np.int64)
    return Projection(fg, owner, groups[owner + 1])


def extract_sequences(fmap: BevFeatureMap, boxes: Sequence[Box3D], k: int, rng,
                      projection: Projection | None = None) -> FeatureSequences:
    c = fmap.features.shape[2]
    proj = projection if projection is not None else project_boxes(fmap.grid, boxes, k)
    fg_idx = np.argwhere(proj.fg)  # row-major, seed independent
    m = fg_idx.shape[0]
    if m == 0:
        return FeatureSequences.empty(c)

    not_fg = ~proj.fg
    occ_pool = np.argwhere(not_fg & fmap.occupancy)
    free_pool = np.argwhere(not_fg & ~fmap.occupancy)
    if occ_pool.shape[0] >= m:
        pick = occ_pool[rng.choice(occ_pool.shape[0], m, replace=False)]
    else:
        need = m - occ_pool.shape[0]
        if free_pool.shape[0] >= need:
            extra = free_pool[rng.choice(free_pool.shape[0], need, replace=False)]
        else:
            extra = free_pool
        pick = np.concatenate([occ_pool, extra])
    if pick.shape[0] < m:
        # fewer non-foreground cells than foreground ones: shorten fg to keep lengths equal
        keep = np.sort(rng.choice(m, pick.shape[0], replace=False))
        fg_idx = fg_idx[keep]
    fy, fx = fg_idx[:, 0], fg_idx[:, 1]
    by, bx = pick[:, 0], pick[:, 1]
    return FeatureSequences(
        fg=fmap.features[fy, fx], fg_group=proj.group[fy, fx], fg_cells=fg_idx,
        bg=fmap.features[by, bx], bg_cells=pick, fg_box=proj.box_id[fy, fx],
    )


def scatter_sequence_grads(shape: tuple[int, int, int], seqs: FeatureSequences,
                           g_fg: np.ndarray, g_bg: np.ndarray) -> np.ndarray:
    """Accumulate per-row feature gradients back onto an (H, W, C) map."""
    out = np.zeros(shape)
    if len(seqs):
        np.add.at(out, (seqs.fg_cells[:, 0], seqs.fg_cells[:, 1]), g_fg)
        np.add.at(out, (seqs.bg_cells[:, 0], seqs.bg_cells[:, 1]), g_bg)
    return out
