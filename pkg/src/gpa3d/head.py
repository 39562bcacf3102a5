"""Anchor-free per-cell detection head, its loss, decoding and pseudo-labelling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .encoder import BevFeatureMap, BevGrid, Projection, project_boxes
from .geometry import Box3D, wrap_pi

N_REG = 8  # dcx, dcy, dcz, log h, log w, log l, sin r, cos r
LOGIT_CLIP = 20.0
SMOOTH_L1_DELTA = 1.0


@dataclass
class HeadParams:
    cls_weight: np.ndarray  # (C,)
    cls_bias: float
    reg_weight: np.ndarray  # (8, C)
    reg_bias: np.ndarray  # (8,)

    @classmethod
    def init(cls, channels: int = 16, seed: int = 1, scale: float = 0.1, cls_prior: float = 0.5) -> "HeadParams":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, channels), math.log(cls_prior / (1.0 - cls_prior)),
                   rng.normal(0.0, scale, (N_REG, channels)), np.zeros(N_REG))

    @classmethod
    def zeros(cls, channels: int = 16) -> "HeadParams":
        return cls(np.zeros(channels), 0.0, np.zeros((N_REG, channels)), np.zeros(N_REG))


@dataclass
class HeadOutput:
    logits: np.ndarray  # (H, W)
    reg: np.ndarray  # (H, W, 8)

    @property
    def scores(self) -> np.ndarray:
        return sigmoid(self.logits)


@dataclass
class HeadGrads:
    cls_weight: np.ndarray
    cls_bias: float
    reg_weight: np.ndarray
    reg_bias: np.ndarray


@dataclass
class DetectionLoss:
    total: float
    l_cls: float
    l_reg: float
    grad_features: np.ndarray  # (H, W, C)
    grad_head: HeadGrads
    cell_loss: np.ndarray  # (H, W) unmasked per-cell contribution to ``total``


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def head_forward(fmap: BevFeatureMap, params: HeadParams) -> HeadOutput:
    f = fmap.features
    logits = f @ params.cls_weight + params.cls_bias
    reg = f @ params.reg_weight.T + params.reg_bias
    return HeadOutput(logits, reg)


# ---------------------------------------------------------------------------
# regression encoding
# ---------------------------------------------------------------------------

def encode_targets(box: Box3D, cell_x, cell_y, cell_size: float) -> np.ndarray:
    """Regression targets of ``box`` as seen from cells centred at (cell_x, cell_y)."""
    cell_x = np.atleast_1d(np.asarray(cell_x, dtype=np.float64))
    cell_y = np.atleast_1d(np.asarray(cell_y, dtype=np.float64))
    t = np.empty((cell_x.size, N_REG))
    t[:, 0] = (box.cx - cell_x) / cell_size
    t[:, 1] = (box.cy - cell_y) / cell_size
    t[:, 2] = box.cz / cell_size
    t[:, 3] = math.log(box.h)
    t[:, 4] = math.log(box.w)
    t[:, 5] = math.log(box.l)
    t[:, 6] = math.sin(box.yaw)
    t[:, 7] = math.cos(box.yaw)
    return t


def decode_boxes(reg: np.ndarray, cell_x, cell_y, cell_size: float) -> np.ndarray:
    """Inverse of ``encode_targets``: (n, 7) array cx, cy, cz, h, w, l, yaw."""
    reg = np.asarray(reg, dtype=np.float64).reshape(-1, N_REG)
    out = np.empty((reg.shape[0], 7))
    out[:, 0] = np.asarray(cell_x) + reg[:, 0] * cell_size
    out[:, 1] = np.asarray(cell_y) + reg[:, 1] * cell_size
    out[:, 2] = reg[:, 2] * cell_size
    # exp of an untrained regressor can overflow; dims above e^4 m are meaningless anyway
    out[:, 3:6] = np.exp(np.clip(reg[:, 3:6], -6.0, 4.0))
    out[:, 6] = np.arctan2(reg[:, 6], reg[:, 7])
    return out


def _fg_targets(grid: BevGrid, labels: Sequence[Box3D], proj: Projection):
    """Foreground cell indices and their regression targets, row-major order."""
    iy, ix = np.nonzero(proj.fg)
    t = np.zeros((iy.size, N_REG))
    if iy.size:
        cs = grid.cell_size
        cx = grid.x_range[0] + (ix + 0.5) * cs
        cy = grid.y_range[0] + (iy + 0.5) * cs
        bid = proj.box_id[iy, ix]
        for b in np.unique(bid):
            sel = bid == b
            t[sel] = encode_targets(labels[b], cx[sel], cy[sel], cs)
    return iy, ix, t


def build_targets(grid: BevGrid, labels: Sequence[Box3D], projection: Projection | None = None):
    """(fg mask, per-cell regression targets) under the cell-center-in-box rule."""
    proj = projection if projection is not None else project_boxes(grid, labels, 1)
    targets = np.zeros((grid.H, grid.W, N_REG))
    iy, ix, t = _fg_targets(grid, labels, proj)
    targets[iy, ix] = t
    return proj.fg, targets


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _smooth_l1(d):
    a = np.abs(d)
    quad = a < SMOOTH_L1_DELTA
    val = np.where(quad, 0.5 * d * d / SMOOTH_L1_DELTA, a - 0.5 * SMOOTH_L1_DELTA)
    grad = np.where(quad, d / SMOOTH_L1_DELTA, np.sign(d))
    return val, grad


def detection_loss(fmap: BevFeatureMap, out: HeadOutput, params: HeadParams, labels: Sequence[Box3D],
                   mask: np.ndarray | None = None, projection: Projection | None = None) -> DetectionLoss:
    """Mean BCE over all cells + mean smooth-L1 over foreground cells.

    ``mask`` (H, W) multiplies each cell's contribution before averaging;
    the denominators (cell count, foreground count) are not re-weighted.
    """
    grid = fmap.grid
    h, w = out.logits.shape
    proj = projection if projection is not None else project_boxes(grid, labels, 1)
    fg = proj.fg
    y = fg.astype(np.float64)
    m = np.ones((h, w)) if mask is None else np.asarray(mask, dtype=np.float64)

    z = np.clip(out.logits, -LOGIT_CLIP, LOGIT_CLIP)
    # BCE with logits, stable form
    bce = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n_cells = h * w
    cell_cls = bce / n_cells
    dz = (sigmoid(z) - y) / n_cells
    # the clip has zero slope outside the window
    dz = np.where(np.abs(out.logits) <= LOGIT_CLIP, dz, 0.0) * m

    f = fmap.features
    c = f.shape[2]
    f2 = f.reshape(-1, c)
    grad_feat = dz[..., None] * params.cls_weight
    cell_reg = np.zeros((h, w))
    g_rw = np.zeros((N_REG, c))
    g_rb = np.zeros(N_REG)
    iy, ix, t = _fg_targets(grid, labels, proj)
    n_fg = iy.size
    if n_fg:
        val, g = _smooth_l1(out.reg[iy, ix] - t)
        cell_reg[iy, ix] = val.sum(axis=1) / n_fg
        d = g / n_fg * m[iy, ix, None]
        grad_feat[iy, ix] += d @ params.reg_weight
        g_rw = d.T @ f[iy, ix]
        g_rb = d.sum(axis=0)

    cell_loss = cell_cls + cell_reg
    l_cls = float((cell_cls * m).sum())
    l_reg = float((cell_reg * m).sum())
    grads = HeadGrads(cls_weight=dz.reshape(-1) @ f2, cls_bias=float(dz.sum()), reg_weight=g_rw, reg_bias=g_rb)
    return DetectionLoss(l_cls + l_reg, l_cls, l_reg, grad_feat, grads, cell_loss)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def decode(out: HeadOutput, grid: BevGrid, score_threshold: float = 0.2, nms_iou: float = 0.3,
           max_candidates: int | None = None) -> list[Detection]:
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    scores = out.scores
    iy, ix = np.nonzero(scores >= score_threshold)
    if iy.size == 0:
        return []
    s = scores[iy, ix]
    if max_candidates is not None and s.size > max_candidates:
        top = np.argsort(-s, kind="stable")[:max_candidates]
        iy, ix, s = iy[top], ix[top], s[top]
    gx, gy = grid.cell_centers()
    boxes = decode_boxes(out.reg[iy, ix], gx[iy, ix], gy[iy, ix], grid.cell_size)
    bev = boxes[:, [0, 1, 5, 4, 6]]
    keep = _kernels.nms(bev, s, nms_iou)
    dets = []
    for i in keep:
        b = boxes[i]
        sc = float(s[i])
        dets.append(Detection(Box3D(float(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4]),
                                    float(b[5]), float(wrap_pi(b[6])), sc), sc))
    return dets
