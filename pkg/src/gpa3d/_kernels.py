"""Hot inner loops, each in two flavours.

Every kernel exists as a numba ``@njit`` loop (``*_jit``) and as a pure
numpy/python version (``*_np``).  The public names bound at the bottom of
the module pick one of the two at import time:

    GPA3D_DISABLE_JIT=1   -> numpy fallbacks
    (unset / 0)           -> numba, if importable

Both flavours must agree to floating-point round-off; ``tests/test_kernels.py``
and ``benchmarks/bench_kernels.py`` exercise them side by side.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and os.environ.get("GPA3D_DISABLE_JIT", "0").lower() not in ("1", "true", "yes")

# collinear / on-edge tolerance for polygon clipping
CLIP_EPS = 1e-9


def _identity_decorator(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


if not HAVE_NUMBA:  # pragma: no cover
    njit = _identity_decorator


# ---------------------------------------------------------------------------
# rotated rectangle corners / IoU
# ---------------------------------------------------------------------------

def _corners_py(cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    # counter-clockwise starting at rear-right
    local = ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw))
    return [(cx + u * c - v * s, cy + u * s + v * c) for u, v in local]


def _shoelace_py(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def _clip_py(subject, clip):
    """Sutherland-Hodgman: clip ``subject`` by every half-plane of convex CCW ``clip``."""
    out = list(subject)
    m = len(clip)
    for i in range(m):
        if len(out) == 0:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        n = len(inp)
        for j in range(n):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % n]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            p_in = dp >= -CLIP_EPS
            q_in = dq >= -CLIP_EPS
            if p_in:
                out.append((px, py))
            if p_in != q_in:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_iou_pair_np(a, b):
    """IoU of two BEV rectangles given as (cx, cy, length, width, yaw)."""
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    # cheap reject on bounding circles
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if math.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    inter_poly = _clip_py(_corners_py(*a), _corners_py(*b))
    inter = max(_shoelace_py(inter_poly), 0.0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def bev_iou_matrix_np(boxes_a, boxes_b):
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    for i in range(boxes_a.shape[0]):
        ai = tuple(boxes_a[i])
        for j in range(boxes_b.shape[0]):
            out[i, j] = bev_iou_pair_np(ai, tuple(boxes_b[j]))
    return out


@njit(cache=True)
def _corners_jit(box):
    out = np.empty((4, 2))
    c, s = math.cos(box[4]), math.sin(box[4])
    hl, hw = 0.5 * box[2], 0.5 * box[3]
    us = (-hl, hl, hl, -hl)
    vs = (-hw, -hw, hw, hw)
    for i in range(4):
        out[i, 0] = box[0] + us[i] * c - vs[i] * s
        out[i, 1] = box[1] + us[i] * s + vs[i] * c
    return out


@njit(cache=True)
def _bev_iou_pair_jit(a, b):
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if math.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0

    pa = _corners_jit(a)
    pb = _corners_jit(b)

    # a convex quad clipped by 4 half-planes has at most 8 vertices
    buf_in = np.empty((16, 2))
    buf_out = np.empty((16, 2))
    n = 4
    for i in range(4):
        buf_in[i, 0] = pa[i, 0]
        buf_in[i, 1] = pa[i, 1]
    for i in range(4):
        if n == 0:
            break
        ax, ay = pb[i, 0], pb[i, 1]
        bx, by = pb[(i + 1) % 4, 0], pb[(i + 1) % 4, 1]
        ex, ey = bx - ax, by - ay
        m = 0
        for j in range(n):
            px, py = buf_in[j, 0], buf_in[j, 1]
            qx, qy = buf_in[(j + 1) % n, 0], buf_in[(j + 1) % n, 1]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            p_in = dp >= -CLIP_EPS
            q_in = dq >= -CLIP_EPS
            if p_in:
                buf_out[m, 0] = px
                buf_out[m, 1] = py
                m += 1
            if p_in != q_in:
                t = dp / (dp - dq)
                buf_out[m, 0] = px + t * (qx - px)
                buf_out[m, 1] = py + t * (qy - py)
                m += 1
        n = m
        for j in range(n):
            buf_in[j, 0] = buf_out[j, 0]
            buf_in[j, 1] = buf_out[j, 1]

    inter = 0.0
    if n >= 3:
        for i in range(n):
            k = (i + 1) % n
            inter += buf_in[i, 0] * buf_in[k, 1] - buf_in[k, 0] * buf_in[i, 1]
        inter *= 0.5
    if inter < 0.0:
        inter = 0.0
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    if iou > 1.0:
        iou = 1.0
    return iou


@njit(cache=True)
def _bev_iou_matrix_jit(boxes_a, boxes_b):
    na, nb = boxes_a.shape[0], boxes_b.shape[0]
    out = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            out[i, j] = _bev_iou_pair_jit(boxes_a[i], boxes_b[j])
    return out


def bev_iou_matrix_jit(boxes_a, boxes_b):
    boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    return _bev_iou_matrix_jit(boxes_a, boxes_b)


# ---------------------------------------------------------------------------
# Greedy rotated NMS over score-sorted candidates
# ---------------------------------------------------------------------------

def nms_np(boxes, scores, iou_threshold):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for ii, i in enumerate(order):
        if suppressed[ii]:
            continue
        keep.append(i)
        bi = tuple(boxes[i])
        for jj in range(ii + 1, len(order)):
            if not suppressed[jj] and bev_iou_pair_np(bi, tuple(boxes[order[jj]])) > iou_threshold:
                suppressed[jj] = True
    return np.asarray(keep, dtype=np.int64)


@njit(cache=True)
def _nms_jit(boxes, order, iou_threshold):
    n = order.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for ii in range(n):
        if suppressed[ii]:
            continue
        i = order[ii]
        keep[nk] = i
        nk += 1
        for jj in range(ii + 1, n):
            if not suppressed[jj]:
                if _bev_iou_pair_jit(boxes[i], boxes[order[jj]]) > iou_threshold:
                    suppressed[jj] = True
    return keep[:nk]


def nms_jit(boxes, scores, iou_threshold):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 5)
    order = np.argsort(-np.asarray(scores), kind="stable").astype(np.int64)
    return _nms_jit(boxes, order, float(iou_threshold))


# ---------------------------------------------------------------------------
# Per-cell point statistics (pillar rasterization)
# ---------------------------------------------------------------------------
# layout of the 8 channels:
#   0 log(1+count)  1 mean z  2 max z  3 mean intensity
#   4 std z         5 mean |x-cell_x|  6 mean |y-cell_y|  7 occupancy flag

N_STATS = 8


def _cell_indices(points, x_min, y_min, cell, nx, ny):
    ix = np.floor((points[:, 0] - x_min) / cell).astype(np.int64)
    iy = np.floor((points[:, 1] - y_min) / cell).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    return ix, iy, ok


def rasterize_np(points, x_min, y_min, cell, nx, ny):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((ny, nx, N_STATS))
    if points.shape[0] == 0:
        return out
    ix, iy, ok = _cell_indices(points, x_min, y_min, cell, nx, ny)
    p, ix, iy = points[ok], ix[ok], iy[ok]
    if p.shape[0] == 0:
        return out
    flat = iy * nx + ix
    ncell = nx * ny
    cnt = np.bincount(flat, minlength=ncell).astype(np.float64)
    z, inten = p[:, 2], p[:, 3]
    dx = np.abs(p[:, 0] - (x_min + (ix + 0.5) * cell))
    dy = np.abs(p[:, 1] - (y_min + (iy + 0.5) * cell))
    sz = np.bincount(flat, weights=z, minlength=ncell)
    szz = np.bincount(flat, weights=z * z, minlength=ncell)
    si = np.bincount(flat, weights=inten, minlength=ncell)
    sdx = np.bincount(flat, weights=dx, minlength=ncell)
    sdy = np.bincount(flat, weights=dy, minlength=ncell)
    zmax = np.full(ncell, -np.inf)
    np.maximum.at(zmax, flat, z)

    occ = cnt > 0
    safe = np.where(occ, cnt, 1.0)
    mz = sz / safe
    var = np.maximum(szz / safe - mz * mz, 0.0)
    stats = np.zeros((ncell, N_STATS))
    stats[:, 0] = np.log1p(cnt)
    stats[:, 1] = mz
    stats[:, 2] = np.where(occ, zmax, 0.0)
    stats[:, 3] = si / safe
    stats[:, 4] = np.sqrt(var)
    stats[:, 5] = sdx / safe
    stats[:, 6] = sdy / safe
    stats[:, 7] = occ
    stats[~occ] = 0.0
    return stats.reshape(ny, nx, N_STATS)


@njit(cache=True)
def _rasterize_jit(points, x_min, y_min, cell, nx, ny):
    acc = np.zeros((ny, nx, 7))  # count, sz, szz, si, sdx, sdy, zmax
    for i in range(points.shape[0]):
        fx = math.floor((points[i, 0] - x_min) / cell)
        fy = math.floor((points[i, 1] - y_min) / cell)
        if fx < 0 or fx >= nx or fy < 0 or fy >= ny:
            continue
        ix = int(fx)
        iy = int(fy)
        z = points[i, 2]
        if acc[iy, ix, 0] == 0.0 or z > acc[iy, ix, 6]:
            acc[iy, ix, 6] = z
        acc[iy, ix, 0] += 1.0
        acc[iy, ix, 1] += z
        acc[iy, ix, 2] += z * z
        acc[iy, ix, 3] += points[i, 3]
        acc[iy, ix, 4] += abs(points[i, 0] - (x_min + (ix + 0.5) * cell))
        acc[iy, ix, 5] += abs(points[i, 1] - (y_min + (iy + 0.5) * cell))
    out = np.zeros((ny, nx, 8))
    for iy in range(ny):
        for ix in range(nx):
            n = acc[iy, ix, 0]
            if n == 0.0:
                continue
            mz = acc[iy, ix, 1] / n
            var = acc[iy, ix, 2] / n - mz * mz
            if var < 0.0:
                var = 0.0
            out[iy, ix, 0] = math.log1p(n)
            out[iy, ix, 1] = mz
            out[iy, ix, 2] = acc[iy, ix, 6]
            out[iy, ix, 3] = acc[iy, ix, 3] / n
            out[iy, ix, 4] = math.sqrt(var)
            out[iy, ix, 5] = acc[iy, ix, 4] / n
            out[iy, ix, 6] = acc[iy, ix, 5] / n
            out[iy, ix, 7] = 1.0
    return out


def rasterize_jit(points, x_min, y_min, cell, nx, ny):
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 4)
    return _rasterize_jit(points, float(x_min), float(y_min), float(cell), int(nx), int(ny))


# ---------------------------------------------------------------------------
# Point-in-rotated-rectangle (BEV) masks
# ---------------------------------------------------------------------------

def points_in_box_np(xy, box, margin=0.0):
    """Boolean mask of ``xy`` rows inside BEV rectangle ``box`` (cx, cy, l, w, yaw)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    c, s = math.cos(box[4]), math.sin(box[4])
    dx = xy[:, 0] - box[0]
    dy = xy[:, 1] - box[1]
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * box[2] + margin) & (np.abs(v) <= 0.5 * box[3] + margin)


@njit(cache=True)
def _points_in_box_jit(xy, box, margin):
    c, s = math.cos(box[4]), math.sin(box[4])
    hl = 0.5 * box[2] + margin
    hw = 0.5 * box[3] + margin
    out = np.zeros(xy.shape[0], dtype=np.bool_)
    for i in range(xy.shape[0]):
        dx = xy[i, 0] - box[0]
        dy = xy[i, 1] - box[1]
        u = dx * c + dy * s
        v = -dx * s + dy * c
        out[i] = abs(u) <= hl and abs(v) <= hw
    return out


def points_in_box_jit(xy, box, margin=0.0):
    xy = np.ascontiguousarray(xy, dtype=np.float64).reshape(-1, 2)
    return _points_in_box_jit(xy, np.asarray(box, dtype=np.float64), float(margin))


# ---------------------------------------------------------------------------
# sparse patch convolution: scatter occupied-cell contributions / gather grads
# ---------------------------------------------------------------------------
# ``out`` / ``pad`` are (H + 2r, W + 2r, C) with r = p // 2.  Occupied cell
# (iy, ix) feeds output (iy + 2r - dy, ix + 2r - dx) in padded coordinates.

def patch_scatter_np(z, iy, ix, out):
    p = z.shape[1]
    r = p // 2
    for dy in range(p):
        oy = iy + (2 * r - dy)
        for dx in range(p):
            out[oy, ix + (2 * r - dx)] += z[:, dy, dx]
    return out


@njit(cache=True)
def _patch_scatter_jit(z, iy, ix, out):
    n, p, _, c = z.shape
    r = p // 2
    for i in range(n):
        for dy in range(p):
            oy = iy[i] + 2 * r - dy
            for dx in range(p):
                ox = ix[i] + 2 * r - dx
                for k in range(c):
                    out[oy, ox, k] += z[i, dy, dx, k]
    return out


def patch_scatter_jit(z, iy, ix, out):
    return _patch_scatter_jit(np.ascontiguousarray(z), np.ascontiguousarray(iy, dtype=np.int64),
                              np.ascontiguousarray(ix, dtype=np.int64), out)


def patch_gather_np(pad, iy, ix, p):
    r = p // 2
    g = np.empty((iy.size, p, p, pad.shape[2]))
    for dy in range(p):
        oy = iy + (2 * r - dy)
        for dx in range(p):
            g[:, dy, dx] = pad[oy, ix + (2 * r - dx)]
    return g


@njit(cache=True)
def _patch_gather_jit(pad, iy, ix, p):
    n = iy.shape[0]
    c = pad.shape[2]
    r = p // 2
    g = np.empty((n, p, p, c))
    for i in range(n):
        for dy in range(p):
            oy = iy[i] + 2 * r - dy
            for dx in range(p):
                ox = ix[i] + 2 * r - dx
                for k in range(c):
                    g[i, dy, dx, k] = pad[oy, ox, k]
    return g


def patch_gather_jit(pad, iy, ix, p):
    return _patch_gather_jit(np.ascontiguousarray(pad), np.ascontiguousarray(iy, dtype=np.int64),
                             np.ascontiguousarray(ix, dtype=np.int64), int(p))


# ---------------------------------------------------------------------------
# box footprints on the BEV grid
# ---------------------------------------------------------------------------

def box_cells_np(boxes, x_min, y_min, cell, nx, ny):
    """(ny, nx) owning-box index per cell, -1 outside all boxes.

    A cell belongs to a box when its center lies inside the rotated
    rectangle; a cell inside several boxes goes to the nearest box center
    (first box on exact ties).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    owner = np.full((ny, nx), -1, dtype=np.int64)
    best = np.full((ny, nx), np.inf)
    for i in range(boxes.shape[0]):
        cx, cy, length, width, yaw = boxes[i]
        rad = 0.5 * math.hypot(length, width)
        ix0 = max(int(math.floor((cx - rad - x_min) / cell)), 0)
        ix1 = min(int(math.ceil((cx + rad - x_min) / cell)), nx)
        iy0 = max(int(math.floor((cy - rad - y_min) / cell)), 0)
        iy1 = min(int(math.ceil((cy + rad - y_min) / cell)), ny)
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        xs = x_min + (np.arange(ix0, ix1) + 0.5) * cell
        ys = y_min + (np.arange(iy0, iy1) + 0.5) * cell
        gx, gy = np.meshgrid(xs, ys)
        c, s = math.cos(yaw), math.sin(yaw)
        dx = gx - cx
        dy = gy - cy
        inside = (np.abs(dx * c + dy * s) <= 0.5 * length) & (np.abs(-dx * s + dy * c) <= 0.5 * width)
        d2 = dx * dx + dy * dy
        sub = (slice(iy0, iy1), slice(ix0, ix1))
        take = inside & (d2 < best[sub])
        best[sub] = np.where(take, d2, best[sub])
        owner[sub] = np.where(take, i, owner[sub])
    return owner


@njit(cache=True)
def _box_cells_jit(boxes, x_min, y_min, cell, nx, ny):
    owner = np.full((ny, nx), -1, dtype=np.int64)
    best = np.full((ny, nx), np.inf)
    for i in range(boxes.shape[0]):
        cx = boxes[i, 0]
        cy = boxes[i, 1]
        length = boxes[i, 2]
        width = boxes[i, 3]
        yaw = boxes[i, 4]
        rad = 0.5 * math.hypot(length, width)
        ix0 = max(int(math.floor((cx - rad - x_min) / cell)), 0)
        ix1 = min(int(math.ceil((cx + rad - x_min) / cell)), nx)
        iy0 = max(int(math.floor((cy - rad - y_min) / cell)), 0)
        iy1 = min(int(math.ceil((cy + rad - y_min) / cell)), ny)
        c, s = math.cos(yaw), math.sin(yaw)
        for iy in range(iy0, iy1):
            gy = y_min + (iy + 0.5) * cell
            for ix in range(ix0, ix1):
                gx = x_min + (ix + 0.5) * cell
                dx = gx - cx
                dy = gy - cy
                if abs(dx * c + dy * s) <= 0.5 * length and abs(-dx * s + dy * c) <= 0.5 * width:
                    d2 = dx * dx + dy * dy
                    if d2 < best[iy, ix]:
                        best[iy, ix] = d2
                        owner[iy, ix] = i
    return owner


def box_cells_jit(boxes, x_min, y_min, cell, nx, ny):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 5)
    return _box_cells_jit(boxes, float(x_min), float(y_min), float(cell), int(nx), int(ny))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_JIT:
    bev_iou_matrix = bev_iou_matrix_jit
    nms = nms_jit
    rasterize = rasterize_jit
    points_in_box = points_in_box_jit
    patch_scatter = patch_scatter_jit
    patch_gather = patch_gather_jit
    box_cells = box_cells_jit
else:
    bev_iou_matrix = bev_iou_matrix_np
    nms = nms_np
    rasterize = rasterize_np
    points_in_box = points_in_box_np
    patch_scatter = patch_scatter_np
    patch_gather = patch_gather_np
    box_cells = box_cells_np


def backend() -> str:
    return "numba" if USE_JIT else "numpy"
