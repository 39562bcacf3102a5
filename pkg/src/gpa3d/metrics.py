"""Detection AP (40 recall positions), Closed Gap, and feature-space diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3D, bev_iou_matrix

N_RECALL = 40


@dataclass
class EvalResult:
    ap: float | None  # percent; None when there is no ground truth
    iou_threshold: float
    precision: np.ndarray  # running precision over score-sorted detections
    recall: np.ndarray
    interp_precision: np.ndarray  # at recalls 1/40 .. 40/40
    n_tp: int
    n_fp: int
    n_gt: int

    @property
    def n_missed(self) -> int:
        return self.n_gt - self.n_tp


def match_detections(dets: Sequence[Sequence[Box3D]], gts: Sequence[Sequence[Box3D]],
                     iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy score-descending matching across scenes.

    Returns (scores, is_tp) for every detection in global descending-score
    order.  A detection claims the unmatched GT of its scene with the largest
    IoU, provided that IoU reaches the threshold.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth must cover the same scenes")
    entries = []  # (-score, scene, det index)
    ious = []
    for s, (d, g) in enumerate(zip(dets, gts)):
        ious.append(bev_iou_matrix(list(d), list(g)))
        for j, b in enumerate(d):
            entries.append((-(b.score if b.score is not None else 0.0), s, j))
    entries.sort()
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    scores = np.empty(len(entries))
    is_tp = np.zeros(len(entries), dtype=bool)
    for n, (neg, s, j) in enumerate(entries):
        scores[n] = -neg
        if len(gts[s]) == 0:
            continue
        cand = np.where(taken[s], -1.0, ious[s][j])
        best = int(np.argmax(cand))
        if cand[best] >= iou_threshold:
            taken[s][best] = True
            is_tp[n] = True
    return scores, is_tp


def ap_r40(dets: Sequence[Sequence[Box3D]], gts: Sequence[Sequence[Box3D]], iou_threshold: float = 0.5) -> EvalResult:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    n_gt = sum(len(g) for g in gts)
    _, is_tp = match_detections(dets, gts, iou_threshold)
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    levels = np.arange(1, N_RECALL + 1) / N_RECALL
    if n_gt == 0:
        return EvalResult(None, iou_threshold, np.zeros(0), np.zeros(0), np.zeros(N_RECALL), 0, int(len(is_tp)), 0)
    if is_tp.size == 0:
        return EvalResult(0.0, iou_threshold, np.zeros(0), np.zeros(0), np.zeros(N_RECALL), 0, 0, n_gt)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros(N_RECALL)
    for i, r in enumerate(levels):
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < recall.size:
            interp[i] = env[idx]
    return EvalResult(float(100.0 * interp.mean()), iou_threshold, precision, recall, interp,
                      int(tp[-1]), int(fp[-1]), n_gt)


def closed_gap(ap_model: float, ap_source: float, ap_oracle: float) -> float:
    denom = ap_oracle - ap_source
    if denom == 0:
        raise ZeroDivisionError("closed gap undefined: oracle AP equals source-only AP")
    return (ap_model - ap_source) / denom * 100.0


# ---------------------------------------------------------------------------
# 2-D projection (PCA; a deterministic stand-in for t-SNE plots)
# ---------------------------------------------------------------------------

@dataclass
class Projection2D:
    coords: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, C)
    eigenvalues: np.ndarray  # (2,)
    explained_variance: float  # fraction of total variance in the two components
    method: str = "pca"


def _sign_fix(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def project_2d(features: np.ndarray, tol: float = 1e-8, max_iter: int = 100000) -> Projection2D:
    """Top-2 principal directions by subspace (block power) iteration."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two feature rows")
    n, c = x.shape
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / n
    total = float(np.trace(cov))
    if total <= 1e-300:
        return Projection2D(np.zeros((n, 2)), np.zeros((2, c)), np.zeros(2), 0.0)
    k = min(2, c)
    # deterministic start: leading columns of the covariance itself plus a fixed tilt
    start = cov[:, np.argsort(-np.diag(cov), kind="stable")[:k]] + 1e-3 * np.arange(1, c + 1)[:, None]
    q, _ = np.linalg.qr(start)
    for _ in range(max_iter):
        z = cov @ q
        q_new, _ = np.linalg.qr(z)
        # subspace change measured by the projector difference
        if np.abs(q_new @ q_new.T - q @ q.T).max() < tol:
            q = q_new
            break
        q = q_new
    # Rayleigh-Ritz inside the converged subspace
    small = q.T @ cov @ q
    w, v = np.linalg.eigh(small)
    order = np.argsort(-w)
    w, v = w[order], v[:, order]
    comps = (q @ v).T
    comps = np.array([_sign_fix(r) for r in comps])
    lam = np.clip(w, 0.0, None)
    if k < 2:
        comps = np.vstack([comps, np.zeros((1, c))])
        lam = np.concatenate([lam, [0.0]])
    coords = xc @ comps.T
    return Projection2D(coords, comps, lam, float(lam.sum() / total))


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------

def cosine_distance_matrix(x: np.ndarray) -> np.ndarray:
    n = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    xh = x / n
    return np.clip(1.0 - xh @ xh.T, 0.0, 2.0)


def silhouette(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette with cosine distance; a singleton cluster has a(i) = 0."""
    x = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels).reshape(-1)
    uniq, inv = np.unique(lab, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two groups")
    d = cosine_distance_matrix(x)
    onehot = np.zeros((lab.size, uniq.size))
    onehot[np.arange(lab.size), inv] = 1.0
    counts = onehot.sum(axis=0)
    sums = d @ onehot  # (n, G) summed distance to each cluster
    own = counts[inv]
    a = np.where(own > 1, sums[np.arange(lab.size), inv] / np.maximum(own - 1, 1), 0.0)
    mean_to = sums / counts
    mean_to[np.arange(lab.size), inv] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())
