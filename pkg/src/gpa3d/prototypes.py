"""Geometry-aware prototypes and the soft contrast loss.

The bank holds K foreground prototypes (one per offset-angle group) and one
background prototype in the last row.  ``contrast_loss`` evaluates

    L = att_fg + att_bg + beta1 * rep_adj + beta2 * rep_other + beta3 * rep_bg

with

    att_fg    = sum_j 1 - sim(f_j, g_{Q_j})
    att_bg    = sum_j 1 - sim(b_j, g_{K+1})
    rep_adj   = sum_j sum_{k in A_j}               max(0, sim(f_j, g_k) - m)
    rep_other = sum_j sum_{k not in A_j, k != Q_j} max(0, sim(f_j, g_k))
    rep_bg    = sum_j sum_{k <= K}                 max(0, sim(b_j, g_k))

and returns its gradient with respect to every feature row and prototype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import adjacency_matrix

NORM_FLOOR = 1e-12
REJITTER_NORM = 1e-8


class DegenerateVectorError(ValueError):
    pass


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DegenerateVectorError("degenerate vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarities, norms floored at ``NORM_FLOOR``."""
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_FLOOR)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), NORM_FLOOR)
    return (a / na) @ (b / nb).T


@dataclass
class PrototypeBank:
    vectors: np.ndarray  # (K + 1, C); last row is background
    margin: float = 0.5
    beta1: float = 5.0
    beta2: float = 1.0
    beta3: float = 5.0
    seed: int = 0
    _jitter_rng: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError("bank needs K >= 1 foreground rows plus a background row")
        if self._jitter_rng is None:
            self._jitter_rng = np.random.default_rng([self.seed, 7919])
        self.rejitter()

    @property
    def k(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]

    @property
    def background(self) -> np.ndarray:
        return self.vectors[-1]

    def rejitter(self) -> None:
        small = np.linalg.norm(self.vectors, axis=1) < REJITTER_NORM
        if small.any():
            c = self.channels
            self.vectors[small] = self._jitter_rng.normal(0.0, 1.0 / np.sqrt(c), (int(small.sum()), c))

    def copy(self) -> "PrototypeBank":
        rng = np.random.default_rng()
        rng.bit_generator.state = self._jitter_rng.bit_generator.state
        return PrototypeBank(self.vectors.copy(), self.margin, self.beta1, self.beta2, self.beta3, self.seed, rng)


def init_prototypes(k: int, channels: int, seed: int = 0, **kwargs) -> PrototypeBank:
    if k < 1 or channels < 1:
        raise ValueError("K and C must be >= 1")
    rng = np.random.default_rng(seed)
    vec = rng.normal(0.0, 1.0 / np.sqrt(channels), (k + 1, channels))
    return PrototypeBank(vec, seed=seed, **kwargs)


@dataclass
class ContrastBreakdown:
    l_att_fg: float = 0.0
    l_att_bg: float = 0.0
    l_rep_adj: float = 0.0
    l_rep_other: float = 0.0
    l_rep_bg: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"l_att_fg": self.l_att_fg, "l_att_bg": self.l_att_bg, "l_rep_adj": self.l_rep_adj,
                "l_rep_other": self.l_rep_other, "l_rep_bg": self.l_rep_bg, "total": self.total}


@dataclass
class ContrastResult:
    breakdown: ContrastBreakdown
    grad_fg: np.ndarray  # (M, C)
    grad_bg: np.ndarray  # (M_bg, C)
    grad_prototypes: np.ndarray  # (K + 1, C)


def _cosine_backward(a, b, s, coef):
    """Backprop ``sum(coef * s)`` where ``s = cosine_matrix(a, b)``.

    d sim / d a = b / (|a||b|) - sim * a / |a|^2   (and symmetrically for b)
    """
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_FLOOR)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), NORM_FLOOR)
    ah, bh = a / na, b / nb
    ga = (coef @ bh) / na - (coef * s).sum(axis=1, keepdims=True) * a / na ** 2
    gb = (coef.T @ ah) / nb - (coef * s).sum(axis=0)[:, None] * b / nb ** 2
    return ga, gb


def contrast_loss(fg: np.ndarray, fg_group: np.ndarray, bg: np.ndarray, bank: PrototypeBank,
                  soft: bool = True, reduction: str = "sum") -> ContrastResult:
    """Soft contrast loss over stacked foreground/background rows.

    ``soft=False`` is the plain variant: adjacent groups fall into the
    "other" set and are repelled with zero margin.  ``reduction="mean"``
    divides every term by its row count.
    """
    k = bank.k
    g = bank.vectors
    fg = np.asarray(fg, dtype=np.float64).reshape(-1, bank.channels)
    bg = np.asarray(bg, dtype=np.float64).reshape(-1, bank.channels)
    q = np.asarray(fg_group, dtype=np.int64).reshape(-1)
    if q.size and (q.min() < 1 or q.max() > k):
        raise ValueError(f"group indices must lie in [1, {k}]")

    gf = np.zeros_like(fg)
    gbg = np.zeros_like(bg)
    gg = np.zeros_like(g)
    out = ContrastBreakdown()
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    if fg.shape[0]:
        n = fg.shape[0]
        scale = 1.0 / n if reduction == "mean" else 1.0
        s = cosine_matrix(fg, g)  # (n, K+1)
        rows = np.arange(n)
        own = np.zeros((n, k + 1), dtype=bool)
        own[rows, q - 1] = True
        if soft:
            adj = np.zeros((n, k + 1), dtype=bool)
            adj[:, :k] = adjacency_matrix(k)[q - 1]
        else:
            adj = np.zeros((n, k + 1), dtype=bool)
        other = ~own & ~adj
        other[:, k] = False  # background prototype is not a foreground repel target

        hinge_adj = adj & (s - bank.margin > 0.0)
        hinge_other = other & (s > 0.0)
        out.l_att_fg = float((1.0 - s[own]).sum()) * scale
        out.l_rep_adj = float((s - bank.margin)[hinge_adj].sum()) * scale
        out.l_rep_other = float(s[hinge_other].sum()) * scale

        coef = (-1.0 * own + bank.beta1 * hinge_adj + bank.beta2 * hinge_other) * scale
        da, dg = _cosine_backward(fg, g, s, coef)
        gf += da
        gg += dg

    if bg.shape[0]:
        n = bg.shape[0]
        scale = 1.0 / n if reduction == "mean" else 1.0
        s = cosine_matrix(bg, g)
        hinge = np.zeros_like(s, dtype=bool)
        hinge[:, :k] = s[:, :k] > 0.0
        out.l_att_bg = float((1.0 - s[:, k]).sum()) * scale
        out.l_rep_bg = float(s[hinge].sum()) * scale
        coef = bank.beta3 * hinge.astype(np.float64)
        coef[:, k] = -1.0
        coef *= scale
        da, dg = _cosine_backward(bg, g, s, coef)
        gbg += da
        gg += dg

    out.total = (out.l_att_fg + out.l_att_bg + bank.beta1 * out.l_rep_adj
                 + bank.beta2 * out.l_rep_other + bank.beta3 * out.l_rep_bg)
    return ContrastResult(out, gf, gbg, gg)


def sgd_step(bank: PrototypeBank, grad: np.ndarray, lr: float) -> PrototypeBank:
    if lr <= 0:
        raise ValueError("lr must be > 0")
    new = bank.copy()
    new.vectors = new.vectors - lr * np.asarray(grad, dtype=np.float64)
    new.rejitter()
    return new
