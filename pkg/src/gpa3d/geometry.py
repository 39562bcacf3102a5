"""Boxes, scenes and the geometric grouping of objects by viewing angle.

Frame convention: sensor at the origin, x forward, y left, z up.  A box's
``l`` runs along its heading ``yaw``, ``w`` across it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    pass


def norm_angle(theta):
    """Wrap into the half-open interval [0, 2*pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod(-tiny, 2pi) rounds up to exactly 2pi
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


def wrap_pi(theta):
    """Wrap into [-pi, pi)."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.mod(theta + math.pi, TWO_PI)
    out = np.where(out >= TWO_PI, 0.0, out) - math.pi
    # values already in range pass through untouched (the shift above costs an ulp)
    out = np.where((theta >= -math.pi) & (theta < math.pi), theta, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    h: float
    w: float
    l: float
    yaw: float
    score: float | None = None

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise GeometryError(f"box dimensions must be positive, got h={self.h} w={self.w} l={self.l}")

    @property
    def bev(self) -> tuple[float, float, float, float, float]:
        """(cx, cy, l, w, yaw) rectangle used by the IoU / point kernels."""
        return (self.cx, self.cy, self.l, self.w, self.yaw)

    def with_score(self, score: float | None) -> "Box3D":
        return replace(self, score=score)

    def to_dict(self) -> dict:
        d = {"cx": self.cx, "cy": self.cy, "cz": self.cz, "h": self.h, "w": self.w,
             "l": self.l, "yaw": wrap_pi(self.yaw)}
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(float(d["cx"]), float(d["cy"]), float(d["cz"]), float(d["h"]), float(d["w"]),
                   float(d["l"]), float(d["yaw"]), None if d.get("score") is None else float(d["score"]))


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    """Stack boxes into a (n, 5) BEV array."""
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.array([b.bev for b in boxes], dtype=np.float64)


@dataclass
class Scene:
    id: str
    points: np.ndarray  # (n, 4): x, y, z, intensity
    boxes: list[Box3D] = field(default_factory=list)
    domain: str = "source"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if self.domain not in ("source", "target"):
            raise GeometryError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def with_boxes(self, boxes: Sequence[Box3D]) -> "Scene":
        return Scene(self.id, self.points, list(boxes), self.domain)

    def to_dict(self) -> dict:
        return {"id": self.id, "domain": self.domain,
                "points": [[float(v) for v in p] for p in self.points],
                "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        pts = np.asarray(d.get("points", []), dtype=np.float64).reshape(-1, 4)
        return cls(str(d["id"]), pts, [Box3D.from_dict(b) for b in d.get("boxes", [])],
                   d.get("domain", "source"))


@dataclass(frozen=True)
class GroupAssignment:
    box_index: int
    offset_angle: float
    group: int


# ---------------------------------------------------------------------------
# angles and groups
# ---------------------------------------------------------------------------

def observation_angle(box: Box3D) -> float:
    if box.cx == 0.0 and box.cy == 0.0:
        raise GeometryError("observation angle undefined at sensor origin")
    return math.atan2(box.cy, box.cx)


def offset_angle(box: Box3D) -> float:
    return norm_angle(observation_angle(box) - box.yaw)


def group_from_offset(offset, k: int):
    """Bucket offset angles in [0, 2pi) into 1-based groups of width 2pi/k."""
    if k < 1:
        raise GeometryError(f"K must be >= 1, got {k}")
    q = np.floor(np.asarray(offset, dtype=np.float64) / (TWO_PI / k)).astype(np.int64) + 1
    # rounding in the division can land an offset just below 2pi on k+1
    q = np.clip(q, 1, k)
    return int(q) if np.ndim(q) == 0 else q


def group_index(box: Box3D, k: int) -> int:
    return group_from_offset(offset_angle(box), k)


def assign_groups(boxes: Sequence[Box3D], k: int) -> list[GroupAssignment]:
    out = []
    for i, b in enumerate(boxes):
        off = offset_angle(b)
        out.append(GroupAssignment(i, off, group_from_offset(off, k)))
    return out


def adjacent_groups(q: int, k: int) -> set[int]:
    """Groups bordering ``q`` on the (cyclic) offset-angle circle."""
    if not 1 <= q <= k:
        raise GeometryError(f"group {q} outside [1, {k}]")
    if k == 1:
        return set()
    return {(q - 2) % k + 1, q % k + 1} - {q}


def adjacency_matrix(k: int) -> np.ndarray:
    """(k, k) boolean, ``A[q-1, p-1]`` true when p is adjacent to q."""
    a = np.zeros((k, k), dtype=bool)
    for q in range(1, k + 1):
        for p in adjacent_groups(q, k):
            a[q - 1, p - 1] = True
    return a


# ---------------------------------------------------------------------------
# BEV overlap
# ---------------------------------------------------------------------------

def bev_iou(a: Box3D, b: Box3D) -> float:
    return float(_kernels.bev_iou_matrix(np.array([a.bev]), np.array([b.bev]))[0, 0])


def bev_iou_matrix(a: Sequence[Box3D] | np.ndarray, b: Sequence[Box3D] | np.ndarray) -> np.ndarray:
    aa = a if isinstance(a, np.ndarray) else boxes_to_array(a)
    bb = b if isinstance(b, np.ndarray) else boxes_to_array(b)
    if len(aa) == 0 or len(bb) == 0:
        return np.zeros((len(aa), len(bb)))
    return _kernels.bev_iou_matrix(aa, bb)


def box_corners_bev(box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def points_in_box(points: np.ndarray, box: Box3D, margin: float = 0.0, use_z: bool = True) -> np.ndarray:
    """Mask of points inside the box (BEV rectangle, plus height slab when ``use_z``)."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    mask = _kernels.points_in_box(points[:, :2], np.array(box.bev), margin)
    if use_z:
        mask &= np.abs(points[:, 2] - box.cz) <= 0.5 * box.h + margin
    return mask


def to_local(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express points in the box frame: center at the origin, heading along +x."""
    out = np.array(points, dtype=np.float64, copy=True)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = out[:, 0] - box.cx, out[:, 1] - box.cy
    out[:, 0] = dx * c + dy * s
    out[:, 1] = -dx * s + dy * c
    out[:, 2] = out[:, 2] - box.cz
    return out


def from_local(points: np.ndarray, box: Box3D) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u, v = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = box.cx + u * c - v * s
    out[:, 1] = box.cy + u * s + v * c
    out[:, 2] = out[:, 2] + box.cz
    return out


def rotate_scene_frame(box: Box3D, phi: float) -> Box3D:
    """Rigidly rotate a box about the sensor's z axis."""
    c, s = math.cos(phi), math.sin(phi)
    return replace(box, cx=box.cx * c - box.cy * s, cy=box.cx * s + box.cy * c, yaw=box.yaw + phi)


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------

def write_scenes(path, scenes: Iterable[Scene]) -> None:
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(json.dumps(sc.to_dict(), separators=(",", ":")))
            fh.write("\n")


def iter_scenes(path) -> Iterator[Scene]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield Scene.from_dict(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise GeometryError(f"{path}:{lineno}: bad scene record ({exc})") from exc


def read_scenes(path) -> list[Scene]:
    return list(iter_scenes(path))
