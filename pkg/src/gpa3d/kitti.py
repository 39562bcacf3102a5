"""KITTI ``label_2`` parsing and camera-to-sensor box conversion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, group_index, wrap_pi


class KittiFormatError(ValueError):
    def __init__(self, lineno: int, msg: str, source: str | None = None):
        where = f"{source}: line {lineno}" if source else f"line {lineno}"
        super().__init__(f"{where}: {msg}")
        self.lineno = lineno
        self.msg = msg


@dataclass(frozen=True)
class KittiLabelLine:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dims: tuple[float, float, float]  # h, w, l
    loc: tuple[float, float, float]  # camera frame x, y, z
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.type == "DontCare"

    @property
    def h(self) -> float:
        return self.dims[0]

    @property
    def w(self) -> float:
        return self.dims[1]

    @property
    def l(self) -> float:
        return self.dims[2]


def _parse_line(line: str, lineno: int) -> KittiLabelLine:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise KittiFormatError(lineno, f"expected 15 fields (16 with score), got {len(fields)}")
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise KittiFormatError(lineno, f"non-numeric field ({exc})") from None
    occluded = nums[1]
    if occluded != int(occluded):
        raise KittiFormatError(lineno, f"occluded must be an integer, got {fields[2]}")
    rec = KittiLabelLine(
        type=fields[0],
        truncated=nums[0],
        occluded=int(occluded),
        alpha=nums[2],
        bbox2d=tuple(nums[3:7]),
        dims=tuple(nums[7:10]),
        loc=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )
    if not rec.dont_care and min(rec.dims) <= 0:
        raise KittiFormatError(lineno, f"non-positive dimensions {rec.dims}")
    return rec


def parse_labels(text: str) -> list[KittiLabelLine]:
    """Parse every non-blank line; DontCare rows are kept (see ``dont_care``)."""
    return [_parse_line(line, i) for i, line in enumerate(text.splitlines(), 1) if line.strip()]


def serialize_labels(labels: Iterable[KittiLabelLine]) -> str:
    rows = []
    for r in labels:
        vals = [r.truncated, r.occluded, r.alpha, *r.bbox2d, *r.dims, *r.loc, r.rotation_y]
        parts = [r.type, f"{vals[0]:.2f}", str(int(vals[1]))] + [f"{v:.2f}" for v in vals[2:]]
        if r.score is not None:
            parts.append(f"{r.score:.2f}")
        rows.append(" ".join(parts))
    return "\n".join(rows) + ("\n" if rows else "")


def to_box3d(label: KittiLabelLine) -> Box3D:
    """Camera frame (x right, y down, z forward; loc = bottom center) to sensor frame."""
    if label.dont_care:
        raise ValueError("DontCare rows carry no box")
    h, w, l = label.dims
    x, y, z = label.loc
    return Box3D(cx=z, cy=-x, cz=-y + 0.5 * h, h=h, w=w, l=l,
                 yaw=wrap_pi(-label.rotation_y - 0.5 * math.pi), score=label.score)


def from_box3d(box: Box3D, type_: str = "Car") -> KittiLabelLine:
    loc = (-box.cy, -(box.cz - 0.5 * box.h), box.cx)
    ry = wrap_pi(-box.yaw - 0.5 * math.pi)
    alpha = wrap_pi(ry - math.atan2(loc[0], loc[2]))
    return KittiLabelLine(type_, 0.0, 0, alpha, (0.0, 0.0, 0.0, 0.0), (box.h, box.w, box.l), loc, ry, box.score)


def group_histogram(boxes: Sequence[Box3D], k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    counts = np.zeros(k, dtype=np.int64)
    for b in boxes:
        counts[group_index(b, k) - 1] += 1
    return counts


def load_label_dir(path) -> list[Box3D]:
    """All non-DontCare boxes from ``*.txt`` files in a directory, in sorted file order."""
    boxes = []
    for f in sorted(Path(path).glob("*.txt")):
        try:
            recs = parse_labels(f.read_text())
        except KittiFormatError as exc:
            raise KittiFormatError(exc.lineno, exc.msg, source=f.name) from None
        boxes.extend(to_box3d(r) for r in recs if not r.dont_care)
    return boxes
