"""Instance replacement augmentation over a group-bucketed pseudo-label database."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3D, Scene, from_local, group_index, points_in_box, to_local

log = logging.getLogger(__name__)

HIGH_QUALITY = 0.5


@dataclass(frozen=True)
class IraEntry:
    box: Box3D
    points: np.ndarray  # (n, 4) box-local frame
    scene_id: str
    group: int


@dataclass
class IraDatabase:
    k: int
    buckets: dict[int, list[IraEntry]] = field(default_factory=dict)
    skipped_empty: int = 0

    def __len__(self) -> int:
        return sum(len(v) for v in self.buckets.values())

    def sizes(self) -> dict[int, int]:
        return {q: len(self.buckets.get(q, [])) for q in range(1, self.k + 1)}

    def add(self, entry: IraEntry) -> None:
        self.buckets.setdefault(entry.group, []).append(entry)

    def all_entries(self) -> list[IraEntry]:
        return [e for q in sorted(self.buckets) for e in self.buckets[q]]


@dataclass(frozen=True)
class IraConfig:
    p_replace: float = 0.25
    band: tuple[float, float] = (0.2, 0.5)
    group_matched: bool = True  # False = replace with any database instance

    def __post_init__(self):
        lo, hi = self.band
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"uncertain band {self.band} must lie within [0, 1]")
        if not 0.0 <= self.p_replace <= 1.0:
            raise ValueError("p_replace must lie in [0, 1]")


def build_database(pseudo_labels: Mapping[str, Sequence[Box3D]], scenes: Sequence[Scene], k: int,
                   min_score: float = HIGH_QUALITY) -> IraDatabase:
    """Crop the points of every pseudo-label scoring above ``min_score`` into its group bucket."""
    db = IraDatabase(k)
    for sc in scenes:
        for b in pseudo_labels.get(sc.id, ()):
            if b.score is None or b.score <= min_score:
                continue
            inside = points_in_box(sc.points, b)
            if not inside.any():
                db.skipped_empty += 1
                continue
            db.add(IraEntry(b, to_local(sc.points[inside], b), sc.id, group_index(b, k)))
    if db.skipped_empty:
        log.warning("IRA database: skipped %d high-score boxes containing no points", db.skipped_empty)
    return db


def replace_instances(scene: Scene, labels: Sequence[Box3D], db: IraDatabase, cfg: IraConfig,
                      rng: np.random.Generator) -> tuple[Scene, list[int]]:
    """Swap uncertain labels for database instances of the same group, in place.

    Returns the augmented scene (its ``boxes`` are the updated labels) and
    the indices of the labels that were replaced.
    """
    lo, hi = cfg.band
    labels = list(labels)
    points = scene.points
    pool = db.all_entries() if not cfg.group_matched else None
    replaced = []
    removed = np.zeros(points.shape[0], dtype=bool)
    inserted = []
    for i, b in enumerate(labels):
        if b.score is None or not (lo <= b.score <= hi):
            continue
        if rng.random() >= cfg.p_replace:
            continue
        candidates = pool if pool is not None else db.buckets.get(group_index(b, db.k), [])
        if not candidates:
            continue
        donor = candidates[int(rng.integers(len(candidates)))]
        placed = replace(b, h=donor.box.h, w=donor.box.w, l=donor.box.l, score=donor.box.score)
        removed |= points_in_box(points, b)
        inserted.append(from_local(donor.points, placed))
        labels[i] = placed
        replaced.append(i)
    if not replaced:
        return Scene(scene.id, points, labels, scene.domain), replaced
    new_points = np.concatenate([points[~removed]] + inserted)
    return Scene(scene.id, new_points, labels, scene.domain), replaced


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_database(path, db: IraDatabase) -> None:
    with open(path, "w") as fh:
        for e in db.all_entries():
            rec = {"group": e.group, "box": e.box.to_dict(), "scene_id": e.scene_id,
                   "points": [[float(v) for v in p] for p in e.points]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_database(path, k: int) -> IraDatabase:
    db = IraDatabase(k)
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 4)
            db.add(IraEntry(Box3D.from_dict(rec["box"]), pts, rec["scene_id"], int(rec["group"])))
    return db
