"""Synthetic LiDAR-like domains with controlled object-size and beam-count shifts."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box3D, Scene, bev_iou_matrix, boxes_to_array, points_in_box

# base car statistics: (mean, sigma) in meters, clamped to +-3 sigma
BASE_LENGTH = (4.7, 0.3)
BASE_WIDTH = (1.9, 0.1)
BASE_HEIGHT = (1.7, 0.1)

SENSOR_HEIGHT = 1.73  # ground plane sits at z = -SENSOR_HEIGHT
ELEVATION_RANGE = (math.radians(-24.8), math.radians(2.0))
HOOD_START = 0.2  # fraction of l ahead of the center where the hood begins
HOOD_HEIGHT = 0.6  # hood top as a fraction of h


@dataclass(frozen=True)
class DomainSpec:
    seed: int = 0
    n_scenes: int = 200
    objects_per_scene: tuple[int, int] = (4, 10)
    size_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (length, width, height)
    beam_count: int = 64
    points_per_object_base: int = 200
    dropout_vs_range: float = 0.03
    noise_sigma: float = 0.03
    range_limits: tuple[float, float, float, float] = (-25.6, 25.6, -25.6, 25.6)
    ground_points: int = 1200
    clutter_per_scene: tuple[int, int] = (2, 6)
    points_per_clutter: int = 40
    min_range: float = 4.0
    yaw_sigma: float = 0.08
    name: str = "custom"

    def validate(self) -> None:
        x0, x1, y0, y1 = self.range_limits
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"empty range_limits {self.range_limits}")
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if min(self.size_scale) <= 0:
            raise ValueError("size_scale factors must be > 0")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene {self.objects_per_scene}")
        if self.points_per_object_base < 1:
            raise ValueError("points_per_object_base must be >= 1")
        # the placement region shrinks by a car half-length on every side
        if (x1 - x0) < 12.0 or (y1 - y0) < 12.0:
            raise ValueError(f"range_limits {self.range_limits} too small to place objects")


_WAYMO = DomainSpec(name="waymo_like")

PRESETS = {
    "waymo_like": _WAYMO,
    "kitti_like": replace(_WAYMO, size_scale=(0.88, 0.90, 0.95), name="kitti_like"),
    "nuscenes_like": replace(_WAYMO, beam_count=32,
                             points_per_object_base=_WAYMO.points_per_object_base // 2,
                             name="nuscenes_like"),
}


def preset(name: str, **overrides) -> DomainSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    return replace(PRESETS[name], **overrides)


def object_point_count(spec: DomainSpec, rng_range: float) -> int:
    n = spec.points_per_object_base * math.exp(-spec.dropout_vs_range * rng_range) * (spec.beam_count / 64.0)
    return max(1, int(round(n)))


def _ring_elevations(beams: int) -> np.ndarray:
    lo, hi = ELEVATION_RANGE
    if beams == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, beams)


def _snap_to_rings(z_rel: np.ndarray, rho: np.ndarray, rings: np.ndarray) -> np.ndarray:
    """Move heights (relative to the sensor) onto the nearest scan ring at their range."""
    elev = np.arctan2(z_rel, rho)
    idx = np.abs(elev[:, None] - rings[None, :]).argmin(axis=1)
    return rho * np.tan(rings[idx])


def _clipped_noise(rng, sigma, shape):
    if sigma <= 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, sigma, shape), -3 * sigma, 3 * sigma)


def _ball_noise(rng, sigma, n):
    """Gaussian jitter with the vector length clipped to 3 sigma, so it stays within 3 sigma along any axis."""
    if sigma <= 0:
        return np.zeros((n, 3))
    e = rng.normal(0.0, sigma, (n, 3))
    norm = np.linalg.norm(e, axis=1, keepdims=True)
    return e * np.minimum(1.0, 3 * sigma / np.maximum(norm, 1e-300))


def sample_car_surface(box: Box3D, n: int, rng, rings: np.ndarray, noise_sigma: float) -> np.ndarray:
    """Points on the (at most two) box faces that face the sensor."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # sensor position in the box frame
    su = -box.cx * c - box.cy * s
    sv = box.cx * s - box.cy * c
    hl, hw = 0.5 * box.l, 0.5 * box.w
    faces = []  # (axis, sign, extent, weight)
    dist = math.hypot(su, sv)
    if su > hl:
        faces.append((0, 1.0, box.w, box.w * max(0.2, su / dist)))
    elif su < -hl:
        faces.append((0, -1.0, box.w, box.w * max(0.2, -su / dist)))
    if sv > hw:
        faces.append((1, 1.0, box.l, box.l * max(0.2, sv / dist)))
    elif sv < -hw:
        faces.append((1, -1.0, box.l, box.l * max(0.2, -sv / dist)))
    if not faces:  # sensor inside the footprint; never produced by the generator
        faces.append((0, 1.0, box.w, 1.0))
    weights = np.array([f[3] for f in faces])
    face_of = rng.choice(len(faces), size=n, p=weights / weights.sum())

    uvz = np.zeros((n, 3))
    for k, (axis, sign, extent, _) in enumerate(faces):
        sel = face_of == k
        m = int(sel.sum())
        if m == 0:
            continue
        t = rng.uniform(-0.5 * extent, 0.5 * extent, m)
        if axis == 0:
            uvz[sel, 0] = sign * hl
            uvz[sel, 1] = t
        else:
            uvz[sel, 0] = t
            uvz[sel, 1] = sign * hw
    top = np.where(uvz[:, 0] > HOOD_START * box.l, HOOD_HEIGHT * box.h, box.h)
    bottom = box.cz - 0.5 * box.h
    z = bottom + rng.uniform(0.0, 1.0, n) * top

    x = box.cx + uvz[:, 0] * c - uvz[:, 1] * s
    y = box.cy + uvz[:, 0] * s + uvz[:, 1] * c
    rho = np.hypot(x, y)
    z = _snap_to_rings(z, rho, rings)
    z = np.clip(z, bottom, bottom + top)

    pts = np.stack([x, y, z], axis=1) + _ball_noise(rng, noise_sigma, n)
    inten = rng.uniform(0.2, 0.8, n)
    return np.column_stack([pts, inten])


def _draw_size(rng, scale) -> tuple[float, float, float]:
    def clamped(mean, sd):
        return float(np.clip(rng.normal(mean, sd), mean - 3 * sd, mean + 3 * sd))

    length = clamped(*BASE_LENGTH) * scale[0]
    width = clamped(*BASE_WIDTH) * scale[1]
    height = clamped(*BASE_HEIGHT) * scale[2]
    return length, width, height


def _place_boxes(spec: DomainSpec, rng) -> list[Box3D]:
    x0, x1, y0, y1 = spec.range_limits
    margin = 3.0
    lo, hi = spec.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    boxes: list[Box3D] = []
    tries = 0
    while len(boxes) < n_obj and tries < 50 * max(n_obj, 1):
        tries += 1
        cx = rng.uniform(x0 + margin, x1 - margin)
        cy = rng.uniform(y0 + margin, y1 - margin)
        if math.hypot(cx, cy) < spec.min_range:
            continue
        length, width, height = _draw_size(rng, spec.size_scale)
        yaw = (math.pi / 2) * int(rng.integers(0, 2)) + rng.normal(0.0, spec.yaw_sigma)
        cand = Box3D(cx, cy, -SENSOR_HEIGHT + 0.5 * height, height, width, length, yaw)
        if boxes:
            padded = np.array([[cand.cx, cand.cy, cand.l + 1.0, cand.w + 1.0, cand.yaw]])
            if bev_iou_matrix(padded, boxes_to_array(boxes)).max() > 0.0:
                continue
        boxes.append(cand)
    return boxes


def _ground_points(spec: DomainSpec, rng, rings: np.ndarray) -> np.ndarray:
    x0, x1, y0, y1 = spec.range_limits
    down = rings[rings < -1e-3]
    if down.size == 0 or spec.ground_points <= 0:
        return np.zeros((0, 4))
    radii = SENSOR_HEIGHT / np.tan(-down)
    r_max = math.hypot(max(abs(x0), abs(x1)), max(abs(y0), abs(y1)))
    radii = radii[radii < r_max]
    if radii.size == 0:
        return np.zeros((0, 4))
    n = max(1, int(round(spec.ground_points * spec.beam_count / 64.0)))
    ring = rng.integers(0, radii.size, n)
    az = rng.uniform(-math.pi, math.pi, n)
    rho = radii[ring] + rng.normal(0.0, 0.05, n)
    x, y = rho * np.cos(az), rho * np.sin(az)
    z = np.full(n, -SENSOR_HEIGHT) + _clipped_noise(rng, spec.noise_sigma, n)
    pts = np.column_stack([x, y, z, rng.uniform(0.0, 0.2, n)])
    keep = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    return pts[keep]


def _clutter_points(spec: DomainSpec, rng, boxes: list[Box3D]) -> np.ndarray:
    """Poles and bushes: small vertical clusters acting as hard negatives."""
    x0, x1, y0, y1 = spec.range_limits
    lo, hi = spec.clutter_per_scene
    n_cl = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(n_cl):
        for _attempt in range(20):
            cx, cy = rng.uniform(x0 + 1, x1 - 1), rng.uniform(y0 + 1, y1 - 1)
            if math.hypot(cx, cy) < spec.min_range:
                continue
            probe = Box3D(cx, cy, 0.0, 1.0, 3.0, 3.0, 0.0)
            if boxes and bev_iou_matrix([probe], boxes).max() > 0:
                continue
            break
        else:
            continue
        radius = rng.uniform(0.15, 0.8)
        height = rng.uniform(0.5, 3.0)
        m = max(1, int(round(spec.points_per_clutter * math.exp(-spec.dropout_vs_range * math.hypot(cx, cy))
                            * spec.beam_count / 64.0)))
        ang = rng.uniform(-math.pi, math.pi, m)
        rr = radius * np.sqrt(rng.uniform(0, 1, m))
        z = -SENSOR_HEIGHT + rng.uniform(0, height, m)
        out.append(np.column_stack([cx + rr * np.cos(ang), cy + rr * np.sin(ang), z, rng.uniform(0.1, 0.7, m)]))
    if not out:
        return np.zeros((0, 4))
    return np.concatenate(out)


def generate_scene(spec: DomainSpec, index: int, domain: str = "source") -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    rings = _ring_elevations(spec.beam_count)
    boxes = _place_boxes(spec, rng)

    parts = []
    ground = _ground_points(spec, rng, rings)
    if boxes and ground.shape[0]:
        occluded = np.zeros(ground.shape[0], dtype=bool)
        for b in boxes:
            occluded |= points_in_box(ground, b, margin=0.1, use_z=False)
        ground = ground[~occluded]
    parts.append(ground)
    parts.append(_clutter_points(spec, rng, boxes))
    for b in boxes:
        n = object_point_count(spec, math.hypot(b.cx, b.cy))
        parts.append(sample_car_surface(b, n, rng, rings, spec.noise_sigma))
    points = np.concatenate(parts) if parts else np.zeros((0, 4))
    x0, x1, y0, y1 = spec.range_limits
    inside = (points[:, 0] >= x0) & (points[:, 0] < x1) & (points[:, 1] >= y0) & (points[:, 1] < y1)
    return Scene(f"{spec.name}-{spec.seed}-{index:05d}", points[inside], boxes, domain)


def generate_domain(spec: DomainSpec, domain: str = "source", workers: int = 1) -> list[Scene]:
    spec.validate()
    idx = range(spec.n_scenes)
    if workers <= 1:
        return [generate_scene(spec, i, domain) for i in idx]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_scene(spec, i, domain), idx))
