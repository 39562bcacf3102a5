"""Detector parameters (encoder + head), checkpoints and pseudo-label generation."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import BevFeatureMap, BevGrid, EncoderParams, encode, rasterize
from .geometry import Box3D, Scene
from .head import N_REG, Detection, HeadOutput, HeadParams, decode, head_forward
from .ira import HIGH_QUALITY, IraDatabase, build_database
from .prototypes import PrototypeBank

MAGIC = b"GPA3"
CKPT_VERSION = 1
PSEUDO_LABEL_THRESHOLD = 0.2


@dataclass
class DetectorParams:
    encoder: EncoderParams
    head: HeadParams

    @classmethod
    def init(cls, channels: int = 16, patch: int = 1, seed: int = 0, cls_prior: float = 0.5) -> "DetectorParams":
        return cls(EncoderParams.init(channels, patch, seed=seed),
                   HeadParams.init(channels, seed=seed + 1, cls_prior=cls_prior))

    def arrays(self) -> list[np.ndarray]:
        """Views in checkpoint order; the scalar cls bias travels as a length-1 array."""
        e = self.encoder
        return [e.weight, e.bias, e.input_shift, e.input_scale, self.head.cls_weight,
                np.array([self.head.cls_bias]), self.head.reg_weight, self.head.reg_bias]

    def copy(self) -> "DetectorParams":
        e, h = self.encoder, self.head
        return DetectorParams(EncoderParams(e.weight.copy(), e.bias.copy(), e.patch, e.input_shift.copy(),
                                            e.input_scale.copy()),
                              HeadParams(h.cls_weight.copy(), float(h.cls_bias), h.reg_weight.copy(),
                                         h.reg_bias.copy()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()[:16]


def forward(scene: Scene, params: DetectorParams, grid: BevGrid,
            stats: np.ndarray | None = None) -> tuple[BevFeatureMap, HeadOutput]:
    raw = rasterize(scene, grid) if stats is None else stats
    fmap = encode(raw, params.encoder, grid)
    return fmap, head_forward(fmap, params.head)


def detect(scene: Scene, params: DetectorParams, grid: BevGrid, score_threshold: float = 0.1,
           nms_iou: float = 0.3, max_candidates: int | None = None) -> list[Detection]:
    _, out = forward(scene, params, grid)
    return decode(out, grid, score_threshold, nms_iou, max_candidates)


def generate_pseudo_labels(params: DetectorParams, scenes: Sequence[Scene], grid: BevGrid, k: int,
                           threshold: float = PSEUDO_LABEL_THRESHOLD, nms_iou: float = 0.3,
                           max_candidates: int | None = None) -> tuple[dict[str, list[Box3D]], IraDatabase]:
    """Detections at or above ``threshold`` per scene, plus the >0.5 instance database."""
    store: dict[str, list[Box3D]] = {}
    for sc in scenes:
        dets = detect(sc, params, grid, threshold, nms_iou, max_candidates)
        store[sc.id] = [d.box for d in dets if grid.contains(d.box.cx, d.box.cy)
                        and (d.box.cx, d.box.cy) != (0.0, 0.0)]
    return store, build_database(store, scenes, k, HIGH_QUALITY)


# ---------------------------------------------------------------------------
# checkpoint: little-endian, header then flat float64 arrays
# ---------------------------------------------------------------------------
# header: magic[4] version u32, in_dim u32, channels u32, patch u32, n_reg u32, n_proto u32
# body: encoder weight, encoder bias, input shift, input scale, cls weight, cls bias, reg weight,
# reg bias, then the prototype bank when present

_HEADER = struct.Struct("<4sIIIIII")


def save_checkpoint(path, params: DetectorParams, bank: PrototypeBank | None = None) -> None:
    enc = params.encoder
    n_proto = 0 if bank is None else bank.vectors.shape[0]
    hdr = _HEADER.pack(MAGIC, CKPT_VERSION, enc.weight.shape[1], enc.channels, enc.patch, N_REG, n_proto)
    body = [a.astype("<f8").tobytes() for a in params.arrays()]
    if bank is not None:
        body.append(bank.vectors.astype("<f8").tobytes())
    Path(path).write_bytes(hdr + b"".join(body))


def load_checkpoint(path) -> tuple[DetectorParams, PrototypeBank | None]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, in_dim, c, patch, n_reg, n_proto = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a GPA3 checkpoint")
    if version != CKPT_VERSION or n_reg != N_REG:
        raise ValueError(f"{path}: unsupported checkpoint version {version} / n_reg {n_reg}")
    d = in_dim // (patch * patch)
    shapes = [(c, in_dim), (c,), (d,), (d,), (c,), (1,), (n_reg, c), (n_reg,)]
    if n_proto:
        shapes.append((n_proto, c))
    need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise ValueError(f"{path}: size {len(raw)} does not match header (expected {need})")
    off = _HEADER.size
    arrs = []
    for s in shapes:
        n = int(np.prod(s))
        arrs.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(s))
        off += 8 * n
    params = DetectorParams(EncoderParams(arrs[0], arrs[1], patch, arrs[2], arrs[3]),
                            HeadParams(arrs[4], float(arrs[5][0]), arrs[6], arrs[7]))
    bank = PrototypeBank(arrs[8]) if n_proto else None
    return params, bank
