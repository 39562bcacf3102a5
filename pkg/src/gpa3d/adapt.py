"""Source pretraining, pseudo-labelling and co-training with prototype alignment."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoder import BevGrid, FeatureSequences, encode, encode_backward, extract_sequences, fit_input_norm, \
    project_boxes, rasterize, scatter_sequence_grads
from .geometry import Box3D, Scene, group_index
from .head import HeadOutput, detection_loss, head_forward
from .ira import IraConfig, IraDatabase, replace_instances
from .metrics import ap_r40, silhouette
from .model import DetectorParams, detect, generate_pseudo_labels, save_checkpoint
from .nss import build_mask
from .prototypes import PrototypeBank, contrast_loss, init_prototypes, sgd_step

log = logging.getLogger(__name__)

NSS_VARIANTS = {
    # variant -> (domains the mask applies to, alpha)
    "none": ((), 1.0),
    "T": (("target",), 0.5),
    "S": (("source",), 0.5),
    "TS": (("source", "target"), 0.5),
    "TSH": (("source", "target"), 0.0),
}
IRA_MODES = ("none", "group", "random")
FRAMEWORKS = ("co-training", "self-training")

METRIC_COLUMNS = ("epoch", "l_det_s", "l_det_t", "l_att_fg", "l_att_bg", "l_rep_adj", "l_rep_other",
                  "l_rep_bg", "ap_bev_50", "ap_bev_70", "silhouette")
CONTRAST_TERMS = ("l_att_fg", "l_att_bg", "l_rep_adj", "l_rep_other", "l_rep_bg")


class TrainingDiverged(RuntimeError):
    pass


class MissingPseudoLabels(RuntimeError):
    pass


@dataclass
class TrainConfig:
    pretrain_epochs: int = 30
    adapt_epochs: int = 30
    batch_source: int = 4
    batch_target: int = 4
    lr_pretrain: float = 0.1
    lr_adapt: float = 0.05
    lr_schedule: str = "cosine"  # or "constant"
    contrast_weight: float = 1.0
    k: int = 8
    update_epochs: tuple[int, ...] | None = None  # None -> every 5 epochs
    seed: int = 0
    framework: str = "co-training"
    proto: bool = True
    soft: bool = True
    nss: str = "TSH"
    nss_alpha: float | None = None  # None -> the variant's alpha
    nss_threshold: float = 0.3
    ira: str = "group"
    p_ira: float = 0.25
    margin: float = 0.5
    beta1: float = 5.0
    beta2: float = 1.0
    beta3: float = 5.0
    contrast_reduction: str = "mean"
    proto_lr_scale: float = 1.0
    pseudo_threshold: float = 0.2
    nms_iou: float = 0.3
    max_candidates: int = 200
    eval_threshold: float = 0.1
    channels: int = 16
    patch: int = 5
    cell_size: float = 0.8
    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-25.6, 25.6)
    cls_prior: float = 0.05
    input_norm: bool = True  # standardise occupied-cell statistics with source-domain moments
    eval_every: int = 1
    silhouette_samples: int = 600
    workers: int = 1

    def __post_init__(self):
        self.x_range = tuple(float(v) for v in self.x_range)
        self.y_range = tuple(float(v) for v in self.y_range)
        if self.update_epochs is not None:
            self.update_epochs = tuple(int(u) for u in self.update_epochs)
        self.validate()

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr_pretrain < 0 or self.lr_adapt < 0:
            raise ValueError("learning rates must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"framework must be one of {FRAMEWORKS}")
        if self.nss not in NSS_VARIANTS:
            raise ValueError(f"nss must be one of {tuple(NSS_VARIANTS)}")
        if self.ira not in IRA_MODES:
            raise ValueError(f"ira must be one of {IRA_MODES}")
        if self.contrast_weight < 0:
            raise ValueError("contrast_weight must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        a = self.alpha
        if self.nss != "none" and not 0.0 <= a < 1.0:
            raise ValueError("nss_alpha must lie in [0, 1)")
        for u in self.updates:
            if not 1 <= u <= self.adapt_epochs:
                raise ValueError(f"update epoch {u} outside [1, {self.adapt_epochs}]")

    @property
    def updates(self) -> tuple[int, ...]:
        if self.update_epochs is None:
            return tuple(range(5, self.adapt_epochs + 1, 5))
        return self.update_epochs

    @property
    def alpha(self) -> float:
        return NSS_VARIANTS[self.nss][1] if self.nss_alpha is None else self.nss_alpha

    @property
    def nss_domains(self) -> tuple[str, ...]:
        return NSS_VARIANTS[self.nss][0]

    @property
    def grid(self) -> BevGrid:
        return BevGrid(self.x_range, self.y_range, self.cell_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x_range"] = list(self.x_range)
        d["y_range"] = list(self.y_range)
        d["update_epochs"] = list(self.updates)
        d.pop("nss_alpha")
        d["nss_alpha"] = self.alpha
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown config keys: {', '.join(bad)}")
        return cls(**d)


# Table-3 style component ablation, (a) is the self-training baseline
ABLATION_SETTINGS: dict[str, dict] = {
    "a": dict(framework="self-training", proto=False, soft=False, nss="none", ira="none"),
    "b": dict(framework="co-training", proto=True, soft=False, nss="none", ira="none"),
    "c": dict(framework="co-training", proto=True, soft=True, nss="none", ira="none"),
    "d": dict(framework="co-training", proto=True, soft=True, nss="TSH", ira="none"),
    "e": dict(framework="co-training", proto=True, soft=True, nss="none", ira="group"),
    "f": dict(framework="co-training", proto=True, soft=True, nss="TSH", ira="group"),
}
BASELINES: dict[str, dict] = {
    "self-training": ABLATION_SETTINGS["a"],
    "co-training": dict(framework="co-training", proto=False, soft=False, nss="none", ira="none"),
}


def ablation_config(base: TrainConfig, setting: str) -> TrainConfig:
    if setting not in ABLATION_SETTINGS:
        raise ValueError(f"unknown ablation setting {setting!r}; expected one of {sorted(ABLATION_SETTINGS)}")
    return replace(base, **ABLATION_SETTINGS[setting])


def cosine_lr(lr0: float, step: int, total: int, schedule: str = "cosine") -> float:
    """Cosine annealing from lr0 at step 0 to exactly 0 at the last step."""
    if schedule == "constant" or total <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class AdaptState:
    params: DetectorParams
    bank: PrototypeBank | None = None
    pseudo: dict[str, list[Box3D]] = field(default_factory=dict)
    db: IraDatabase | None = None
    labels_from: str | None = None  # checksum of the params that produced pseudo + db
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class _SceneResult:
    det_total: float
    fmap: object
    det_grad_features: np.ndarray
    head_grads: object
    seqs: FeatureSequences | None
    n_fg: int = 0
    n_suppressed: int = 0


class _StatsCache:
    """Rasterized statistics keyed by scene id; only valid for scenes whose points never change."""

    def __init__(self, grid: BevGrid):
        self.grid = grid
        self._store: dict[str, np.ndarray] = {}

    def get(self, scene: Scene, cacheable: bool = True) -> np.ndarray:
        if not cacheable:
            return rasterize(scene, self.grid)
        st = self._store.get(scene.id)
        if st is None:
            st = rasterize(scene, self.grid)
            self._store[scene.id] = st
        return st


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _tree_sum(arrs: list):
    """Pairwise sum in a fixed order, independent of the worker count."""
    arrs = list(arrs)
    if not arrs:
        raise ValueError("nothing to sum")
    while len(arrs) > 1:
        nxt = [arrs[i] + arrs[i + 1] for i in range(0, len(arrs) - 1, 2)]
        if len(arrs) % 2:
            nxt.append(arrs[-1])
        arrs = nxt
    return arrs[0]


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at step {step}; lower the learning rate")


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------

def _scene_pass(scene: Scene, labels: Sequence[Box3D], stats: np.ndarray, params: DetectorParams,
                bank: PrototypeBank | None, cfg: TrainConfig, grid: BevGrid, use_mask: bool,
                want_seqs: bool, rng: np.random.Generator) -> _SceneResult:
    fmap = encode(stats, params.encoder, grid)
    out = head_forward(fmap, params.head)
    proj = project_boxes(grid, labels, cfg.k)
    mask = None
    n_sup = 0
    if use_mask and bank is not None:
        nm = build_mask(fmap, proj.fg, bank, cfg.alpha, cfg.nss_threshold)
        mask = nm.values
        n_sup = int(nm.suppressed.sum())
    det = detection_loss(fmap, out, params.head, labels, mask, proj)
    seqs = extract_sequences(fmap, labels, cfg.k, rng, proj) if want_seqs else None
    return _SceneResult(det.total, fmap, det.grad_features, det.grad_head, seqs, int(proj.fg.sum()), n_sup)


def _apply_update(params: DetectorParams, enc_gw, enc_gb, head_g, lr: float) -> DetectorParams:
    if lr == 0.0:
        return params
    new = params.copy()
    new.encoder.weight -= lr * enc_gw
    new.encoder.bias -= lr * enc_gb
    new.head.cls_weight -= lr * head_g[0]
    new.head.cls_bias = float(new.head.cls_bias - lr * head_g[1])
    new.head.reg_weight -= lr * head_g[2]
    new.head.reg_bias -= lr * head_g[3]
    return new


def _head_vec(g) -> tuple:
    return (g.cls_weight, g.cls_bias, g.reg_weight, g.reg_bias)


def gradient_step(items: list[tuple[Scene, Sequence[Box3D], np.ndarray, str]], params: DetectorParams,
                  bank: PrototypeBank | None, cfg: TrainConfig, lr: float, step: int,
                  detection_weights: dict[str, float], contrast: bool) -> tuple[DetectorParams, PrototypeBank | None, dict]:
    """Forward/backward over ``items`` = (scene, labels, stats, domain); one SGD update.

    Detection losses are averaged within each domain and multiplied by
    ``detection_weights[domain]``; the contrast loss (if any) is pooled over
    every scene in the batch and weighted by ``cfg.contrast_weight``.
    """
    grid = cfg.grid
    nss_dom = set(cfg.nss_domains)

    def run(job):
        j, (scene, labels, stats, domain) = job
        rng = np.random.default_rng([cfg.seed, 11, step, j])
        return _scene_pass(scene, labels, stats, params, bank, cfg, grid, domain in nss_dom,
                           contrast, rng)

    results = _map(run, list(enumerate(items)), cfg.workers)

    counts: dict[str, int] = {}
    for _, _, _, dom in items:
        counts[dom] = counts.get(dom, 0) + 1
    metrics = {"l_det_s": float("nan"), "l_det_t": float("nan")}
    for dom, key in (("source", "l_det_s"), ("target", "l_det_t")):
        vals = [r.det_total for r, it in zip(results, items) if it[3] == dom]
        if vals:
            metrics[key] = float(_tree_sum([np.float64(v) for v in vals]) / len(vals))

    n_fg = sum(r.n_fg for r in results)
    metrics["nss_suppressed"] = sum(r.n_suppressed for r in results) / n_fg if n_fg else 0.0

    c = params.encoder.channels
    contra = None
    if contrast and bank is not None:
        fg = np.concatenate([r.seqs.fg for r in results]) if results else np.zeros((0, c))
        fq = np.concatenate([r.seqs.fg_group for r in results]).astype(np.int64)
        bg = np.concatenate([r.seqs.bg for r in results])
        contra = contrast_loss(fg, fq, bg, bank, soft=cfg.soft, reduction=cfg.contrast_reduction)
        for name, v in contra.breakdown.as_dict().items():
            if name != "total":
                metrics[name] = v
        metrics["l_contra"] = contra.breakdown.total
    else:
        for name in CONTRAST_TERMS:
            metrics[name] = float("nan")
        metrics["l_contra"] = float("nan")

    beta = cfg.contrast_weight
    fg_off = bg_off = 0
    enc_parts, head_parts = [], []
    for r, (_, _, _, dom) in zip(results, items):
        w = detection_weights.get(dom, 0.0) / counts[dom]
        g_feat = w * r.det_grad_features
        if contra is not None and len(r.seqs):
            n = len(r.seqs)
            g_seq = scatter_sequence_grads(r.fmap.features.shape, r.seqs,
                                           contra.grad_fg[fg_off:fg_off + n], contra.grad_bg[bg_off:bg_off + n])
            g_feat = g_feat + beta * g_seq
            fg_off += n
            bg_off += n
        gw, gb = encode_backward(r.fmap, g_feat)
        enc_parts.append((gw, gb))
        hg = _head_vec(r.head_grads)
        head_parts.append(tuple(w * np.asarray(x) for x in hg))

    enc_gw = _tree_sum([p[0] for p in enc_parts])
    enc_gb = _tree_sum([p[1] for p in enc_parts])
    head_g = tuple(_tree_sum([p[i] for p in head_parts]) for i in range(4))

    total = sum(detection_weights.get(d, 0.0) * metrics[k] for d, k in (("source", "l_det_s"), ("target", "l_det_t"))
                if counts.get(d))
    if contra is not None:
        total += beta * contra.breakdown.total
    metrics["loss"] = float(total)
    _check_finite(metrics["loss"], "training loss", step)

    new_params = _apply_update(params, enc_gw, enc_gb, head_g, lr)
    new_bank = bank
    if contra is not None and lr > 0 and beta > 0:
        new_bank = sgd_step(bank, beta * contra.grad_prototypes, lr * cfg.proto_lr_scale)
    return new_params, new_bank, metrics


# ---------------------------------------------------------------------------
# source pretraining
# ---------------------------------------------------------------------------

def pretrain(source: Sequence[Scene], cfg: TrainConfig, params: DetectorParams | None = None,
             cache: _StatsCache | None = None) -> tuple[DetectorParams, list[float]]:
    """Plain SGD on the detection loss over shuffled source batches."""
    if not source:
        raise ValueError("source domain is empty")
    cache = cache or _StatsCache(cfg.grid)
    if params is None:
        params = DetectorParams.init(cfg.channels, cfg.patch, cfg.seed, cfg.cls_prior)
        if cfg.input_norm:
            shift, scale = fit_input_norm([cache.get(s) for s in source])
            params.encoder.input_shift, params.encoder.input_scale = shift, scale
    n = len(source)
    nb = math.ceil(n / cfg.batch_source)
    total = cfg.pretrain_epochs * nb
    history = []
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        losses = []
        for b in range(nb):
            idx = order[b * cfg.batch_source:(b + 1) * cfg.batch_source]
            items = [(source[i], source[i].boxes, cache.get(source[i]), "source") for i in idx]
            lr = cosine_lr(cfg.lr_pretrain, step, total, cfg.lr_schedule)
            params, _, m = gradient_step(items, params, None, cfg, lr, step, {"source": 1.0}, False)
            losses.append(m["l_det_s"])
            step += 1
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d/%d loss %.5f", epoch + 1, cfg.pretrain_epochs, history[-1])
    return params, history


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------

def strip_labels(scenes: Iterable[Scene]) -> list[Scene]:
    return [Scene(s.id, s.points, [], "target") for s in scenes]


def refresh_pseudo_labels(state: AdaptState, target: Sequence[Scene], cfg: TrainConfig) -> AdaptState:
    before = sum(len(v) for v in state.pseudo.values())
    store, db = generate_pseudo_labels(state.params, target, cfg.grid, cfg.k, cfg.pseudo_threshold,
                                       cfg.nms_iou, cfg.max_candidates)
    state.pseudo, state.db = store, db
    state.labels_from = state.params.checksum()
    after = sum(len(v) for v in store.values())
    log.info("pseudo-labels refreshed: %d -> %d boxes, database %d instances", before, after, len(db))
    return state


def co_train_step(batch_s: Sequence[Scene], batch_t: Sequence[Scene], state: AdaptState, cfg: TrainConfig,
                  lr: float, cache: _StatsCache | None = None) -> tuple[AdaptState, dict]:
    """One adaptation step: IRA on target, detection on both domains, prototype contrast, SGD."""
    cache = cache or _StatsCache(cfg.grid)
    ira_rng = np.random.default_rng([cfg.seed, 13, state.step])
    ira_cfg = IraConfig(p_replace=cfg.p_ira, band=(cfg.pseudo_threshold, 0.5), group_matched=cfg.ira == "group")
    items = []
    if cfg.framework == "co-training":
        items += [(s, s.boxes, cache.get(s), "source") for s in batch_s]
    n_replaced = 0
    for s in batch_t:
        if s.id not in state.pseudo:
            raise MissingPseudoLabels(f"no pseudo-labels for target scene {s.id}; call refresh_pseudo_labels first")
        labels = state.pseudo[s.id]
        if cfg.ira != "none" and state.db is not None and len(state.db):
            s2, rep = replace_instances(Scene(s.id, s.points, labels, s.domain), labels, state.db, ira_cfg, ira_rng)
            n_replaced += len(rep)
            if rep:
                items.append((s2, s2.boxes, rasterize(s2, cfg.grid), "target"))
                continue
        items.append((s, labels, cache.get(s), "target"))
    weights = {"source": 1.0, "target": 1.0}
    params, bank, m = gradient_step(items, state.params, state.bank, cfg, lr, state.step, weights,
                                    cfg.proto and state.bank is not None)
    state.params, state.bank = params, bank
    state.step += 1
    m["ira_replaced"] = n_replaced
    return state, m


@dataclass
class EvalSummary:
    ap_bev_50: float
    ap_bev_70: float
    silhouette: float


def evaluate(params: DetectorParams, scenes: Sequence[Scene], cfg: TrainConfig, k: int | None = None) -> EvalSummary:
    """Target AP_BEV at IoU 0.5 / 0.7 and the silhouette of GT-foreground features by group."""
    grid = cfg.grid
    k = cfg.k if k is None else k
    dets, gts, feats, groups = [], [], [], []
    for s in scenes:
        dets.append([d.box for d in detect(s, params, grid, cfg.eval_threshold, cfg.nms_iou, cfg.max_candidates)])
        gts.append(s.boxes)
        if s.boxes:
            fmap = encode(rasterize(s, grid), params.encoder, grid)
            proj = project_boxes(grid, s.boxes, k)
            iy, ix = np.nonzero(proj.fg)
            feats.append(fmap.features[iy, ix])
            groups.append(proj.group[iy, ix])
    r50 = ap_r40(dets, gts, 0.5)
    r70 = ap_r40(dets, gts, 0.7)
    sil = float("nan")
    if feats:
        f = np.concatenate(feats)
        g = np.concatenate(groups)
        if f.shape[0] > cfg.silhouette_samples:
            pick = np.sort(np.random.default_rng([cfg.seed, 17]).choice(f.shape[0], cfg.silhouette_samples,
                                                                         replace=False))
            f, g = f[pick], g[pick]
        if np.unique(g).size >= 2:
            sil = silhouette(f, g)
    nan = float("nan")
    return EvalSummary(r50.ap if r50.ap is not None else nan, r70.ap if r70.ap is not None else nan, sil)


def format_metrics_row(row: dict) -> str:
    out = []
    for c in METRIC_COLUMNS:
        v = row.get(c, float("nan"))
        out.append(str(int(v)) if c == "epoch" else f"{float(v):.10g}")
    return ",".join(out)


def write_metrics(path, history: Sequence[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)] + [format_metrics_row(r) for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class AdaptResult:
    state: AdaptState
    pretrained: DetectorParams
    pretrain_history: list[float]


def run_adaptation(source: Sequence[Scene], target: Sequence[Scene], cfg: TrainConfig,
                   target_eval: Sequence[Scene] | None = None, out_dir=None,
                   pretrained: DetectorParams | None = None,
                   on_epoch: Callable[[dict], None] | None = None) -> AdaptResult:
    """Pretrain on source, pseudo-label the target, then co-train for ``adapt_epochs``.

    ``target`` is used without its boxes; ``target_eval`` (with boxes) is the
    held-out split scored every epoch.  A precomputed ``pretrained`` model
    skips the pretraining stage.
    """
    if not source or not target:
        raise ValueError("both domains must be nonempty")
    target = strip_labels(target)
    grid = cfg.grid
    cache = _StatsCache(grid)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    if pretrained is None:
        params, pre_hist = pretrain(source, cfg, cache=cache)
    else:
        params, pre_hist = pretrained.copy(), []
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "pretrain.gpa3", params)

    bank = None
    if cfg.proto:
        bank = init_prototypes(cfg.k, cfg.channels, seed=cfg.seed, margin=cfg.margin, beta1=cfg.beta1,
                               beta2=cfg.beta2, beta3=cfg.beta3)
    state = AdaptState(params=params, bank=bank)
    refresh_pseudo_labels(state, target, cfg)

    def record(epoch: int, losses: dict) -> None:
        row = {"epoch": epoch, **losses}
        if target_eval and (epoch % cfg.eval_every == 0 or epoch == cfg.adapt_epochs):
            ev = evaluate(state.params, target_eval, cfg)
            row.update(ap_bev_50=ev.ap_bev_50, ap_bev_70=ev.ap_bev_70, silhouette=ev.silhouette)
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            write_metrics(out / "metrics.csv", state.history)

    record(0, {})
    nt, ns = len(target), len(source)
    nb = math.ceil(nt / cfg.batch_target)
    total = cfg.adapt_epochs * nb
    updates = set(cfg.updates)
    for epoch in range(1, cfg.adapt_epochs + 1):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        t_order = rng.permutation(nt)
        s_order = rng.permutation(np.resize(np.arange(ns), max(nb * cfg.batch_source, ns)))
        acc: dict[str, list[float]] = {}
        for b in range(nb):
            bt = [target[i] for i in t_order[b * cfg.batch_target:(b + 1) * cfg.batch_target]]
            bs = [source[i] for i in s_order[b * cfg.batch_source:(b + 1) * cfg.batch_source]]
            lr = cosine_lr(cfg.lr_adapt, state.step, total, cfg.lr_schedule)
            state, m = co_train_step(bs, bt, state, cfg, lr, cache)
            for key, v in m.items():
                acc.setdefault(key, []).append(v)
        state.epoch = epoch
        losses = {key: float(np.mean(v)) for key, v in acc.items()}
        log.info("adapt epoch %d/%d loss %.5f", epoch, cfg.adapt_epochs, losses.get("loss", float("nan")))
        if epoch in updates:
            refresh_pseudo_labels(state, target, cfg)
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.gpa3", state.params, state.bank)
        record(epoch, losses)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.gpa3", state.params, state.bank)
    return AdaptResult(state, params if pretrained is None else pretrained, pre_hist)


def target_group_features(params: DetectorParams, scenes: Sequence[Scene], cfg: TrainConfig,
                          k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """GT-foreground features of ``scenes`` with their offset-angle groups."""
    grid = cfg.grid
    k = cfg.k if k is None else k
    feats, groups = [], []
    for s in scenes:
        if not s.boxes:
            continue
        fmap = encode(rasterize(s, grid), params.encoder, grid)
        proj = project_boxes(grid, s.boxes, k)
        iy, ix = np.nonzero(proj.fg)
        feats.append(fmap.features[iy, ix])
        groups.append(proj.group[iy, ix])
    if not feats:
        return np.zeros((0, params.encoder.channels)), np.zeros(0, dtype=np.int64)
    return np.concatenate(feats), np.concatenate(groups)
