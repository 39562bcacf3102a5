"""``gpa3d`` command line: gen / ingest / pretrain / adapt / detect / eval / ablate / export-features."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synth
from .adapt import ABLATION_SETTINGS, MissingPseudoLabels, TrainingDiverged, TrainConfig, ablation_config, \
    evaluate, pretrain, run_adaptation, target_group_features, write_metrics
from .config import load_config, write_config
from .encoder import encode, project_boxes, rasterize
from .geometry import Box3D, GeometryError, Scene, read_scenes, write_scenes
from .ira import write_database
from .kitti import KittiFormatError, group_histogram, load_label_dir
from .metrics import ap_r40, project_2d
from .model import detect, load_checkpoint, save_checkpoint
from .nss import build_mask, write_pgm

log = logging.getLogger("gpa3d")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
COMPONENTS = ("proto", "soft", "nss", "ira")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; user mistakes are 1 here
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# run-directory helpers
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir: Path, cfg: TrainConfig | None, inputs: list, started: str, command: str) -> None:
    """Atomic manifest: config, seed, git describe, timestamps, checksums of inputs and outputs."""
    run_dir = Path(run_dir)
    outputs = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    doc = {
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "git_describe": _git_describe(),
        "started": started,
        "finished": _now(),
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": {str(p.relative_to(run_dir)): _sha256(p) for p in outputs},
    }
    fd, tmp = tempfile.mkstemp(dir=run_dir, prefix=".manifest")
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, run_dir / "manifest.json")


def _load_cfg(args, **extra) -> TrainConfig:
    over = dict(extra)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if getattr(args, "contrast_weight", None) is not None:
        over["contrast_weight"] = args.contrast_weight
    if getattr(args, "k", None) is not None:
        over["k"] = args.k
    return load_config(getattr(args, "cfg", None), **over)


def _read(path, what: str) -> list[Scene]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    scenes = read_scenes(p)
    if not scenes:
        raise ValueError(f"{what} file {p} contains no scenes")
    return scenes


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = synth.preset(args.preset, seed=args.seed if args.seed is not None else 0, n_scenes=args.n)
    scenes = synth.generate_domain(spec, args.domain, workers=args.workers or 1)
    write_scenes(args.out, scenes)
    log.info("wrote %d scenes (%s) to %s", len(scenes), args.preset, args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    d = Path(args.labels_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"labels directory not found: {d}")
    boxes = load_label_dir(d)
    hist = group_histogram(boxes, args.k)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "count"])
        for q, n in enumerate(hist, start=1):
            w.writerow([q, int(n)])
    log.info("ingested %d boxes from %s", len(boxes), d)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    source = _read(args.source, "--source")
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_config(out / "config.snapshot", cfg)
    params, hist = pretrain(source, cfg)
    save_checkpoint(out / "checkpoints" / "pretrain.gpa3", params)
    with open(out / "pretrain_loss.csv", "w") as fh:
        fh.write("epoch,l_det_s\n")
        for i, v in enumerate(hist, start=1):
            fh.write(f"{i},{v:.10g}\n")
    write_manifest(out, cfg, [Path(args.source), args.cfg and Path(args.cfg)], started, "pretrain")
    return EXIT_OK


def _dump_masks(directory, params, bank, scenes, cfg: TrainConfig, labels: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid
    for s in scenes:
        fmap = encode(rasterize(s, grid), params.encoder, grid)
        proj = project_boxes(grid, labels.get(s.id, s.boxes), cfg.k)
        write_pgm(d / f"{s.id}.pgm", build_mask(fmap, proj.fg, bank, cfg.alpha, cfg.nss_threshold))


def cmd_adapt(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    source = _read(args.source, "--source")
    target = _read(args.target, "--target")
    target_eval = _read(args.target_eval, "--target-eval") if args.target_eval else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.snapshot", cfg)
    pre = load_checkpoint(args.pretrained)[0] if args.pretrained else None
    res = run_adaptation(source, target, cfg, target_eval, out_dir=out, pretrained=pre)
    st = res.state
    write_metrics(out / "metrics.csv", st.history)
    with open(out / "pseudo_labels.jsonl", "w") as fh:
        for sid in sorted(st.pseudo):
            fh.write(json.dumps({"id": sid, "boxes": [b.to_dict() for b in st.pseudo[sid]]}) + "\n")
    if st.db is not None:
        write_database(out / "ira_database.jsonl", st.db)
    if args.dump_masks and st.bank is not None:
        _dump_masks(args.dump_masks, st.params, st.bank, target, cfg, st.pseudo)
    write_manifest(out, cfg, [Path(args.source), Path(args.target), args.target_eval and Path(args.target_eval),
                              args.cfg and Path(args.cfg), args.pretrained and Path(args.pretrained)],
                   started, "adapt")
    return EXIT_OK


def cmd_detect(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    cfg = _load_cfg(args)
    scenes = _read(args.scenes, "--scenes")
    out = []
    for s in scenes:
        dets = detect(s, params, cfg.grid, args.threshold, cfg.nms_iou, cfg.max_candidates)
        out.append(Scene(s.id, np.zeros((0, 4)), [d.box for d in dets], s.domain))
    write_scenes(args.out, out)
    return EXIT_OK


def _boxes_by_id(path, what) -> dict[str, list[Box3D]]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    out = {}
    with open(p) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = [Box3D.from_dict(b) for b in rec.get("boxes", [])]
    return out


def cmd_eval(args) -> int:
    det = _boxes_by_id(args.det, "--det")
    gt = _boxes_by_id(args.gt, "--gt")
    ids = sorted(gt)
    missing = sorted(set(det) - set(gt))
    if missing:
        raise ValueError(f"detections reference scenes absent from ground truth: {missing[:5]}")
    rows = []
    for thr in args.iou:
        r = ap_r40([det.get(i, []) for i in ids], [gt[i] for i in ids], thr)
        rows.append([thr, "" if r.ap is None else f"{r.ap:.6f}", r.n_tp, r.n_fp, r.n_missed, r.n_gt])
        print(f"AP_BEV@{thr:g}: {'n/a (no ground truth)' if r.ap is None else f'{r.ap:.2f}'}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iou", "ap_bev", "tp", "fp", "missed", "n_gt"])
            w.writerows(rows)
    return EXIT_OK


def _settings_for(grid: set[str]) -> list[str]:
    """Table-3 rows whose components are all in ``grid`` (row (a) is always included)."""
    need = {"a": set(), "b": {"proto"}, "c": {"proto", "soft"}, "d": {"proto", "soft", "nss"},
            "e": {"proto", "soft", "ira"}, "f": {"proto", "soft", "nss", "ira"}}
    return [s for s in ABLATION_SETTINGS if need[s] <= grid]


def cmd_ablate(args) -> int:
    started = _now()
    grid = {g.strip() for g in args.grid.split(",") if g.strip()}
    bad = grid - set(COMPONENTS)
    if bad:
        raise ValueError(f"unknown --grid components {sorted(bad)}; choose from {','.join(COMPONENTS)}")
    over = {}
    if args.budget_epochs is not None:
        over.update(adapt_epochs=args.budget_epochs, pretrain_epochs=args.budget_epochs, update_epochs=None)
    base = _load_cfg(args, **over)
    seed = base.seed
    if args.source:
        source = _read(args.source, "--source")
    else:
        source = synth.generate_domain(synth.preset("waymo_like", seed=100 + seed, n_scenes=args.n), "source")
    if args.target:
        target = _read(args.target, "--target")
    else:
        target = synth.generate_domain(synth.preset("kitti_like", seed=200 + seed, n_scenes=args.n), "target")
    if args.target_eval:
        target_eval = _read(args.target_eval, "--target-eval")
    else:
        target_eval = synth.generate_domain(synth.preset("kitti_like", seed=300 + seed, n_scenes=args.n_eval),
                                            "target")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.snapshot", base)
    params, _ = pretrain(source, base)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_checkpoint(out / "checkpoints" / "pretrain.gpa3", params)

    runs = [(s, ablation_config(base, s)) for s in _settings_for(grid)]
    if args.k_sweep:
        for k in (int(x) for x in args.k_sweep.split(",")):
            runs.append((f"f_K{k}", replace(ablation_config(base, "f"), k=k)))
    rows = []
    for name, cfg in runs:
        log.info("ablation %s", name)
        res = run_adaptation(source, target, cfg, target_eval, out_dir=out / name, pretrained=params)
        last = res.state.history[-1]
        rows.append([name, cfg.framework, int(cfg.proto), int(cfg.soft), cfg.nss, cfg.ira, cfg.k,
                     f"{last['ap_bev_50']:.6f}", f"{last['ap_bev_70']:.6f}", f"{last['silhouette']:.6f}"])
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "framework", "proto", "soft", "nss", "ira", "k", "ap_bev_50", "ap_bev_70",
                    "silhouette"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:>6}  AP50 {float(r[7]):6.2f}  AP70 {float(r[8]):6.2f}  silhouette {float(r[9]):+.3f}")
    write_manifest(out, base, [args.source and Path(args.source), args.target and Path(args.target),
                               args.cfg and Path(args.cfg)], started, "ablate")
    return EXIT_OK


def cmd_export(args) -> int:
    params, bank = load_checkpoint(args.ckpt)
    cfg = _load_cfg(args)
    grid = cfg.grid
    k = cfg.k
    scenes = [s for p in args.scenes for s in _read(p, "--scenes")]
    c = params.encoder.channels
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "cell_x", "cell_y", "fg_flag", "group"] + [f"f_{i}" for i in range(c)])
            gx, gy = grid.cell_centers()
            for s in scenes:
                fmap = encode(rasterize(s, grid), params.encoder, grid)
                proj = project_boxes(grid, s.boxes, k)
                keep = proj.fg | fmap.occupancy if not args.all_cells else np.ones_like(proj.fg)
                for iy, ix in zip(*np.nonzero(keep)):
                    f = fmap.features[iy, ix]
                    w.writerow([s.id, f"{gx[iy, ix]:.3f}", f"{gy[iy, ix]:.3f}", int(proj.fg[iy, ix]),
                                int(proj.group[iy, ix])] + [f"{v:.8g}" for v in f])
    if args.prototypes:
        if bank is None:
            raise ValueError(f"checkpoint {args.ckpt} holds no prototypes")
        with open(args.prototypes, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group"] + [f"c_{i}" for i in range(bank.channels)])
            for q, row in enumerate(bank.vectors, start=1):
                w.writerow([q if q <= bank.k else "bg"] + [f"{v:.10g}" for v in row])
    if args.projection:
        feats, groups, doms = [], [], []
        for s in scenes:
            f, g = target_group_features(params, [s], cfg)
            feats.append(f)
            groups.append(g)
            doms += [s.domain] * len(g)
        f = np.concatenate(feats)
        if f.shape[0] < 2:
            raise ValueError("projection needs at least two foreground cells")
        pr = project_2d(f)
        with open(args.projection, "w", newline="") as fh:
            w = csv.writer(fh)
            # PCA stands in for t-SNE so the plot is deterministic
            w.writerow(["x", "y", "group", "domain"])
            for (x, y), q, d in zip(pr.coords, np.concatenate(groups), doms):
                w.writerow([f"{x:.8g}", f"{y:.8g}", int(q), d])
        log.info("PCA projection: %.1f%% variance in 2 components", 100 * pr.explained_variance)
    if not (args.out or args.prototypes or args.projection):
        raise ValueError("nothing to export: give --out, --prototypes and/or --projection")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpa3d", description="Geometry-aware prototype alignment for LiDAR detector adaptation "
                                          "(desk-scale numpy implementation).")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, cfg=True):
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
        sp.add_argument("--workers", type=int, default=None, help="scene-level threads; 1 is bit-reproducible")
        if cfg:
            sp.add_argument("--cfg", default=None, help="flat TOML config with TrainConfig fields")

    sp = sub.add_parser("gen", help="generate a synthetic domain")
    sp.add_argument("--preset", required=True, choices=sorted(synth.PRESETS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=200, help="number of scenes")
    sp.add_argument("--domain", choices=("source", "target"), default="source")
    common(sp, cfg=False)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("ingest", help="offset-angle group histogram of KITTI label_2 files")
    sp.add_argument("--labels-dir", required=True)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("pretrain", help="train the detector on labelled source scenes")
    sp.add_argument("--source", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("adapt", help="pretrain + pseudo-label + co-train on the target domain")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--target-eval", default=None, help="held-out labelled target scenes scored every epoch")
    sp.add_argument("--pretrained", default=None, help="skip pretraining and start from this checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--contrast-weight", type=float, default=None)
    sp.add_argument("--k", type=int, default=None, help="number of offset-angle groups")
    sp.add_argument("--dump-masks", default=None, metavar="DIR", help="write final NSS masks as PGM images")
    common(sp)
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("detect", help="run a checkpoint over scenes and write detections")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.1)
    common(sp)
    sp.set_defaults(fn=cmd_detect)

    sp = sub.add_parser("eval", help="AP_BEV at 40 recall positions")
    sp.add_argument("--det", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--iou", type=float, nargs="+", default=[0.5])
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="component ablation (settings a-f) and optional K sweep")
    sp.add_argument("--grid", default=",".join(COMPONENTS), help="components to ablate, e.g. proto,soft,nss,ira")
    sp.add_argument("--budget-epochs", type=int, default=None, help="pretrain and adapt epochs per run")
    sp.add_argument("--k-sweep", default=None, help="also run setting (f) at these K values, e.g. 2,4,8,32")
    sp.add_argument("--source", default=None)
    sp.add_argument("--target", default=None)
    sp.add_argument("--target-eval", default=None)
    sp.add_argument("--n", type=int, default=200, help="scenes per generated domain")
    sp.add_argument("--n-eval", type=int, default=60, help="generated held-out target scenes")
    sp.add_argument("--out", default="ablation")
    sp.add_argument("--contrast-weight", type=float, default=None)
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("export-features", help="dump BEV features, prototypes and a 2-D projection")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", required=True, nargs="+")
    sp.add_argument("--out", default=None, help="per-cell feature CSV")
    sp.add_argument("--all-cells", action="store_true", help="include empty background cells")
    sp.add_argument("--prototypes", default=None, help="prototype CSV")
    sp.add_argument("--projection", default=None, help="PCA projection CSV of foreground features")
    sp.add_argument("--k", type=int, default=None)
    common(sp)
    sp.set_defaults(fn=cmd_export)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GPA3D_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="")
        return EXIT_USER
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if getattr(args, "fn", None) is None:
        parser.print_help()
        return EXIT_USER
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KittiFormatError, GeometryError, MissingPseudoLabels,
            TrainingDiverged, IsADirectoryError, PermissionError) as exc:
        print(f"gpa3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"gpa3d {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
