"""Command-line driver: synth | pretrain | adapt | eval | gpa | project.

Every subcommand writes ``manifest.json`` (resolved config, seed, version)
into ``--out`` before producing outputs. Exit codes: 0 ok, 1 runtime
failure, 2 usage or validation error.
"""
import os

# single-core determinism; must precede the first numpy import
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import skeleton as sk
from .data import (SOURCE_DEFAULT, TARGET_DEFAULT, Dataset, PoseRecord, SynthConfig, load_dataset,
                   pairing_sampler, save_dataset, sidecar_path, split_labels, synth_generate)
from .errors import BadConfig, LabelLeak, MissingLabels, MissingSidecar, RuntimeFailure, UsageError
from .geometry import (CameraIntrinsics, box_extent, gpa_solve, normalize_screen,
                       perimeter_bound, perimeter_residual, project_pose)
from .metrics import PCK_THRESHOLD_MM, evaluate
from .nn import save_checkpoint
from .pipeline import (Lifter, TrainConfig, adapt, load_optimizer, pretrain, save_optimizer)
from .seeding import stream

log = logging.getLogger("liftadapt")

ALIGN_BINS = 30


# --- config plumbing ------------------------------------------------------------

def _add_train_flags(p):
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        if f.name == "head_weights":
            p.add_argument(*names, dest=f.name, type=float, nargs=3, default=None)
        elif f.name in ("mode", "lifter_update", "pairing"):
            p.add_argument(*names, dest=f.name, default=None)
        elif f.name == "pretrain_iters":
            p.add_argument(*names, dest=f.name, type=int, default=None)
        else:
            p.add_argument(*names, dest=f.name, type=type(f.default), default=None)


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise BadConfig(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise BadConfig(f"config file {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise BadConfig("config file must hold a JSON object")
    return cfg


def _train_config(args, section: dict) -> TrainConfig:
    d = dict(section)
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _skeleton(args):
    return sk.load_skeleton(args.skeleton) if args.skeleton else sk.default_skeleton()


def _write_manifest(out: Path, command: str, config: dict, seed=None, inputs=None):
    out.mkdir(parents=True, exist_ok=True)
    man = {"command": command, "version": __version__, "seed": seed, "config": config,
           "inputs": inputs or {}}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _load(path, skel, tag=None) -> Dataset:
    return load_dataset(path, skel, tag)


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    cfg = _read_config(args.config)
    src_cfg = SynthConfig.from_dict({**SOURCE_DEFAULT.to_dict(), **cfg.get("source", {})})
    tar_cfg = SynthConfig.from_dict({**TARGET_DEFAULT.to_dict(), **cfg.get("target", {})})
    if args.n_source is not None:
        src_cfg = dataclasses.replace(src_cfg, n=args.n_source)
    if args.n_target is not None:
        tar_cfg = dataclasses.replace(tar_cfg, n=args.n_target)
    # the run seed overrides per-domain seeds
    src_cfg = dataclasses.replace(src_cfg, seed=args.seed)
    tar_cfg = dataclasses.replace(tar_cfg, seed=args.seed)
    out = Path(args.out)
    _write_manifest(out, "synth", {"source": src_cfg.to_dict(), "target": tar_cfg.to_dict()},
                    args.seed)
    skel = _skeleton(args)
    src = synth_generate(src_cfg, stream(args.seed, "synth-source"), skel, "src")
    tar = synth_generate(tar_cfg, stream(args.seed, "synth-target"), skel, "tar")
    tar_public, tar_gt = split_labels(tar)
    save_dataset(src, out / "source.jsonl")
    save_dataset(tar_public, out / "target.jsonl")
    save_dataset(tar_gt, out / "target.gt.jsonl")
    print(f"wrote {len(src)} source and {len(tar)} target records to {out}")


def cmd_pretrain(args):
    skel = _skeleton(args)
    cfg = _train_config(args, _read_config(args.config).get("train", {}))
    out = Path(args.out)
    _write_manifest(out, "pretrain", cfg.to_dict(), cfg.seed,
                    {"source": str(args.source), "resume": args.resume})
    source = _load(args.source, skel, "source")
    if not source.has_3d:
        raise MissingLabels("pretraining needs joints_3d on every source record")
    if args.resume:
        lifter = Lifter.load(args.resume)
        opt_path = Path(str(args.resume) + ".opt")
        opt = load_optimizer(opt_path) if opt_path.exists() else None
        start = lifter.pretrain_epochs
    else:
        lifter = Lifter(skel, stream(cfg.seed, "init-lifter"), cfg.hidden_dim)
        opt, start = None, 0
    rows = []
    lifter, opt, losses = pretrain(lifter, source, cfg, start, opt)
    ema = None
    for k, (epoch, it, loss) in enumerate(losses):
        ema = loss if ema is None else ema + (loss - ema) / 50.0
        rows.append((epoch, it, k, loss, ema))
    ckpt = out / "lifter.ckpt"
    lifter.save(ckpt)
    save_optimizer(Path(str(ckpt) + ".opt"), opt)
    with open(out / "pretrain_loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "iteration", "step", "loss_mm2", "ema50"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4]))])
    last = f"{losses[-1][2]:.3f}" if losses else "n/a"
    print(f"pretrained epochs {start}..{cfg.epochs - 1}, final loss {last}; wrote {ckpt}")


def _gt_for(args, target_path) -> Path:
    gt = Path(args.gt) if args.gt else sidecar_path(target_path)
    if not gt.exists():
        raise MissingSidecar(f"ground-truth sidecar {gt} not found")
    return gt


def _match_by_id(ref: Dataset, other: Dataset, what: str) -> Dataset:
    by_id = {r.id: r for r in other.records}
    missing = [r.id for r in ref.records if r.id not in by_id]
    if missing:
        raise MissingLabels(f"{what} lacks {len(missing)} ids, e.g. {missing[0]}")
    return Dataset([by_id[r.id] for r in ref.records], other.skeleton, other.domain_tag)


def alignment_stats(source: Dataset, target: Dataset, seed: int, skel: sk.SkeletonDef):
    """2D box size and root position in normalised screen units.

    Series: the source as captured, the source placed by GPA against the
    epoch-0 pairing in the target cameras, and the target.
    """
    s2 = normalize_screen(source.joints_2d(), source.cameras())
    t_px = target.joints_2d()
    t_cams = target.cameras()
    t2 = normalize_screen(t_px, t_cams)
    plan = pairing_sampler(source, target, 0, seed)
    cam = CameraIntrinsics(*(np.asarray(getattr(t_cams, f))[plan.targets]
                             for f in ("fx", "fy", "cx", "cy", "width", "height")))
    s3 = source.joints_3d()
    root = gpa_solve(t_px[plan.targets], s3, cam, skel.root_index)
    g2 = normalize_screen(project_pose(s3, root, cam), cam)
    series = {}
    for name, p in (("source", s2), ("gpa_source", g2), ("target", t2)):
        b = box_extent(p)
        series[name] = {"scale": b.dx + b.dy, "root_x": p[:, skel.root_index, 0],
                        "root_y": p[:, skel.root_index, 1]}
    return series


def write_alignment(series: dict, path: Path, summary_path: Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["quantity", "series", "bin_lo", "bin_hi", "count"])
        for q in ("scale", "root_x", "root_y"):
            allv = np.concatenate([s[q] for s in series.values()])
            edges = np.linspace(allv.min(), allv.max(), ALIGN_BINS + 1)
            for name, s in series.items():
                counts, _ = np.histogram(s[q], edges)
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([q, name, repr(float(lo)), repr(float(hi)), int(c)])
    with open(summary_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["quantity", "series", "mean", "std", "count"])
        for q in ("scale", "root_x", "root_y"):
            for name, s in series.items():
                w.writerow([q, name, repr(float(s[q].mean())), repr(float(s[q].std())),
                            len(s[q])])


def cmd_adapt(args):
    skel = _skeleton(args)
    cfg = _train_config(args, _read_config(args.config).get("train", {}))
    out = Path(args.out)
    _write_manifest(out, "adapt", cfg.to_dict(), cfg.seed,
                    {"checkpoint": str(args.checkpoint), "source": str(args.source),
                     "target": str(args.target), "gt": args.gt})
    lifter = Lifter.load(args.checkpoint)
    source = _load(args.source, skel, "source")
    target = _load(args.target, skel, "target")
    gt = _match_by_id(target, _load(args.gt, skel, "target"), "gt") if args.gt else None
    if target.any_3d:
        raise LabelLeak("target dataset must not carry joints_3d during adaptation")
    if not target.has_2d:
        raise MissingLabels("target dataset needs joints_2d on every record")
    write_alignment(alignment_stats(source, target, cfg.seed, skel),
                    out / "alignment.csv", out / "alignment_summary.csv")
    res = adapt(lifter, source, target, cfg, eval_gt=gt, dump_dir=out)
    res.lifter.save(out / "lifter.ckpt")
    save_checkpoint(out / "generator.ckpt", res.generator.store.named_arrays("generator."),
                    {"kind": "generator", "seed": cfg.seed})
    save_checkpoint(out / "discriminator.ckpt",
                    res.discriminator.store.named_arrays("discriminator."),
                    {"kind": "discriminator", "seed": cfg.seed})
    res.report.write(out / "report.jsonl")
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": res.report.wall_clock}) + "\n")
    tail = res.report.epochs[-1] if res.report.epochs else {}
    print(f"adapted {len(res.report.epochs)} epochs ({cfg.mode}); last epoch {tail}")


def _load_predictions(path, ref: Dataset, skel) -> np.ndarray:
    preds = _match_by_id(ref, load_dataset(path, skel), "predictions")
    if not preds.has_3d:
        raise MissingLabels("predictions file needs joints_3d on every record")
    return preds.joints_3d()


def cmd_eval(args):
    skel = _skeleton(args)
    if (args.checkpoint is None) == (args.predictions is None):
        raise BadConfig("pass exactly one of --checkpoint or --predictions")
    out = Path(args.out)
    _write_manifest(out, "eval", {"threshold_mm": args.threshold}, None,
                    {"checkpoint": args.checkpoint, "predictions": args.predictions,
                     "target": str(args.target)})
    target = _load(args.target, skel)
    if not target.has_2d and args.checkpoint is not None:
        raise MissingLabels("lifting needs joints_2d on every target record")
    gt = _match_by_id(target, _load(_gt_for(args, args.target), skel), "gt sidecar")
    if not gt.has_3d:
        raise MissingLabels("ground-truth sidecar needs joints_3d on every record")
    if args.checkpoint is not None:
        lifter = Lifter.load(args.checkpoint)
        preds = lifter.predict(normalize_screen(target.joints_2d(), target.cameras()))
    else:
        preds = _load_predictions(args.predictions, target, skel)
    report = evaluate(preds, gt.joints_3d(), target.ids(), args.threshold)
    report.write_json(out / "eval.json")
    report.write_csv(out / "eval_per_record.csv")
    print(report.summary())


def _pairs(args, source: Dataset, target: Dataset) -> np.ndarray:
    if args.shuffle:
        if args.seed is None:
            raise BadConfig("--shuffle needs --seed")
        return pairing_sampler(source, target, args.epoch, args.seed).targets
    return np.arange(len(source)) % len(target)


def cmd_gpa(args):
    skel = _skeleton(args)
    out = Path(args.out)
    _write_manifest(out, "gpa", {"shuffle": args.shuffle, "epoch": args.epoch}, args.seed,
                    {"source": str(args.source), "target": str(args.target)})
    source = _load(args.source, skel)
    target = _load(args.target, skel)
    if not source.has_3d:
        raise MissingLabels("gpa needs joints_3d on every source record")
    if not target.has_2d:
        raise MissingLabels("gpa needs joints_2d on every target record")
    pairs = _pairs(args, source, target)
    flagged = 0
    with open(out / "gpa.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source_id", "target_id", "X_mm", "Y_mm", "Z_mm", "residual", "bound",
                     "flag"])
        for s_rec, k in zip(source.records, pairs):
            t_rec = target.records[k]
            try:
                root = gpa_solve(t_rec.joints_2d, s_rec.joints_3d, t_rec.camera, skel.root_index)
                px = project_pose(s_rec.joints_3d, root, t_rec.camera)
                res = float(perimeter_residual(px, t_rec.joints_2d))
                bound = float(perimeter_bound(s_rec.joints_3d, root))
                row = [*(repr(float(v)) for v in root), repr(res), repr(bound), ""]
            except UsageError as e:
                flagged += 1
                row = ["", "", "", "", "", type(e).__name__]
            w.writerow([s_rec.id, t_rec.id, *row])
    print(f"solved {len(source) - flagged} pairs, flagged {flagged}; wrote {out / 'gpa.csv'}")


def cmd_project(args):
    """GPA-place (or canonically place) source 3D poses and emit the projected pairs."""
    skel = _skeleton(args)
    out = Path(args.out)
    _write_manifest(out, "project", {"shuffle": args.shuffle, "epoch": args.epoch,
                                     "depth": args.depth}, args.seed,
                    {"source": str(args.source), "target": args.target})
    source = _load(args.source, skel)
    if not source.has_3d:
        raise MissingLabels("project needs joints_3d on every source record")
    s3 = source.joints_3d()
    if args.target:
        target = _load(args.target, skel)
        pairs = _pairs(args, source, target)
        recs = [target.records[k] for k in pairs]
        cams = [r.camera for r in recs]
        roots = np.stack([gpa_solve(r.joints_2d, p, r.camera, skel.root_index)
                          for r, p in zip(recs, s3)])
    else:
        cams = [r.camera for r in source.records]
        roots = np.zeros((len(source), 3))
        roots[:, 2] = args.depth
    records = [PoseRecord(r.id, c, project_pose(p, root, c), p)
               for r, c, p, root in zip(source.records, cams, s3, roots)]
    save_dataset(Dataset(records, skel, "source"), out / "projected.jsonl")
    print(f"wrote {len(records)} projected pairs to {out / 'projected.jsonl'}")


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liftadapt", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--skeleton", help="skeleton definition (one-line JSON)")

    p = sub.add_parser("synth", help="generate the synthetic source/target pair")
    common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-source", "--n_source", dest="n_source", type=int)
    p.add_argument("--n-target", "--n_target", dest="n_target", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="supervised lifting on the source")
    common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--resume", help="lifter checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a pretrained lifter to the target domain")
    common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--gt", help="target ground truth, for per-epoch MPJPE only")
    _add_train_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="MPJPE / PA-MPJPE / PCK / AUC on the target")
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--gt", help="ground-truth sidecar (default: <target>.gt.jsonl)")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="JSONL records with joints_3d, matched by id")
    p.add_argument("--threshold", type=float, default=PCK_THRESHOLD_MM)
    p.set_defaults(func=cmd_eval)

    for name, fn, help_ in (("gpa", cmd_gpa, "per-pair GPA root positions as CSV"),
                            ("project", cmd_project, "place and project source poses")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--source", required=True)
        p.add_argument("--target", required=(name == "gpa"))
        p.add_argument("--seed", type=int)
        p.add_argument("--shuffle", action="store_true", help="use the seeded epoch pairing")
        p.add_argument("--epoch", type=int, default=0)
        if name == "project":
            p.add_argument("--depth", type=float, default=5000.0,
                           help="root depth (mm) when no --target is given")
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (RuntimeFailure, OSError) as e:
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0
