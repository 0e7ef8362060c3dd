"""Command-line entry point: ``python -m posereg <command> ...``.

Commands: ``synth``, ``train``, ``eval``, ``predict`` and ``gradcheck``.

Configuration is layered: the preset (``--preset``, default ``desk``), then
an optional JSON file (``--config``) with ``model``, ``train`` and ``synth``
sections, then ``--set section.key=value`` overrides (values parsed as JSON,
falling back to plain strings).

Exit codes: 0 success, 2 usage/config/input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint
from .gradcheck import run_suite
from .metrics import desk_config, evaluate, metric_table, pck_config, pckh_config
from .model import ModelConfig, Pose, preset
from .render import heatmap_mosaic, overlay, save_png
from .tensor import NonFiniteError
from .train import TrainConfig, TrainingError, predict_poses, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SECTIONS = ("model", "train", "synth")

log = logging.getLogger("posereg")


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(items):
    out = {s: {} for s in SECTIONS}
    for item in items or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS or not name:
            raise ConfigError(f"bad --set {item!r}; expected section.key=value with section in {SECTIONS}")
        out[section][name] = _parse_value(raw)
    return out


def _merge(base_obj, updates, cls):
    names = {f.name for f in fields(cls)}
    unknown = set(updates) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    d = asdict(base_obj) if not isinstance(base_obj, dict) else dict(base_obj)
    d.update(updates)
    return d


def load_config(args):
    """Resolve (ModelConfig, TrainConfig, SyntheticSpec) from preset, file and overrides."""
    try:
        model = preset(args.preset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    layers = []
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict) or set(doc) - set(SECTIONS):
            raise ConfigError(f"config file sections must be among {SECTIONS}")
        layers.append(doc)
    layers.append(parse_overrides(getattr(args, "set", None)))
    m, t, s = {}, {}, {}
    for layer in layers:
        m.update(layer.get("model", {}))
        t.update(layer.get("train", {}))
        s.update(layer.get("synth", {}))
    try:
        model_cfg = ModelConfig.from_dict(_merge(model, m, ModelConfig)).validate()
        train_cfg = TrainConfig.from_dict(_merge(TrainConfig(), t, TrainConfig)).validate()
        sd = _merge(D.SyntheticSpec(), s, D.SyntheticSpec)
        sd["colors"] = np.asarray(sd["colors"], dtype=np.float64)
        for k in ("torso_width", "torso_height", "limb_length"):
            sd[k] = tuple(sd[k])
        synth_cfg = D.SyntheticSpec(**sd)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return model_cfg, train_cfg, synth_cfg


def metric_for(num_joints, metric=None, threshold=None):
    """Default metric settings by skeleton size: 8 synthetic, 14 LSP, 16 MPII."""
    if num_joints == 16:
        cfg = pckh_config()
        cfg.metric = metric or "PCKh"
    elif num_joints == 14:
        cfg = pck_config()
        cfg.metric = metric or "PCK"
    elif num_joints == 8:
        return desk_config(metric or "PCK", threshold)
    else:
        raise ConfigError(f"no metric defaults for {num_joints} joints")
    if cfg.metric == "PCP":
        cfg.threshold = 0.5
    if threshold is not None:
        cfg.threshold = threshold
    return cfg


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    _, _, spec = load_config(args)
    if args.seed is not None:
        spec.seed = args.seed
    try:
        samples = D.synth_generate(spec, args.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = D.write_synthetic(args.out, samples, spec.canvas)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def _dataset(path, cfg):
    return D.load_dataset(path, cfg.input_size, cfg.num_joints)


def cmd_train(args):
    model_cfg, train_cfg, _ = load_config(args)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    train_cfg.output_dir = args.out
    dataset = _dataset(args.data, model_cfg)
    val = _dataset(args.val, model_cfg) if args.val else None
    metric_cfg = metric_for(model_cfg.num_joints)
    metric_cfg.metric = "PCK"
    trainer, runlog = train(model_cfg, train_cfg, dataset, val, resume_from=args.resume,
                            init_from=args.init_from, metric_cfg=metric_cfg)
    best = max(runlog.entries, key=lambda e: e["val_pck"])["val_pck"] if runlog.entries else float("nan")
    print(f"trained {trainer.epoch} epochs; best validation PCK {best:.4f}; checkpoints in {args.out}")
    return EXIT_OK


def _truth_poses(anns):
    out = []
    for a in anns:
        box = D.crop_box(a)
        out.append(Pose(D.to_crop(a.joints, box), visibility=a.visibility))
    return out


def _print_tables(preds, truths, num_joints, args):
    names = list(desk_config().joint_names) if num_joints == 8 else None
    metrics = args.metric or (["PCKh"] if num_joints == 16 else ["PCK", "PCP"])
    for metric in metrics:
        cfg = metric_for(num_joints, metric, args.threshold)
        res = evaluate(preds, truths, cfg)
        cols = names if names else list(cfg.joint_names)
        if metric == "PCP":
            cols = [f"{cols[a]}-{cols[b]}" for a, b in cfg.skeleton]
        label = f"{metric}@{cfg.threshold:g}"
        print(metric_table(res, cols, label=label, row=args.label, grouped=args.grouped), end="")


def cmd_eval(args):
    if args.pred and not args.truth:
        raise ConfigError("--pred needs --truth")
    if not args.pred and not (args.checkpoint and args.data):
        raise ConfigError("eval needs --pred/--truth or --checkpoint/--data")
    truth_anns = D.load_annotations(args.truth if args.pred else args.data)
    truths = _truth_poses(truth_anns)
    if args.pred:
        pred_anns = D.load_annotations(args.pred)
        if len(pred_anns) != len(truth_anns):
            raise ConfigError(f"{len(pred_anns)} predictions for {len(truth_anns)} annotations")
        # normalise predictions with the truth crop so both live in the same frame
        preds = [Pose(D.to_crop(p.joints, D.crop_box(t))) for p, t in zip(pred_anns, truth_anns)]
    else:
        model, _, _ = load_checkpoint(args.checkpoint)
        samples = _dataset(args.data, model.cfg)
        preds, _ = predict_poses(model, samples)
        truths = [p for _, p in samples]
    _print_tables(preds, truths, truths[0].num_joints, args)
    return EXIT_OK


def cmd_predict(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    anns = D.load_annotations(args.data, cfg.num_joints)
    if args.limit is not None:
        anns = anns[: args.limit]
    base = os.path.dirname(os.path.abspath(args.data))
    os.makedirs(os.path.join(args.out, "overlays"), exist_ok=True)
    if args.mosaics:
        os.makedirs(os.path.join(args.out, "mosaics"), exist_ok=True)
    limbs = desk_config().skeleton if cfg.num_joints == 8 else metric_for(cfg.num_joints).skeleton
    model.eval()
    records = []
    for i, ann in enumerate(anns):
        crop, _ = D.crop_normalize(D.read_image(os.path.join(base, ann.image)), ann, cfg.input_size)
        preds = model.forward(crop[None])
        pose = preds.final.pose(0)
        pixels = D.from_crop(pose.joints, D.crop_box(ann))
        rec = D.Annotation(ann.image, pixels, np.ones(cfg.num_joints, bool), ann.center, ann.scale)
        doc = json.loads(rec.to_json())
        doc["normalized"] = [float(v) for v in pose.joints.reshape(-1)]
        doc["probabilities"] = [float(v) for v in pose.probabilities]
        records.append(json.dumps(doc))
        save_png(os.path.join(args.out, "overlays", f"{i:06d}.png"), overlay(crop, pose, limbs, args.scale))
        if args.mosaics:
            for k, blk in enumerate(preds.blocks):
                mosaic = heatmap_mosaic(blk.heat.data[0], crop, cols=cfg.num_joints)
                save_png(os.path.join(args.out, "mosaics", f"{i:06d}_block{k + 1}.png"), mosaic)
    with open(os.path.join(args.out, "predictions.jsonl"), "w") as fh:
        fh.write("".join(r + "\n" for r in records))
    print(f"wrote {len(records)} predictions to {os.path.join(args.out, 'predictions.jsonl')}")
    return EXIT_OK


def cmd_gradcheck(args):
    load_config(args)
    results = run_suite(instances=args.instances, seed=args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<30} max_rel_err={r.max_error:.3e} tol={r.tolerance:g} n={r.instances} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="desk", help="model preset: desk or full")
    common.add_argument("--config", help="JSON file with model/train/synth sections")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    common.add_argument("--quiet", action="store_true", help="suppress per-epoch logging")

    p = argparse.ArgumentParser(prog="posereg", description="Soft-argmax pose regression toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic blob-skeleton dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2200)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True, help="annotations.jsonl")
    t.add_argument("--val", help="validation annotations (default: hold out train.val_fraction)")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to resume (weights, optimizer and schedule state)")
    t.add_argument("--init-from", help="checkpoint whose weights initialise a fresh run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="print metric tables as CSV")
    e.add_argument("--pred", help="predicted poses (annotation schema)")
    e.add_argument("--truth", help="ground-truth annotations")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--metric", action="append", choices=["PCK", "PCKh", "PCP"])
    e.add_argument("--threshold", type=float)
    e.add_argument("--grouped", action="store_true", help="columns by joint/limb group")
    e.add_argument("--label", default="result", help="row label")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", parents=[common], help="pose file, overlays and heat-map mosaics")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--limit", type=int)
    r.add_argument("--scale", type=int, default=4, help="overlay upscaling factor")
    r.add_argument("--mosaics", action="store_true")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, D.AnnotationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
