"""``socs`` command-line entry point.

Subcommands: synth-gen, socs-build, train, eval, fitpose, ablate.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from socs.category import (
    InstanceRecord,
    build_instance_warp,
    identity_warp,
    list_instances,
    load_instance,
    load_template,
    save_instance,
    save_template,
)
from socs.config import ExperimentConfig, load_config, save_config
from socs.data import build_dataset, save_dataset
from socs.errors import ConfigError, DataError, SocsError
from socs.geom import read_json, write_json
from socs.posefit import CorrespondenceSet, RansacConfig, fit_robust

log = logging.getLogger("socs")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "label_space", None):
        cfg = replace(cfg, label_space=args.label_space)
    if args.out:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def cmd_synth_gen(args) -> int:
    cfg = _config(args)
    ds = build_dataset(cfg.dataset)
    out = Path(cfg.out_dir)
    from socs.category import BinCodec

    digest = save_dataset(ds, out, cfg.label_space, BinCodec(cfg.model.num_bins))
    save_config(cfg, out / "config.yaml")
    print(json.dumps({"manifest_sha256": digest, "instances": len(ds.instances), "views": len(ds.views),
                      "spread": ds.spread, "variation_train": ds.variation("train")}))
    return 0


def cmd_socs_build(args) -> int:
    root = Path(args.category_dir)
    if (root / "category").is_dir():
        root = root / "category"
    if not (root / "category.json").is_file():
        raise DataError(f"{root}: no category bundle (category.json missing)")
    template, codec, meta = load_template(root)
    space = args.label_space or meta.get("label_space", "socs")
    worst, count = 0.0, 0
    for iid in list_instances(root):
        rec = load_instance(root, iid)
        warp = build_instance_warp(rec.keypoints, template) if space == "socs" else identity_warp(rec.keypoints)
        rec = InstanceRecord(rec.shape, rec.keypoints, warp, rec.gt_pose, iid)
        if space == "socs":
            worst = max(worst, rec.check(template))
        save_instance(rec, root)
        count += 1
    save_template(template, codec, root, space)
    print(json.dumps({"label_space": space, "instances": count, "max_keypoint_residual": worst}))
    return 0


def cmd_train(args) -> int:
    from socs.checkpoint import save_checkpoint
    from socs.experiment import cached_dataset, fit_model

    cfg = _config(args)
    out = Path(cfg.out_dir)
    save_config(cfg, out / "config.yaml")
    ds = cached_dataset(cfg.dataset)
    model, rows = fit_model(cfg, ds, out)
    save_checkpoint(model, out / "last.ckpt", {"label_space": cfg.label_space})
    print(json.dumps({"steps": len(rows), "loss_socs_end": rows[-1]["loss_socs"],
                      "checkpoint": str(out / "last.ckpt")}))
    return 0


def cmd_eval(args) -> int:
    from socs.checkpoint import load_checkpoint
    from socs.experiment import cached_dataset, eval_views, pose_metrics

    cfg = _config(args)
    model = None
    if not args.oracle:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle for ground-truth label injection)")
        model = load_checkpoint(args.checkpoint)
        cfg = replace(cfg, model=model.config)
    ds = cached_dataset(cfg.dataset)
    views = eval_views(ds, cfg, args.split)
    if not views:
        from socs.errors import EmptyEval

        raise EmptyEval(f"split {args.split!r} has no views")
    out = Path(cfg.out_dir)
    res = pose_metrics(cfg, ds, views, model, out)
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_fitpose(args) -> int:
    path = Path(args.correspondences)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    C = CorrespondenceSet.from_json(read_json(path))
    fit = fit_robust(C, RansacConfig(args.iters, args.threshold, 4, args.seed if args.seed is not None else 0))
    out = fit.to_json()
    if args.out:
        write_json(Path(args.out) / "fit.json", out)
    print(json.dumps(out))
    return 0


def _parse_axes(specs) -> dict | None:
    if not specs:
        return None
    axes = {}
    conv = {"on": True, "off": False, "true": True, "false": False}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"axis must look like name=v1,v2: {spec!r}")
        name, vals = spec.split("=", 1)
        parsed = []
        for v in vals.split(","):
            v = v.strip()
            if v.lower() in conv:
                parsed.append(conv[v.lower()])
            elif v.isdigit():
                parsed.append(int(v))
            else:
                parsed.append(v)
        axes[name.strip()] = tuple(parsed)
    from socs.experiment import GRID_AXES

    unknown = set(axes) - set(GRID_AXES)
    if unknown:
        raise ConfigError(f"unknown ablation axes {sorted(unknown)}; choose from {sorted(GRID_AXES)}")
    return axes


def cmd_ablate(args) -> int:
    from socs.experiment import ablate

    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = ablate(cfg, _parse_axes(args.axis), seeds, cfg.out_dir, pose=not args.no_pose)
    print(json.dumps({"rows": len(rows), "table": str(Path(cfg.out_dir) / "ablation.csv")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="socs", description="Category-level pose estimation with SOCS labels.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, label=True):
        sp.add_argument("--config", help="experiment YAML (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="reseed dataset, model and training")
        sp.add_argument("--out", help="output directory")
        if label:
            sp.add_argument("--label-space", choices=("socs", "nocs"))
        return sp

    common(sub.add_parser("synth-gen", help="generate a synthetic dataset")).set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("socs-build", help="fit per-instance warps for a category bundle")
    sp.add_argument("category_dir")
    sp.add_argument("--label-space", choices=("socs", "nocs"))
    sp.set_defaults(func=cmd_socs_build)

    common(sub.add_parser("train", help="train a network")).set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="pose metrics on a split"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="inject ground-truth labels instead of predictions")
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("fitpose", help="robust anisotropic fit on a correspondence file")
    sp.add_argument("correspondences", help='JSON with "socs", "camera" and optional "confidence"')
    sp.add_argument("--threshold", type=float, default=0.02)
    sp.add_argument("--iters", type=int, default=256)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fitpose)

    sp = common(sub.add_parser("ablate", help="run an ablation grid"))
    sp.add_argument("--axis", action="append", help="override an axis, e.g. sampling=P,SI or gp=on,off")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--no-pose", action="store_true", help="skip pose fitting per cell")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SocsError as exc:
        print(f"socs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"socs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
