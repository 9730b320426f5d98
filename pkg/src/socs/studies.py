"""Directional desk-scale studies: label space, query sampling, consistency loss, bin count.

Each study is a list of named runs.  Results land in ``<out>/<study>/<run>/result.json``
and a finished run is not repeated, so an interrupted study resumes where it stopped.

    python3 -m socs.studies --out results/studies [--only labels,sampling]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from socs.config import ExperimentConfig, desk_config, dumps
from socs.experiment import run

log = logging.getLogger(__name__)

SPREADS = (0.3, 0.8, 1.5)        # nested: each instance stretches further from the median
LABEL_SEEDS = (0, 1, 2, 3, 4)
ABLATION_SEEDS = (0, 1, 2)


def _with_spread(cfg: ExperimentConfig, spread: float) -> ExperimentConfig:
    return replace(cfg, dataset=replace(cfg.dataset, spread=spread))


def label_runs(base: ExperimentConfig) -> dict:
    runs = {}
    for spread in SPREADS:
        for seed in LABEL_SEEDS:
            for space in ("socs", "nocs"):
                cfg = replace(_with_spread(base, spread).with_seed(seed), label_space=space)
                runs[f"spread{spread:g}-seed{seed}-{space}"] = cfg
    return runs


def sampling_runs(base: ExperimentConfig) -> dict:
    runs = {}
    occluded = replace(base, dataset=replace(base.dataset, occluder_fraction_test=0.5))
    for seed in ABLATION_SEEDS:
        for kind in ("SI", "SD", "P"):
            cfg = occluded.with_seed(seed)
            runs[f"seed{seed}-{kind}"] = replace(cfg, sampling=replace(cfg.sampling, kind=kind))
    return runs


def consistency_runs(base: ExperimentConfig) -> dict:
    return {f"seed{seed}-cl{int(cl)}": base.with_seed(seed).with_ablation(cl=cl)
            for seed in ABLATION_SEEDS for cl in (True, False)}


def bins_runs(base: ExperimentConfig) -> dict:
    high = _with_spread(base, SPREADS[-1])
    runs = {}
    for seed in ABLATION_SEEDS:
        for bins in (128, 256):
            cfg = high.with_seed(seed)
            runs[f"seed{seed}-bins{bins}"] = replace(cfg, model=replace(cfg.model, num_bins=bins))
    return runs


STUDIES = {
    "labels": (label_runs, {"pose": False, "consistency_probe": False}),
    "sampling": (sampling_runs, {"pose": True, "consistency_probe": False}),
    "consistency": (consistency_runs, {"pose": False, "consistency_probe": True}),
    "bins": (bins_runs, {"pose": False, "consistency_probe": False}),
}


def run_study(name: str, out_dir, base: ExperimentConfig | None = None) -> dict:
    base = base or desk_config()
    make, kwargs = STUDIES[name]
    results = {}
    for run_name, cfg in make(base).items():
        d = Path(out_dir) / name / run_name
        done = d / "result.json"
        if done.is_file() and (d / "config.yaml").is_file() and (d / "config.yaml").read_text() == dumps(cfg):
            results[run_name] = json.loads(done.read_text())
            continue
        log.info("running %s/%s", name, run_name)
        results[run_name] = run(cfg, d, **kwargs)
    (Path(out_dir) / name).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / name / "summary.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def load_study(name: str, out_dir) -> dict | None:
    p = Path(out_dir) / name / "summary.json"
    return json.loads(p.read_text()) if p.is_file() else None


# --- verdicts -------------------------------------------------------------

def labels_verdict(results: dict) -> dict:
    """SOCS < NOCS at the top variation in >= 4/5 seed pairs, and a gap that widens with variation."""
    gaps, variations = [], []
    wins_top = 0
    for spread in SPREADS:
        g = []
        for seed in LABEL_SEEDS:
            s = results[f"spread{spread:g}-seed{seed}-socs"]["coord_error_median"]
            n = results[f"spread{spread:g}-seed{seed}-nocs"]["coord_error_median"]
            g.append(n - s)
            if spread == SPREADS[-1] and s < n:
                wins_top += 1
        gaps.append(float(np.median(g)))
        variations.append(results[f"spread{spread:g}-seed0-socs"]["variation"])
    widening = all(b > a for a, b in zip(gaps, gaps[1:]))
    return {"wins_top": wins_top, "pairs": len(LABEL_SEEDS), "median_gap": gaps, "variation": variations,
            "widening": widening, "pass": wins_top >= 4 and widening}


def sampling_verdict(results: dict) -> dict:
    med = {k: float(np.median([results[f"seed{s}-{k}"]["pose_precision_10deg_2bins"] for s in ABLATION_SEEDS]))
           for k in ("SI", "SD", "P")}
    rot = {k: float(np.median([results[f"seed{s}-{k}"]["pose_rotation_median"] for s in ABLATION_SEEDS]))
           for k in ("SI", "SD", "P")}
    coord = {k: float(np.median([results[f"seed{s}-{k}"]["coord_error_median"] for s in ABLATION_SEEDS]))
             for k in ("SI", "SD", "P")}
    # all arms at zero precision is a tie with no signal, not evidence for SI
    degenerate = max(med.values()) == 0.0
    return {"precision": med, "rotation_median": rot, "coord_error_median": coord, "degenerate": degenerate,
            "pass": not degenerate and med["SI"] >= med["SD"] and med["SI"] >= med["P"]}


def consistency_verdict(results: dict) -> dict:
    on = float(np.median([results[f"seed{s}-cl1"]["feature_distance"] for s in ABLATION_SEEDS]))
    off = float(np.median([results[f"seed{s}-cl0"]["feature_distance"] for s in ABLATION_SEEDS]))
    reduction = 1.0 - on / off
    return {"on": on, "off": off, "reduction": reduction, "pass": reduction >= 0.30}


def bins_verdict(results: dict) -> dict:
    e128 = float(np.median([results[f"seed{s}-bins128"]["coord_error_median"] for s in ABLATION_SEEDS]))
    e256 = float(np.median([results[f"seed{s}-bins256"]["coord_error_median"] for s in ABLATION_SEEDS]))
    loss_drop = all(results[f"seed{s}-bins256"]["loss_socs_end"] < results[f"seed{s}-bins256"]["loss_socs_start"]
                    for s in ABLATION_SEEDS)
    ratio = e256 / e128
    return {"error_128": e128, "error_256": e256, "ratio": ratio, "loss_decreased": loss_drop,
            "pass": loss_drop and abs(ratio - 1.0) <= 0.20}


VERDICTS = {"labels": labels_verdict, "sampling": sampling_verdict,
            "consistency": consistency_verdict, "bins": bins_verdict}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m socs.studies", description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/studies")
    ap.add_argument("--only", default=",".join(STUDIES))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.only.split(","):
        res = run_study(name, args.out)
        print(name, json.dumps(VERDICTS[name](res)), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
