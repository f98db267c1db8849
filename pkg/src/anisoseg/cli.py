"""Command line entry point: ``anisoseg <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as exp
from .fusion import fuse_planes, largest_component
from .hpo import SearchSpace, run_hpo, synthetic_objective
from .metrics import regional_metrics
from .phantom import AcquisitionSpec, PhantomSpec, generate_phantom, simulate_acquisition
from .volume import Grid3, Mask, read_vraw, write_vraw

log = logging.getLogger("anisoseg")


def _read_mask(path) -> Mask:
    obj = read_vraw(path)
    if not isinstance(obj, Mask):
        raise SystemExit(f"{path}: expected a mask, found a volume")
    return obj


def cmd_fuse(args) -> int:
    target = Grid3.from_dict(json.loads(Path(args.target).read_text()))
    fused = fuse_planes([_read_mask(p) for p in args.masks], target)
    write_vraw(args.out, fused)
    print(f"fused {len(args.masks)} masks -> {args.out} ({fused.count()} foreground voxels)")
    return 0


def cmd_postproc(args) -> int:
    m = _read_mask(args.mask)
    kept = largest_component(m, args.connectivity)
    write_vraw(args.out, kept)
    print(f"kept {kept.count()} of {m.count()} foreground voxels -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if len(args.pred) != len(args.ref):
        raise SystemExit("--pred and --ref need the same number of files")
    names = args.case or [Path(p).stem for p in args.pred]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["case", "region", "dsc", "abd_mm", "hd95_mm", "flags"])
        for name, p, r in zip(names, args.pred, args.ref):
            rep = regional_metrics(_read_mask(p), _read_mask(r), name, not args.apex_high)
            for row in rep.regions:
                w.writerow([name, row.region, repr(row.dsc), repr(row.abd_mm), repr(row.hd95_mm), row.flags])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_hpo(args) -> int:
    space = SearchSpace.from_dict(json.loads(Path(args.space).read_text())) if args.space else SearchSpace()
    if args.objective == "synthetic":
        objective = synthetic_objective
    else:
        cfg = exp.ExperimentConfig.from_file(args.config) if args.config else exp.ExperimentConfig()
        objective = exp.training_objective(cfg, args.variant)
    res = run_hpo(objective, space, args.iterations, args.n, args.min_budget, args.seed, args.ledger, use_model=not args.no_model)
    print(json.dumps({"best": res.best.config, "loss": res.best.loss, "budget": res.best.budget, "trials": len(res.trials)}, indent=2))
    return 0


def cmd_phantom_gen(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    acq = raw.pop("acquisition", {})
    n_cases = int(raw.pop("n_cases", args.n))
    spec = PhantomSpec.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n_cases):
        case = out / f"case{i:03d}"
        case.mkdir(exist_ok=True)
        iso, mask = generate_phantom(spec.with_seed(spec.seed + i))
        write_vraw(case / "iso", iso)
        write_vraw(case / "mask", mask)
        for p, plane in enumerate(("axial", "sagittal", "coronal")):
            a = AcquisitionSpec(plane, **acq)
            write_vraw(case / plane, simulate_acquisition(iso, a, np.random.default_rng([spec.seed + i, p + 1])))
    print(f"wrote {n_cases} phantoms to {out}")
    return 0


def cmd_experiment_run(args) -> int:
    cfg = exp.ExperimentConfig.from_file(args.config) if args.config else exp.ExperimentConfig()
    res = exp.run_experiment(cfg, args.out)
    whole = {a: round(v["whole"]["dsc"], 4) for a, v in res.summary["means"].items()}
    print(f"mean whole-gland DSC: {whole}")
    for s in res.significance:
        if s["region"] == "whole" and s["metric"] == "dsc":
            print(f"  {s['comparison']}: p = {s['p_value']:.4g}")
    if res.summary["failures"]:
        print(f"{len(res.summary['failures'])} failures recorded in summary.json")
    return 0


def cmd_report(args) -> int:
    info = exp.emit_report(args.input, args.out)
    print(f"wrote {info['summary']} and {info['svg']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anisoseg", description="Anisotropic multi-stream segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fuse", help="fuse per-plane masks by averaging signed distance fields")
    s.add_argument("masks", nargs="+", help="vraw mask headers")
    s.add_argument("--target", required=True, help="target grid JSON (dims, spacing_mm, origin_mm)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("postproc", help="keep the largest connected component")
    s.add_argument("mask")
    s.add_argument("--out", required=True)
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.set_defaults(func=cmd_postproc)

    s = sub.add_parser("evaluate", help="regional DSC, ABD and 95-HD")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--ref", nargs="+", required=True)
    s.add_argument("--case", nargs="*", help="case names, defaults to the prediction file stems")
    s.add_argument("--apex-high", action="store_true", help="apex lies at the high end of the slice axis")
    s.add_argument("--out", help="CSV path, stdout when omitted")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("hpo", help="hyperparameter search")
    s.add_argument("--space", help="search space JSON")
    s.add_argument("--iterations", type=int, default=5)
    s.add_argument("--n", type=int, default=8, help="configurations per iteration")
    s.add_argument("--min-budget", type=float, default=5, help="epochs on the first rung")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ledger", default="hpo_ledger.jsonl")
    s.add_argument("--objective", choices=("synthetic", "phantom"), default="synthetic")
    s.add_argument("--config", help="experiment config JSON for the phantom objective")
    s.add_argument("--variant", choices=("single", "dual", "triple"), default="triple")
    s.add_argument("--no-model", action="store_true", help="random sampling only")
    s.set_defaults(func=cmd_hpo)

    ph = sub.add_parser("phantom", help="synthetic data")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    s = phs.add_parser("gen", help="generate phantoms and their thick-slice acquisitions")
    s.add_argument("--spec", help="PhantomSpec JSON; optional keys n_cases and acquisition")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom_gen)

    ex = sub.add_parser("experiment", help="end-to-end comparison")
    exs = ex.add_subparsers(dest="experiment_command", required=True)
    s = exs.add_parser("run")
    s.add_argument("--config", help="ExperimentConfig JSON, defaults when omitted")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment_run)

    s = sub.add_parser("report", help="quartile table and box plots from results.csv")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
