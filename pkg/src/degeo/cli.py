"""Command-line entry point: ``degeo detect|synth|train|eval|render``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import detector, kernels, pipeline, refine, synth
from .evaluation import STRATA, apm_baseline, confusion, stratum, write_metrics
from .lineage import FormatError, parse_file, write_file
from .model import Hyperparams, read_hyperparams
from .render import render_svg
from .sampler import PARAMS, ChainConfig
from .scoring import score_tree

OUTPUT_ENV = "DEGEO_OUTPUT_DIR"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(args) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _chain_config(args) -> ChainConfig:
    return ChainConfig(n_chains=args.chains, max_iterations=args.iterations,
                       burn_in=args.burn_in, thinning=args.thinning, rng_seed=args.seed,
                       rhat_tolerance=args.rhat_tol, rho_grid_size=args.rho_grid,
                       n_jobs=args.jobs)


def _config_dict(config: ChainConfig) -> dict:
    return {k: getattr(config, k) for k in config.__dataclass_fields__ if k != "n_jobs"}


def _write_manifest(out: Path, payload: dict) -> None:
    with open(out / MANIFEST, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _load_model(path):
    if path:
        with open(path) as fh:
            return detector.read_model(fh)
    return detector.load_default_model()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _threshold(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("threshold must lie in [0, 1]")
    return v


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned value")
    return v


# -- detect ----------------------------------------------------------------------

BRANCH_COLUMNS = (["round", "M_star", "accepted", "svr_output", "posterior_prob_M"]
                  + list(PARAMS) + ["iterations"] + [f"rhat_{p}" for p in PARAMS]
                  + list(detector.BranchFeatures.names()))


def write_branch_table(run: pipeline.TreeRun, stream) -> None:
    stream.write(",".join(BRANCH_COLUMNS) + "\n")
    for k, b in enumerate(run.detection.branches):
        feats = b.features.vector().tolist() if b.features is not None else [None] * 7
        row = ([k, b.M_star, b.accepted, b.svr_output, b.posterior_prob_M]
               + [b.params()[p] for p in PARAMS] + [b.iterations]
               + [b.rhat.get(p) for p in PARAMS] + feats)
        stream.write(",".join(_fmt(v) for v in row) + "\n")


def _branch_summary(b) -> dict:
    return {"M_star": b.M_star, "accepted": b.accepted, "svr_output": b.svr_output,
            "posterior_prob_M": b.posterior_prob_M, "params": b.params(),
            "rhat": b.rhat, "iterations": b.iterations}


def cmd_detect(args) -> int:
    out = _out_dir(args)
    config = _chain_config(args)
    if args.stopping == "svr":
        stopping = detector.SvrStopping(_load_model(args.model), args.threshold)
    else:
        stopping = detector.BetaStopping()
    manifest = {"command": "detect", "backend": kernels.BACKEND, "chain_config": _config_dict(config),
                "column": args.column, "threshold": args.threshold, "stopping": args.stopping,
                "model": args.model or "default", "whole_tree": args.whole_tree, "files": []}
    stems = set()
    status = 0
    for path in args.inputs:
        entry = {"input": str(path)}
        manifest["files"].append(entry)
        stem = Path(path).stem
        if stem in stems:
            entry["error"] = f"duplicate input name {stem!r}"
            status = 1
            continue
        stems.add(stem)
        try:
            entry["sha256"] = _sha256(path)
            lineage = parse_file(path, args.column)
        except FileNotFoundError:
            entry["error"] = f"input file not found: {path}"
            print(f"error: input file not found: {path}", file=sys.stderr)
            status = 1
            continue
        except (FormatError, ValueError) as exc:
            entry["error"] = f"{path}: {exc}"
            print(f"error: {path}: {exc}", file=sys.stderr)
            status = 1
            continue
        scores = score_tree(lineage)
        hyper = Hyperparams.from_scores(scores.score_array())
        if args.hyper:
            hyper = read_hyperparams(args.hyper, hyper)
        entry["hyperparams"] = dict(hyper.__dict__)
        run = pipeline.run_tree(scores, stopping, config, hyper, whole_tree=args.whole_tree)
        entry["branches"] = [_branch_summary(b) for b in run.detection.branches]
        entry["complete"] = run.detection.complete
        if not run.detection.complete:
            entry["error"] = run.detection.error
            print(f"error: {path}: {run.detection.error}", file=sys.stderr)
            status = 1
        if run.refine_error:
            entry["error"] = run.refine_error
            print(f"error: {path}: {run.refine_error}", file=sys.stderr)
            status = 1
        with open(out / f"{stem}.branches.csv", "w") as fh:
            write_branch_table(run, fh)
        report = run.report or refine.OnsetReport(None, [])
        with open(out / f"{stem}.onsets.csv", "w") as fh:
            report.write_points(fh)
        with open(out / f"{stem}.segments.csv", "w") as fh:
            report.write_segments(fh)
        if report.noise is not None:
            entry["noise"] = {"mu_hat": report.noise.mu_hat,
                              "sigma_hat_sq": report.noise.sigma_hat_sq,
                              "extreme_threshold": report.noise.extreme_threshold}
    _write_manifest(out, manifest)
    return status


# -- synth -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.type not in (1, 2, 3):
        raise UsageError(f"data set type must be 1, 2 or 3, got {args.type}")
    out = _out_dir(args)
    tpl = synth.make_template(synth.TemplateSpec(seed=args.template_seed))
    if args.type == 1:
        data = [(synth.score_tree_as_lineage(t), t, g)
                for t, g in synth.gen_mimic_score_trees(tpl, args.count, args.seed,
                                                        balanced=args.balanced)]
    elif args.type == 2:
        topo = synth.default_topology(args.template_seed)
        data = [(synth.score_tree_as_lineage(t), t, g)
                for t, g in synth.gen_model_trees(topo, args.count, args.seed)]
    else:
        data = [(lin, lin, g) for lin, g in
                synth.gen_planted_timeseries_trees(tpl, args.count, args.seed,
                                                   balanced=args.balanced)]
    width = max(3, len(str(max(args.count - 1, 0))))
    files = []
    for i, (lin, topo, truth) in enumerate(data):
        name = f"ds{args.type}_{i:0{width}d}"
        write_file(lin, out / f"{name}.csv", args.column)
        synth.write_truth(truth, topo, out / f"{name}.truth.csv")
        files.append({"tree": f"{name}.csv", "truth": f"{name}.truth.csv",
                      "roots": sorted(truth.roots), "onsets": truth.onsets,
                      "params": truth.params})
    _write_manifest(out, {"command": "synth", "type": args.type, "count": args.count,
                          "seed": args.seed, "template_seed": args.template_seed,
                          "balanced": args.balanced, "files": files})
    return 0


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    config = _chain_config(args)
    tpl = synth.make_template(synth.TemplateSpec(seed=args.template_seed))
    data = synth.gen_mimic_score_trees(tpl, args.count, args.seed)
    try:
        trained = pipeline.train_stopping_model(
            data, config, detector.SvrConfig(epsilon=args.epsilon, C=args.C))
    except detector.TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    Path(args.model_out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.model_out, "w") as fh:
        detector.write_model(trained.model, fh)
    labels = [lab for _, lab in trained.training.rows]
    report = {"command": "train", "count": args.count, "seed": args.seed,
              "template_seed": args.template_seed, "chain_config": _config_dict(config),
              "rows": len(labels), "positive": int(sum(labels)),
              "selected_threshold": trained.threshold,
              "false_rate_by_threshold": {f"{k:.2f}": v for k, v in trained.rates.items()},
              "failures": trained.training.failures, "model": str(args.model_out)}
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    print(f"selected threshold {trained.threshold:.2f}; "
          f"{len(labels)} rows ({sum(labels)} positive)")
    return 0


# -- eval ------------------------------------------------------------------------

def _eval_inputs(args):
    """(name, LineageTree, truth) triples from a synth directory or generated."""
    if args.inputs:
        d = Path(args.inputs)
        for tree_path in sorted(d.glob("*.csv")):
            if tree_path.name.endswith(".truth.csv"):
                continue
            truth_path = tree_path.with_name(tree_path.stem + ".truth.csv")
            if not truth_path.exists():
                raise FileNotFoundError(f"missing truth side-car for {tree_path}")
            truth, _ = synth.read_truth(truth_path)
            yield tree_path.stem, parse_file(tree_path, args.column), truth
    else:
        tpl = synth.make_template(synth.TemplateSpec(seed=args.template_seed))
        for i, (lin, truth) in enumerate(synth.gen_planted_timeseries_trees(
                tpl, args.count, args.seed, balanced=args.balanced)):
            yield f"ds3_{i:03d}", lin, truth


def evaluate_planted(items, stopping, config, quantile=0.95):
    """Cell-level confusion per stratum for DEGEO and the global-threshold baseline."""
    per = {}
    failures = []
    for name, lin, truth in items:
        run = pipeline.run_tree(lin, stopping, config)
        if not run.detection.complete or run.refine_error:
            failures.append({"tree": name, "error": run.detection.error or run.refine_error})
        universe = set(run.scores.names)
        truth_cells = truth.expressing(run.scores)
        key = stratum(len(truth.roots))
        for method, pred in (("DEGEO", pipeline.predicted_cells(run)),
                             ("APM", apm_baseline(run.scores, quantile))):
            c = confusion(pred, truth_cells, universe)
            prev = per.get((key, method))
            per[(key, method)] = c if prev is None else prev + c
    return per, failures


def cmd_eval(args) -> int:
    out = _out_dir(args)
    config = _chain_config(args)
    stopping = detector.SvrStopping(_load_model(args.model), args.threshold)
    try:
        per, failures = evaluate_planted(_eval_inputs(args), stopping, config, args.quantile)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rows = []
    keys = [s for s in STRATA] + sorted({k for k, _ in per} - set(STRATA))
    for method in ("DEGEO", "APM"):
        total = None
        for key in keys:
            c = per.get((key, method))
            if c is None:
                continue
            total = c if total is None else total + c
            rows.append(_metric_row(key, method, c))
        if total is not None:
            rows.append(_metric_row("Overall", method, total))
    with open(out / "metrics.csv", "w") as fh:
        write_metrics(rows, fh)
    _write_manifest(out, {"command": "eval", "chain_config": _config_dict(config),
                          "quantile": args.quantile, "threshold": args.threshold,
                          "inputs": args.inputs, "seed": args.seed, "count": args.count,
                          "failures": failures})
    return 1 if failures else 0


def _metric_row(key, method, c):
    return {"experiment": "planted", "stratum": key, "method": method,
            "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
            "TPR": c.tpr, "FPR": c.fpr, "PPV": c.ppv}


# -- render ----------------------------------------------------------------------

def _read_rows(path, where):
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if where(row)]


def cmd_render(args) -> int:
    try:
        tree = parse_file(args.input, args.column)
    except FileNotFoundError:
        print(f"error: input file not found: {args.input}", file=sys.stderr)
        return 1
    accepted, onsets = [], []
    if args.branches:
        accepted = [r["M_star"] for r in _read_rows(args.branches,
                                                    lambda r: r["accepted"] == "1")]
    if args.onsets:
        onsets = [(r["cell"], int(r["time"])) for r in _read_rows(
            args.onsets, lambda r: r["kind"] == "onset")]
    svg = render_svg(tree, accepted, onsets, title=Path(args.input).stem)
    if args.output == "-":
        sys.stdout.write(svg)
    else:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        with open(args.output, "w") as fh:
            fh.write(svg)
    return 0


# -- argument parsing --------------------------------------------------------------

def _chain_args(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--seed", type=_seed, default=0)
    g.add_argument("--chains", type=int, default=4)
    g.add_argument("--iterations", type=int, default=5000)
    g.add_argument("--burn-in", type=int, default=1000)
    g.add_argument("--thinning", type=int, default=1)
    g.add_argument("--rhat-tol", type=float, default=0.2)
    g.add_argument("--rho-grid", type=int, default=200)
    g.add_argument("--jobs", type=int, default=None, help="worker threads for the chains")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="degeo",
                                     description="Gene-expression onset detection on cell lineages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect expression branches and onsets")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--column", default="blot")
    p.add_argument("--model", help="SVR model file (default: the shipped model)")
    p.add_argument("--threshold", type=_threshold, default=detector.DEFAULT_THRESHOLD)
    p.add_argument("--stopping", choices=("svr", "beta"), default="svr")
    p.add_argument("--hyper", help="key=value hyperparameter file")
    p.add_argument("--whole-tree", action="store_true",
                   help="skip branch detection; search onsets on every path")
    p.add_argument("--out", default="degeo_out")
    _chain_args(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("synth", help="generate synthetic data sets")
    p.add_argument("--type", type=int, required=True, help="1: mimic, 2: model, 3: planted")
    p.add_argument("--count", type=int, default=120)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--template-seed", type=_seed, default=0)
    p.add_argument("--balanced", action="store_true",
                   help="cycle the branch count instead of drawing it")
    p.add_argument("--column", default="blot")
    p.add_argument("--out", default="degeo_synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the stopping classifier on mimic trees")
    p.add_argument("--count", type=int, default=120)
    p.add_argument("--template-seed", type=_seed, default=0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--C", type=float, default=10.0)
    p.add_argument("--model-out", default="degeo_svr.txt")
    p.add_argument("--report", help="write a JSON training report here")
    _chain_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare DEGEO and the global-threshold baseline")
    p.add_argument("--inputs", help="directory written by 'degeo synth --type 3'")
    p.add_argument("--count", type=int, default=120)
    p.add_argument("--template-seed", type=_seed, default=0)
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--column", default="blot")
    p.add_argument("--model")
    p.add_argument("--threshold", type=_threshold, default=detector.DEFAULT_THRESHOLD)
    p.add_argument("--quantile", type=float, default=0.95)
    p.add_argument("--out", default="degeo_eval")
    _chain_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="draw a lineage as SVG")
    p.add_argument("input")
    p.add_argument("--column", default="blot")
    p.add_argument("--branches", help="branch table from 'degeo detect'")
    p.add_argument("--onsets", help="onset table from 'degeo detect'")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"degeo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
