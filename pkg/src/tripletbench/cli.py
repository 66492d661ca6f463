"""Command-line entry point: ``tripletbench <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 usage error. Every command
writes ``manifest.json`` (inputs with hashes, configuration, seed, tool
version) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import (
    AlignmentError,
    FormatError,
    causality_audit,
    discover_runs,
    parse_ground_truth,
    resolve_threads,
    validate_submission,
    write_run,
)
from .ensemble import (
    DEEP_VARIANTS,
    VARIANTS,
    combine_average,
    combine_soft_vote,
    combine_weighted_average,
    compute_performance_weights,
    load_model,
    select_models,
    train_deep_ensemble,
    apply_deep_ensemble,
)
from .metrics import DEFAULT_KS, evaluate_suite
from .postprocess import DEFAULT_RARE, adjust_run, class_frequencies, load_frequencies
from .reporting import build_leaderboard, emit_tables, load_reports
from .stability import stability_matrix
from .taxonomy import TASKS, load_taxonomy

log = logging.getLogger("tripletbench")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(b"\0")
            h.update(f.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, args, inputs: dict, outputs: list):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "tripletbench",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {name: {"path": str(p), "sha256": _hash_path(Path(p))} for name, p in sorted(inputs.items()) if p},
        "outputs": sorted(str(Path(o).relative_to(out)) for o in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require(args, *names):
    for name in names:
        value = getattr(args, name)
        flag = "--" + name.replace("_", "-")
        if value is None:
            raise UsageError(f"{flag} is required")
        if not Path(value).exists():
            raise UsageError(f"{flag}: {value} does not exist")


def _parse_ks(text):
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K list {text!r}") from None
    if not ks:
        raise argparse.ArgumentTypeError("empty K list")
    return ks


def _load_runs(args, num_classes=None):
    runs = discover_runs(args.runs, num_classes, threads=args.threads)
    teams = getattr(args, "teams", None)
    if teams:
        wanted = [t.strip() for t in teams.split(",")]
        by_id = {r.team_id: r for r in runs}
        unknown = [t for t in wanted if t not in by_id]
        if unknown:
            raise UsageError(f"--teams: unknown team(s) {unknown}")
        runs = [by_id[t] for t in wanted]
    return runs


# ------------------------------------------------------------------ commands

def cmd_validate(args) -> int:
    _require(args, "runs", "gt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt = parse_ground_truth(args.gt, threads=args.threads)
    num_classes = args.num_classes
    if num_classes is None and args.taxonomy:
        num_classes = load_taxonomy(args.taxonomy).num_triplets
    if num_classes is None:
        num_classes = next(iter(gt.videos.values())).shape[1]
    expected = gt.frame_counts()
    status, outputs = EXIT_OK, []
    prefixes = {}
    if args.prefix_runs:
        prefixes = {r.team_id: r for r in discover_runs(args.prefix_runs, threads=args.threads)}
    for run in discover_runs(args.runs, threads=args.threads):
        report = validate_submission(run, expected, num_classes)
        if run.team_id in prefixes:
            report.findings += causality_audit(run, prefixes[run.team_id], args.tol).findings
        path = out / f"validation_{run.team_id}.json"
        report.to_json(path)
        outputs.append(path)
        log.info("%s: %s (%d findings)", run.team_id, "pass" if report.passed else "FAIL", len(report.findings))
        if not report.passed:
            status = EXIT_INVALID
    outputs.append(write_manifest(out, args, {"runs": args.runs, "gt": args.gt, "taxonomy": args.taxonomy, "prefix_runs": args.prefix_runs}, outputs))
    return status


def cmd_eval(args) -> int:
    _require(args, "runs", "gt", "taxonomy")
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    tax = load_taxonomy(args.taxonomy)
    gt = parse_ground_truth(args.gt, tax.num_triplets, threads=args.threads)
    outputs = []
    try:
        runs = _load_runs(args, tax.num_triplets)
        for run in runs:
            report = evaluate_suite(run, gt, tax, apply_mask=args.mask, ks=args.topk, threads=args.threads)
            path = out / "reports" / f"{run.team_id}.json"
            report.to_json(path)
            outputs.append(path)
            log.info("%s: AP_IVT %.2f", run.team_id, 100 * report.mean_ap("IVT"))
    except (AlignmentError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    finally:
        outputs.append(write_manifest(out, args, {"runs": args.runs, "gt": args.gt, "taxonomy": args.taxonomy}, outputs))
    return EXIT_OK


def cmd_leaderboard(args) -> int:
    _require(args, "reports")
    out = Path(args.out)
    reports = load_reports(args.reports)
    labels = None
    if args.taxonomy:
        tax = load_taxonomy(args.taxonomy)
        labels = {t: tax.class_labels(t) for t in TASKS}
    lb = build_leaderboard(reports, args.sort, labels)
    outputs = emit_tables(lb, out)
    write_manifest(out, args, {"reports": args.reports, "taxonomy": args.taxonomy}, outputs)
    return EXIT_OK


def _ap_scores(args):
    if not args.reports:
        return None
    return {t: 100.0 * r.mean_ap("IVT") for t, r in load_reports(args.reports).items()}


def cmd_ensemble(args) -> int:
    _require(args, "runs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = _load_runs(args)
    scores = _ap_scores(args)
    if scores is not None and not args.teams:
        chosen = select_models({t: s for t, s in scores.items() if t in {r.team_id for r in runs}}, args.threshold_ap)
        if not chosen:
            raise UsageError(f"--threshold-ap: no run scores above {args.threshold_ap}")
        by_id = {r.team_id: r for r in runs}
        runs = [by_id[t] for t in chosen]
    log.info("ensembling %s", [r.team_id for r in runs])
    team_id = f"ensemble-{args.variant}"
    extra = {}
    outputs = []

    if args.variant == "average":
        combined = combine_average(runs, team_id)
    elif args.variant == "soft_vote":
        combined = combine_soft_vote(runs, args.threshold, team_id)
    elif args.variant == "weighted_average":
        if args.weights:
            weights = np.array([float(w) for w in args.weights.split(",")])
        else:
            _require(args, "calibration", "taxonomy")
            tax = load_taxonomy(args.taxonomy)
            cal = parse_ground_truth(args.calibration, tax.num_triplets)
            weights = compute_performance_weights(runs, cal, tax, apply_mask=args.mask)
        combined = combine_weighted_average(runs, weights, team_id)
        extra["weights"] = dict(zip([r.team_id for r in runs], weights.tolist()))
    else:
        if args.model:
            _require(args, "model")
            model = load_model(args.model)
        else:
            _require(args, "train_runs", "train_gt")
            train = discover_runs(args.train_runs, threads=args.threads)
            by_id = {r.team_id: r for r in train}
            missing = [r.team_id for r in runs if r.team_id not in by_id]
            if missing:
                raise UsageError(f"--train-runs: no training predictions for {missing}")
            model = train_deep_ensemble(
                [by_id[r.team_id] for r in runs], parse_ground_truth(args.train_gt), args.variant, **_hyper(args)
            )
            model_path = out / "model.json"
            model.save(model_path)
            outputs.append(model_path)
        combined = apply_deep_ensemble(model, runs, team_id)

    run_dir = write_run(combined, out / team_id)
    outputs += sorted(run_dir.glob("*.csv"))
    info = out / "ensemble.json"
    info.write_text(json.dumps({"variant": args.variant, "teams": [r.team_id for r in runs], **extra}, indent=1, sort_keys=True) + "\n")
    outputs.append(info)
    write_manifest(out, args, {
        "runs": args.runs, "reports": args.reports, "calibration": args.calibration, "taxonomy": args.taxonomy,
        "model": args.model, "train_runs": args.train_runs, "train_gt": args.train_gt,
    }, outputs)
    return EXIT_OK


def _hyper(args):
    hyper = {
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "random_state": args.seed,
    }
    if args.variant == "deep":
        hyper["hidden_size"] = args.hidden
    return hyper


def cmd_ensemble_train(args) -> int:
    _require(args, "runs", "gt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = _load_runs(args)
    model = train_deep_ensemble(runs, parse_ground_truth(args.gt), args.variant, **_hyper(args))
    path = out / "model.json"
    model.save(path)
    log.info("trained %s: loss %.5f -> %.5f", args.variant, model.initial_loss_, model.final_loss_)
    write_manifest(out, args, {"runs": args.runs, "gt": args.gt}, [path])
    return EXIT_OK


def cmd_ensemble_apply(args) -> int:
    _require(args, "model", "runs")
    out = Path(args.out)
    model = load_model(args.model)
    runs = _load_runs(args)
    combined = apply_deep_ensemble(model, runs)
    run_dir = write_run(combined, out / combined.team_id)
    write_manifest(out, args, {"model": args.model, "runs": args.runs}, sorted(run_dir.glob("*.csv")))
    return EXIT_OK


def cmd_stability(args) -> int:
    _require(args, "runs", "gt", "taxonomy")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tax = load_taxonomy(args.taxonomy)
    gt = parse_ground_truth(args.gt, tax.num_triplets, threads=args.threads)
    runs = _load_runs(args, tax.num_triplets)
    try:
        sm = stability_matrix(runs, gt, tax, args.n_batches, args.clip_len, args.seed, apply_mask=args.mask)
    except AlignmentError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    outputs = [out / "stability.csv", out / "stability.json"]
    sm.to_csv(outputs[0])
    sm.to_json(outputs[1])
    write_manifest(out, args, {"runs": args.runs, "gt": args.gt, "taxonomy": args.taxonomy}, outputs)
    return EXIT_OK


def cmd_postprocess(args) -> int:
    _require(args, "runs", "taxonomy", "freq")
    out = Path(args.out)
    tax = load_taxonomy(args.taxonomy)
    freq = load_frequencies(args.freq, args.rare)
    if freq.counts.size != tax.num_triplets:
        raise UsageError(f"--freq: {freq.counts.size} counts for {tax.num_triplets} triplets")
    outputs = []
    for run in _load_runs(args, tax.num_triplets):
        adjusted = adjust_run(run, tax, freq, args.verb_weight, args.target_weight)
        run_dir = write_run(adjusted, out / run.team_id)
        outputs += sorted(run_dir.glob("*.csv"))
    write_manifest(out, args, {"runs": args.runs, "taxonomy": args.taxonomy, "freq": args.freq}, outputs)
    return EXIT_OK


def cmd_frequencies(args) -> int:
    _require(args, "gt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    freq = class_frequencies(parse_ground_truth(args.gt, threads=args.threads), args.rare)
    path = out / "frequencies.json"
    freq.save(path)
    write_manifest(out, args, {"gt": args.gt}, [path])
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripletbench", description="Evaluate, ensemble and compare surgical action-triplet recognition runs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads (env TRIPLETBENCH_THREADS overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    def runs_flag(p, required=True):
        p.add_argument("--runs", type=Path, required=required, help="a run directory or a directory of run directories")
        p.add_argument("--teams", help="comma-separated subset of team ids, in order")

    def mask_flag(p):
        p.add_argument("--mask", action=argparse.BooleanOptionalAction, default=True, help="exclude null triplet classes")

    p = sub.add_parser("validate", parents=[common], help="check submissions against the test set layout")
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--taxonomy", type=Path)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--prefix-runs", type=Path, help="re-runs on truncated videos; enables the prefix-rerun causality check (a proxy for a hidden held-out audit)")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", parents=[common], help="score runs on the six AP tasks and topK")
    runs_flag(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--taxonomy", type=Path, required=True)
    mask_flag(p)
    p.add_argument("--topk", type=_parse_ks, default=DEFAULT_KS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("leaderboard", parents=[common], help="aggregate evaluation reports into tables")
    p.add_argument("--reports", type=Path, required=True)
    p.add_argument("--taxonomy", type=Path)
    p.add_argument("--sort", choices=TASKS, default="IVT")
    p.set_defaults(func=cmd_leaderboard)

    def deep_flags(p):
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch-size", type=int, default=256)
        p.add_argument("--hidden", type=int, default=None)
        p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("ensemble", parents=[common], help="combine runs")
    runs_flag(p)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--reports", type=Path, help="evaluation reports used for model selection")
    p.add_argument("--threshold-ap", type=float, default=30.0)
    p.add_argument("--weights", help="explicit comma-separated weights (weighted_average)")
    p.add_argument("--calibration", type=Path, help="ground truth used to derive performance weights")
    p.add_argument("--taxonomy", type=Path)
    mask_flag(p)
    p.add_argument("--threshold", type=float, default=0.5, help="soft-vote presence threshold")
    p.add_argument("--model", type=Path, help="trained model (deep variants)")
    p.add_argument("--train-runs", type=Path)
    p.add_argument("--train-gt", type=Path)
    deep_flags(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("ensemble-train", parents=[common], help="train a deep combiner")
    runs_flag(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--variant", choices=DEEP_VARIANTS, default="deep_weighted")
    deep_flags(p)
    p.set_defaults(func=cmd_ensemble_train)

    p = sub.add_parser("ensemble-apply", parents=[common], help="apply a trained deep combiner")
    runs_flag(p)
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_ensemble_apply)

    p = sub.add_parser("stability", parents=[common], help="pairwise Wilcoxon rank-stability matrix")
    runs_flag(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--taxonomy", type=Path, required=True)
    mask_flag(p)
    p.add_argument("--n-batches", type=int, default=30)
    p.add_argument("--clip-len", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("postprocess", parents=[common], help="rare-class adjustment of runs")
    runs_flag(p)
    p.add_argument("--taxonomy", type=Path, required=True)
    p.add_argument("--freq", type=Path, required=True, help="frequencies.json from the frequencies command")
    p.add_argument("--rare", type=int, default=None, help=f"number of rare classes (default: file's set, else {DEFAULT_RARE})")
    p.add_argument("--verb-weight", type=float, default=0.03)
    p.add_argument("--target-weight", type=float, default=0.97)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("frequencies", parents=[common], help="class frequencies of training labels")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--rare", type=int, default=DEFAULT_RARE)
    p.set_defaults(func=cmd_frequencies)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.threads = resolve_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tripletbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:  # FormatError, AlignmentError, TaxonomyError and friends
        print(f"tripletbench {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
