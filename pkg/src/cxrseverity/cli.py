"""Command-line entry point for the severity analysis toolkit.

Subcommands cover the whole workflow: file validation, cohort
summaries, probe fitting, repeated grouped evaluation, inter-rater
agreement, 2-D embedding export, saliency rendering, and a one-shot
``report`` run that writes every study artifact plus a manifest into an
output directory.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agreement import SCALES, fleiss_kappa, ratings_from_labels
from .core_data import (
    AGGREGATION_POLICIES,
    DataFormatError,
    FeatureTable,
    GroundTruth,
    LabelTable,
    aggregate_labels,
    cohort_summary,
    parse_features,
    parse_labels,
    truth_by_id,
)
from .embed import TsneParams, export_embedding, tsne
from .eval_harness import (
    MetricsSummary,
    emit_table,
    export_repetitions,
    export_scatter,
    run_repeated_eval,
)
from .regress import (
    FEATURE_SETS,
    RegressionModel,
    TARGETS,
    design_matrix,
    feature_set_columns,
    fit_ols,
    load_model,
    predict,
    save_model,
)
from .saliency import (
    SaliencyMap,
    compose_saliency,
    gaussian_blur_5x5,
    load_gradient_raster,
    raster_filename,
    render_saliency,
)

#: Default master seed; the quick-start reproduces byte-identical outputs.
DEFAULT_SEED = 1729
DEFAULT_REPS = 50
DEFAULT_RATIO = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        print(self.format_usage().rstrip(), file=sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _load_inputs(
    features_path: str, labels_path: str | None, policy: str
) -> tuple[FeatureTable, LabelTable | None, list[GroundTruth]]:
    features = parse_features(features_path)
    if labels_path is None:
        return features, None, []
    labels = parse_labels(labels_path)
    return features, labels, aggregate_labels(labels, policy)


def _fit_full(
    features: FeatureTable,
    truth: list[GroundTruth],
    feature_set: str,
    target: str,
) -> RegressionModel:
    """Fit a probe on every labeled image (no held-out split)."""
    truth_map = truth_by_id(truth)
    ids = [i for i in features.image_ids() if i in truth_map]
    missing = sorted(set(truth_map) - set(ids))
    if missing:
        raise ValueError(f"labeled images missing from the feature table: {missing[:5]}")
    if not ids:
        raise ValueError("no labeled images to fit on")
    X = design_matrix(features, feature_set, ids)
    y = np.array([truth_map[i].value(target) for i in ids])
    return fit_ols(X, y, feature_set=feature_set, target=target)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args: argparse.Namespace) -> int:
    if args.features is None and args.labels is None:
        raise UsageError("validate needs --features and/or --labels")
    if args.features is not None:
        table = parse_features(args.features)
        block = "with" if table.has_intermediate else "without"
        print(
            f"features: OK ({len(table)} rows, {len(table.patient_ids())} patients,"
            f" {block} intermediate block)"
        )
    if args.labels is not None:
        labels = parse_labels(args.labels)
        print(f"labels: OK ({len(labels)} rows, {len(labels.image_ids())} images)")
    return 0


def _cmd_cohort(args: argparse.Namespace) -> int:
    summary = cohort_summary(parse_features(args.features))
    print(f"n_images: {summary.n_images}")
    print(f"n_patients: {summary.n_patients}")
    print(f"male: {summary.male}")
    print(f"female: {summary.female}")
    print(f"sex_unknown: {summary.sex_unknown}")
    if summary.age_mean is None:
        print("age: n/a (no ages recorded)")
    else:
        print(
            f"age: {summary.age_mean:.1f}±{summary.age_std:.1f}"
            " (population std over known ages)"
        )
    for sex, mean in summary.age_mean_by_sex.items():
        print(f"age_mean_{sex}: {mean:.1f}")
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    features, _, truth = _load_inputs(args.features, args.labels, args.aggregate)
    model = _fit_full(features, truth, args.feature_set, args.target)
    save_model(model, args.out)
    _info(
        f"fit {args.feature_set} -> {args.target} on"
        f" {len(truth)} labeled images; saved to {args.out}"
    )
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    features, _, truth = _load_inputs(args.features, args.labels, args.aggregate)
    summary = run_repeated_eval(
        features,
        truth,
        args.feature_set,
        args.target,
        n_reps=args.reps,
        ratio=args.ratio,
        seed=args.seed,
    )
    sys.stdout.write(emit_table([summary], format=args.format))
    if args.per_rep is not None:
        Path(args.per_rep).write_text(export_repetitions([summary]), encoding="utf-8")
        _info(f"per-repetition metrics written to {args.per_rep}")
    if args.scatter is not None:
        truth_vals = {i: t for i, (t, _) in summary.scatter.items()}
        pred_vals = {i: p for i, (_, p) in summary.scatter.items()}
        Path(args.scatter).write_text(
            export_scatter(truth_vals, pred_vals, args.target), encoding="utf-8"
        )
        _info(f"repetition-0 test scatter written to {args.scatter}")
    return 0


def _cmd_kappa(args: argparse.Namespace) -> int:
    labels = parse_labels(args.labels)
    scales = SCALES if args.scale == "both" else (args.scale,)
    for scale in scales:
        matrix = ratings_from_labels(labels, scale)
        kappa = fleiss_kappa(matrix)
        print(
            f"{scale}: kappa={kappa:.3f} N={matrix.n_items}"
            f" raters={matrix.n_raters} categories={matrix.n_categories}"
        )
    return 0


def _cmd_tsne(args: argparse.Namespace) -> int:
    features = parse_features(args.features)
    ids = features.image_ids()
    X = design_matrix(features, "pneumonia4", ids)

    predictions = None
    if args.model is not None:
        model = load_model(args.model)
    elif args.labels is not None:
        _, _, truth = _load_inputs(args.features, args.labels, args.aggregate)
        model = _fit_full(features, truth, "opacity1", "extent")
    else:
        model = None
    if model is not None:
        design = design_matrix(features, model.feature_set, ids)
        values = predict(model, design)
        predictions = dict(zip(ids, (float(v) for v in values)))

    params = TsneParams(perplexity=args.perplexity, n_iter=args.iters, seed=args.seed)
    result = tsne(X, params)
    _info(
        f"t-SNE over {len(ids)} images: KL {result.kl_post_exaggeration:.4f}"
        f" (post-exaggeration) -> {result.kl_final:.4f} (final)"
    )
    document = export_embedding(result.coords, features.records(), predictions)
    Path(args.out).write_text(document, encoding="utf-8")
    _info(f"embedding written to {args.out}")
    return 0


def _cmd_saliency(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    grads_dir = Path(args.grads_dir)
    grads = {}
    for column in feature_set_columns(model.feature_set):
        raster_path = grads_dir / raster_filename(args.image_id, column)
        if not raster_path.exists():
            raise ValueError(f"missing gradient raster {raster_path}")
        grads[column] = load_gradient_raster(raster_path)
    composed = compose_saliency(model, grads)
    if args.abs:
        composed = SaliencyMap(composed.image_id, np.abs(composed.values))
    blurred = gaussian_blur_5x5(composed, sigma=args.sigma)
    render_saliency(blurred, args.out)
    _info(f"saliency map for {args.image_id} written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# full study run


def _sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_all(args: argparse.Namespace) -> int:
    """Run the full study into an output directory with a manifest.

    Steps: repeated evaluation of every feature set for both targets,
    inter-rater agreement for both scales, the 2-D embedding export,
    and the repetition-0 scatter of the single-feature extent probe.
    Individual step failures are recorded in the manifest and make the
    exit status non-zero, but do not stop the remaining steps.
    """
    out_dir = Path(
        args.out_dir
        if args.out_dir is not None
        else datetime.datetime.now().strftime("severity-run-%Y%m%d-%H%M%S")
    )
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest: dict = {
        "created": datetime.datetime.now().isoformat(timespec="seconds"),
        "tool": {"name": "cxrseverity", "version": __version__},
        "inputs": {
            "features": {"path": str(args.features), "sha256": _sha256(args.features)},
            "labels": {"path": str(args.labels), "sha256": _sha256(args.labels)},
        },
        "config": {
            "seed": args.seed,
            "reps": args.reps,
            "ratio": args.ratio,
            "aggregate": args.aggregate,
            "perplexity": args.perplexity,
            "tsne_iters": args.tsne_iters,
        },
        "steps": [],
        "outputs": {},
    }
    failures = 0

    def record(name: str, error: Exception | None) -> None:
        nonlocal failures
        status = "ok" if error is None else f"failed: {error}"
        manifest["steps"].append({"name": name, "status": status})
        if error is not None:
            failures += 1
            _info(f"step {name} failed: {error}")

    features, _, truth = _load_inputs(args.features, args.labels, args.aggregate)
    labels = parse_labels(args.labels)

    summaries: list[MetricsSummary] = []
    for target in TARGETS:
        for feature_set in FEATURE_SETS:
            name = f"evaluate:{target}:{feature_set}"
            if feature_set == "intermediate1024" and not features.has_intermediate:
                summaries.append(
                    MetricsSummary.skipped(target, feature_set, "skipped: features absent")
                )
                manifest["steps"].append({"name": name, "status": "skipped: features absent"})
                continue
            try:
                summaries.append(
                    run_repeated_eval(
                        features,
                        truth,
                        feature_set,
                        target,
                        n_reps=args.reps,
                        ratio=args.ratio,
                        seed=args.seed,
                    )
                )
                record(name, None)
            except (ValueError, DataFormatError) as exc:
                record(name, exc)

    try:
        (out_dir / "table.md").write_text(emit_table(summaries), encoding="utf-8")
        manifest["outputs"]["table"] = "table.md"
        (out_dir / "repetitions.csv").write_text(
            export_repetitions(summaries), encoding="utf-8"
        )
        manifest["outputs"]["repetitions"] = "repetitions.csv"
        record("table", None)
    except (ValueError, OSError) as exc:
        record("table", exc)

    try:
        kappa_lines = []
        for scale in SCALES:
            matrix = ratings_from_labels(labels, scale)
            kappa = fleiss_kappa(matrix)
            kappa_lines.append(
                f"{scale}: kappa={kappa:.3f} N={matrix.n_items}"
                f" raters={matrix.n_raters} categories={matrix.n_categories}"
            )
        (out_dir / "kappa.txt").write_text("\n".join(kappa_lines) + "\n", encoding="utf-8")
        manifest["outputs"]["kappa"] = "kappa.txt"
        record("kappa", None)
    except ValueError as exc:
        record("kappa", exc)

    try:
        ids = features.image_ids()
        X = design_matrix(features, "pneumonia4", ids)
        model = _fit_full(features, truth, "opacity1", "extent")
        values = predict(model, design_matrix(features, "opacity1", ids))
        predictions = dict(zip(ids, (float(v) for v in values)))
        params = TsneParams(
            perplexity=args.perplexity, n_iter=args.tsne_iters, seed=args.seed
        )
        result = tsne(X, params)
        (out_dir / "embedding.csv").write_text(
            export_embedding(result.coords, features.records(), predictions),
            encoding="utf-8",
        )
        manifest["outputs"]["embedding"] = "embedding.csv"
        record("tsne", None)
    except (ValueError, FloatingPointError) as exc:
        record("tsne", exc)

    try:
        extent_best = next(
            s for s in summaries if s.task == "extent" and s.feature_set == "opacity1"
        )
        if not extent_best.scatter:
            raise ValueError("no scatter rows retained for the extent probe")
        truth_vals = {i: t for i, (t, _) in extent_best.scatter.items()}
        pred_vals = {i: p for i, (_, p) in extent_best.scatter.items()}
        (out_dir / "scatter.csv").write_text(
            export_scatter(truth_vals, pred_vals, "extent"), encoding="utf-8"
        )
        manifest["outputs"]["scatter"] = "scatter.csv"
        record("scatter", None)
    except (StopIteration, ValueError) as exc:
        record("scatter", ValueError("extent/opacity1 evaluation unavailable") if isinstance(exc, StopIteration) else exc)

    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    _info(f"report written to {out_dir}")
    return 2 if failures else 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="cxr-severity", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_aggregate(p: _Parser) -> None:
        p.add_argument(
            "--aggregate",
            choices=AGGREGATION_POLICIES,
            default="mean",
            help="rater consolidation policy (default: mean)",
        )

    p = sub.add_parser("validate", help="check input files against the schemas")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("cohort", help="cohort counts and age statistics")
    p.add_argument("--features", required=True)
    p.set_defaults(func=_cmd_cohort)

    p = sub.add_parser("fit", help="fit a probe on all labeled images")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--feature-set", choices=FEATURE_SETS, required=True)
    p.add_argument("--target", choices=TARGETS, required=True)
    add_aggregate(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("evaluate", help="repeated patient-grouped evaluation")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--feature-set", choices=FEATURE_SETS, required=True)
    p.add_argument("--target", choices=TARGETS, required=True)
    p.add_argument("--reps", type=int, default=DEFAULT_REPS)
    p.add_argument("--ratio", type=float, default=DEFAULT_RATIO)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    add_aggregate(p)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--per-rep", help="also dump per-repetition metrics to this file")
    p.add_argument("--scatter", help="also dump the repetition-0 test scatter to this file")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("kappa", help="inter-rater agreement (Fleiss' kappa)")
    p.add_argument("--labels", required=True)
    p.add_argument("--scale", choices=SCALES + ("both",), default="both")
    p.set_defaults(func=_cmd_kappa)

    p = sub.add_parser("tsne", help="2-D embedding of the 4 pneumonia-related outputs")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", help="fit the extent probe for the prediction column")
    p.add_argument("--model", help="fitted model file for the prediction column")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    add_aggregate(p)
    p.add_argument("--out", required=True, help="embedding file to write")
    p.set_defaults(func=_cmd_tsne)

    p = sub.add_parser("saliency", help="compose, blur, and render a saliency map")
    p.add_argument("--model", required=True)
    p.add_argument("--grads-dir", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--abs", action="store_true", help="compose absolute gradients")
    p.add_argument("--out", required=True, help="graymap (P5) file to write")
    p.set_defaults(func=_cmd_saliency)

    p = sub.add_parser("report", help="run the full study into a directory")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--reps", type=int, default=DEFAULT_REPS)
    p.add_argument("--ratio", type=float, default=DEFAULT_RATIO)
    add_aggregate(p)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--tsne-iters", type=int, default=1000)
    p.set_defaults(func=run_all)

    return parser


def dispatch(argv: list[str]) -> int:
    """Route ``argv`` to a subcommand and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError:
        return 1
    except (DataFormatError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
