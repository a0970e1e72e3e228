"""Command-line entry point for the extraction bridge.

``bridge extract`` turns an image directory plus its metadata sheet
into the severity toolkit's inputs; ``bridge pin`` prints a weights
file's SHA-256 for the pinning list.

Exit status: 0 on success, 1 on usage errors, 2 on data/weights errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import (
    DEFAULT_GRADIENT_TASKS,
    export_gradients,
    extract_rows,
    write_feature_csv,
)
from .formats import TASKS
from .metadata import read_metadata
from .model import UnpinnedWeightsError, load_pretrained, sha256_digest
from .preprocess import preprocess


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        print(self.format_usage().rstrip(), file=sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _cmd_pin(args: argparse.Namespace) -> int:
    print(sha256_digest(args.weights))
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    tasks = (
        tuple(t.strip() for t in args.grad_tasks.split(",") if t.strip())
        if args.grad_tasks
        else DEFAULT_GRADIENT_TASKS
    )
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise UsageError(f"unknown gradient tasks: {unknown}")

    entries = read_metadata(args.metadata, view=args.view)
    if not entries:
        raise ValueError(f"no {args.view}-view X-ray rows in {args.metadata}")
    images_dir = Path(args.images)
    missing = [e.filename for e in entries if not (images_dir / e.filename).exists()]
    if missing:
        raise ValueError(
            f"{len(missing)} metadata images missing from {images_dir},"
            f" first few: {missing[:3]}"
        )

    model = load_pretrained(
        args.weights,
        expected_digest=args.expected_digest,
        allow_unpinned=args.allow_unpinned,
    )
    _info(f"loaded weights {args.weights}")

    images = [
        preprocess(images_dir / e.filename, per_image_range=args.per_image_range)
        for e in entries
    ]
    rows = extract_rows(model, entries, images, batch_size=args.batch_size)
    write_feature_csv(rows, args.out, include_intermediate=not args.no_intermediate)
    _info(f"wrote {len(rows)} feature rows to {args.out}")

    if args.grads_out is not None:
        count = 0
        for entry, image in zip(entries, images):
            export_gradients(model, image, entry.image_id, args.grads_out, tasks)
            count += 1
        _info(
            f"wrote {len(tasks)} gradient rasters for each of {count} images"
            f" to {args.grads_out}"
        )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run the frozen classifier over a collection")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--metadata", required=True, help="metadata sheet (CSV)")
    p.add_argument("--out", required=True, help="feature file to write")
    p.add_argument("--grads-out", help="directory for XGRD gradient rasters")
    p.add_argument("--weights", required=True, help="pretrained checkpoint file")
    p.add_argument("--expected-digest", help="require this SHA-256 for the weights")
    p.add_argument(
        "--allow-unpinned",
        action="store_true",
        help="accept weights whose digest is not pinned (ablation only)",
    )
    p.add_argument("--view", default="PA", help="radiograph view to keep (default PA)")
    p.add_argument(
        "--per-image-range",
        action="store_true",
        help="rescale each image's own min/max instead of the nominal range",
    )
    p.add_argument("--grad-tasks", help="comma-separated tasks (default: pneumonia set)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument(
        "--no-intermediate",
        action="store_true",
        help="omit the 1024-dim block from the feature file",
    )
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("pin", help="print a weights file's SHA-256 digest")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=_cmd_pin)

    return parser


def dispatch(argv: list[str]) -> int:
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
    except (UnpinnedWeightsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
