"""featexport CLI: dump CNN features and annotations as an evaluation dataset."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .export import IMAGENET_MEAN, IMAGENET_STD, ExportError, ExportJob, export


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return tuple(parts)  # type: ignore[return-value]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run a model over an image folder and write a dataset")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--labels", required=True, help="CSV: image,class[,split]")
    p.add_argument("--concepts", help="CSV: image,<concept name columns> with 0/1 entries")
    p.add_argument("--parts", help="CSV: image,concept,row,col in original pixels")
    p.add_argument("--part-map", dest="part_map", help="CSV: concept,part (empty part = none)")
    p.add_argument(
        "--class-concepts",
        dest="class_concepts",
        help="CSV: class,<concept name columns>; explicit class-level truth",
    )
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="resnet18", help="TorchScript path or torchvision name")
    p.add_argument("--tap", default="layer4", help="module whose output feeds the pooling")
    p.add_argument("--weights", help="state-dict path for torchvision models")
    p.add_argument("--resize", type=int, default=224)
    p.add_argument("--mean", type=_triple, default=IMAGENET_MEAN)
    p.add_argument("--std", type=_triple, default=IMAGENET_STD)
    p.add_argument("--test-fraction", type=float, default=0.2, dest="test_fraction")
    p.add_argument("--no-images", action="store_true", help="skip saving preview PNGs")
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    job = ExportJob(
        model=args.model,
        tap=args.tap,
        images_dir=Path(args.images),
        labels_csv=Path(args.labels),
        out_dir=Path(args.out),
        concepts_csv=Path(args.concepts) if args.concepts else None,
        parts_csv=Path(args.parts) if args.parts else None,
        part_map_csv=Path(args.part_map) if args.part_map else None,
        class_concepts_csv=Path(args.class_concepts) if args.class_concepts else None,
        weights=args.weights,
        resize=args.resize,
        mean=args.mean,
        std=args.std,
        test_fraction=args.test_fraction,
        save_images=not args.no_images,
    )
    export(job)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
