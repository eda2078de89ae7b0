"""Command-line entry point: featurebridge extract."""

import argparse
import logging
import sys

from .extract import ExtractionJob, collect_images, extract


def build_parser():
    parser = argparse.ArgumentParser(prog="featurebridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="convert images to CFMP feature maps")
    p.add_argument("--images", required=True, help="image directory or listing file")
    p.add_argument("--layer", default="pool4",
                   choices=["pool1", "pool2", "pool3", "pool4", "pool5"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--weights", default=None, help="VGG16 state-dict file (optional)")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--seed", type=int, default=0,
                   help="init seed used when no weights are given")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    images = collect_images(args.images)
    if not images:
        print("error: no images found", file=sys.stderr)
        return 3
    job = ExtractionJob(
        images=images,
        out_dir=args.out,
        layer=args.layer,
        image_size=args.image_size,
        weights=args.weights,
        seed=args.seed,
    )
    manifest = extract(job)
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
