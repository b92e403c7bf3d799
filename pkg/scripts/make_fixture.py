#!/usr/bin/env python3
"""Generate the synthetic six-case demo dataset (images, labels, manifest, config)."""
import argparse
from pathlib import Path

from voxseg.fixture import make_fixture


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("dest", type=Path, help="directory to write the dataset into")
    ap.add_argument(
        "--no-tta", action="store_true", help="disable flip test-time augmentation in the config"
    )
    ap.add_argument(
        "--rounds",
        type=int,
        nargs=2,
        default=(2, 2),
        metavar=("TUMOR", "ORGAN"),
        help="self-training rounds per phase (default: 2 2)",
    )
    args = ap.parse_args()
    paths = make_fixture(args.dest, tta=not args.no_tta, rounds=tuple(args.rounds))
    print(f"dataset root: {paths['root']}")
    print(f"manifest:     {paths['manifest']}")
    print(f"config:       {paths['config']}")


if __name__ == "__main__":
    main()
