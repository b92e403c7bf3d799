#!/usr/bin/env python3
"""End-to-end demo: build the synthetic dataset and run the full self-training loop.

Equivalent to:

    python scripts/make_fixture.py DATA
    python -m voxseg run --manifest DATA/manifest.json --config DATA/config.json --work WORK
"""
import argparse
import json
import tempfile
import time
from pathlib import Path

from voxseg.config import load_config
from voxseg.fixture import make_fixture
from voxseg.manifest import load_manifest
from voxseg.pipeline import run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument(
        "--root",
        type=Path,
        default=None,
        help="directory for dataset + work dir (default: a fresh temp dir)",
    )
    args = ap.parse_args()
    root = args.root or Path(tempfile.mkdtemp(prefix="voxseg_demo_"))

    paths = make_fixture(root / "data")
    manifest = load_manifest(paths["manifest"])
    config = load_config(paths["config"])

    start = time.perf_counter()
    report = run_pipeline(manifest, config.segmenter, config, root / "work")
    elapsed = time.perf_counter() - start

    for rec in report["history"]:
        where = rec["phase"] if rec.get("round") is None else f"{rec['phase']} round {rec['round']}"
        if "eval" in rec:
            print(f"{where}: fused {rec['fused']} case(s), held-out mean DSC {rec['eval']['mean_dsc']:.4f}")
        else:
            print(f"{where}: merged {len(report['final_labels'])} case(s)")
    print(f"final labels in {root / 'work' / 'final'}")
    print(f"report written to {root / 'work' / 'report.json'}")
    print(f"elapsed: {elapsed:.1f} s")
    print(json.dumps({"work": str(root / "work"), "cases": sorted(report["final_labels"])}, indent=2))


if __name__ == "__main__":
    main()
