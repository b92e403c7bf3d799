"""Command-line interface.

One binary, subcommand per workflow.  Exit codes: 0 success, 1 domain
error (bad data, failed subprocess), 2 usage error.  Every subcommand
accepts ``--config`` (JSON file) and repeatable ``--set key=value``
overrides; dotted keys reach nested sections, e.g.
``--set fusion.min_votes=2``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import mock_segmenter
from .config import PipelineConfig, load_config
from .errors import VoxsegError
from .fusion import FusionPolicy, PartialLabel, majority_vote, merge_organ_tumor, merge_partial
from .manifest import load_manifest, manifest_median_spacing
from .metrics import aggregate_cohort, evaluate_case, write_cohort_csv, write_cohort_json
from .monitor import (
    DEFAULT_PERIOD_S,
    MEM_FLOOR_GB,
    SELF_RSS_PROBE,
    auc_above_floor,
    efficiency_report,
    sample_run,
    write_report,
)
from .nifti import load_nifti, save_nifti
from .pipeline import PipelineState, run_phase, run_pipeline
from .postprocess import DEFAULT_KEEP_LARGEST_CLASSES, keep_largest
from .preprocess import ResampleSpec, clip_normalize, resample_image, resample_labels
from .tta import FlipSpec, aggregate, argmax_labels, enumerate_flips
from .volume import Spacing, check_labelmap

log = logging.getLogger(__name__)


def _case_stem(name: str) -> str | None:
    if name.endswith(".nii.gz"):
        return name[: -len(".nii.gz")]
    if name.endswith(".nii"):
        return name[: -len(".nii")]
    return None


def _nifti_files(directory: Path) -> dict[str, Path]:
    out = {}
    for path in sorted(directory.iterdir()):
        stem = _case_stem(path.name)
        if stem is not None:
            out.setdefault(stem, path)
    return out


def _parse_classes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise VoxsegError(f"bad class list {text!r}: {exc}") from exc


def _parse_spacing(text: str) -> Spacing:
    parts = text.split(",")
    if len(parts) != 3:
        raise VoxsegError(f"spacing must be dx,dy,dz; got {text!r}")
    return Spacing(*(float(p) for p in parts))


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n.replace("-", "_"), None) is None]
    if missing:
        raise _UsageError(f"missing required flag(s): {', '.join('--' + n for n in missing)}")


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------- run / phase


def _work_dir(args) -> Path:
    if args.work:
        return Path(args.work)
    if args.state:
        return Path(args.state).parent
    raise _UsageError("pass --work (or --state) to locate the run directory")


def _open_state(work: Path, config: PipelineConfig, fresh: bool) -> PipelineState:
    state_path = work / "state.json"
    if state_path.exists() and not fresh:
        state = PipelineState.load(state_path)
        if state.config_snapshot != json.loads(json.dumps(config.to_dict())):
            raise VoxsegError(f"{state_path} was created with a different config")
        return state
    work.mkdir(parents=True, exist_ok=True)
    return PipelineState.fresh(state_path, config)


def cmd_run(args) -> int:
    _require(args, "manifest")
    config = load_config(args.config, args.overrides)
    manifest = load_manifest(args.manifest)
    work = _work_dir(args)
    report = run_pipeline(manifest, config.segmenter, config, work, resume=not args.fresh)
    print(f"final labels: {len(report['final_labels'])} case(s) in {work / 'final'}")
    evals = [h["eval"]["mean_dsc"] for h in report["history"] if h.get("eval")]
    if evals:
        print("held-out mean DSC per round: " + ", ".join(f"{v:.4f}" for v in evals))
    print(f"report: {work / 'report.json'}")
    return 0


def cmd_phase(args) -> int:
    _require(args, "manifest")
    config = load_config(args.config, args.overrides)
    manifest = load_manifest(args.manifest)
    work = _work_dir(args)
    state = _open_state(work, config, args.fresh)
    run_phase(state, manifest, config.segmenter, config, args.phase)
    last = state.history[-1]
    print(
        f"phase {last['phase']} round {last['round']}: fused {last['fused']}/{last['students']} case(s)"
        + (f", held-out mean DSC {last['eval']['mean_dsc']:.4f}" if last.get("eval") else "")
    )
    return 0


# ------------------------------------------------------------------- fuse


def _fuse_policy(config: PipelineConfig, names: list[str]) -> FusionPolicy:
    policy = config.fusion
    if all(n in policy.source_priority for n in names):
        return policy
    # config priority does not cover these sources; fall back to CLI order
    log.info("using source order %s for tie-breaking", names)
    return FusionPolicy(
        source_priority=tuple(names),
        gt_overrides=policy.gt_overrides,
        tumor_overrides_organ=policy.tumor_overrides_organ,
        gt_background_trust=policy.gt_background_trust,
        min_votes=policy.min_votes,
    )


def _io_pairs(inputs: list[Path], out: Path):
    """Yield (per-source input paths, output path) for files or directories."""
    if all(p.is_dir() for p in inputs):
        listings = [_nifti_files(p) for p in inputs]
        stems = sorted(set.intersection(*(set(m) for m in listings)))
        if not stems:
            raise VoxsegError("input directories share no case files")
        skipped = sorted(set.union(*(set(m) for m in listings)) - set(stems))
        if skipped:
            log.warning("skipping cases missing from some inputs: %s", ", ".join(skipped))
        out.mkdir(parents=True, exist_ok=True)
        for stem in stems:
            yield [m[stem] for m in listings], out / f"{stem}.nii.gz"
    elif any(p.is_dir() for p in inputs):
        raise VoxsegError("mix of files and directories; pass all files or all directories")
    else:
        yield list(inputs), out


def cmd_fuse(args) -> int:
    config = load_config(args.config, args.overrides)
    out = Path(args.out)
    if args.mode == "vote":
        if len(args.source or []) < 2:
            raise _UsageError("vote mode needs at least two --source name=path entries")
        names, paths = [], []
        for item in args.source:
            name, _, path = item.partition("=")
            if not path:
                raise _UsageError(f"--source must look like name=path, got {item!r}")
            names.append(name)
            paths.append(Path(path))
        policy = _fuse_policy(config, names)
        for srcs, dst in _io_pairs(paths, out):
            vols = [check_labelmap(load_nifti(p)) for p in srcs]
            save_nifti(majority_vote(list(zip(names, vols)), policy), dst)
    elif args.mode == "organ-tumor":
        _require(args, "organ", "tumor")
        for (organ_p, tumor_p), dst in _io_pairs([Path(args.organ), Path(args.tumor)], out):
            merged = merge_organ_tumor(
                check_labelmap(load_nifti(organ_p)),
                check_labelmap(load_nifti(tumor_p)),
                config.fusion.tumor_overrides_organ,
            )
            save_nifti(merged, dst)
    else:  # merge-partial
        _require(args, "gt", "pseudo", "classes")
        annotated = frozenset(_parse_classes(args.classes))
        for (gt_p, pseudo_p), dst in _io_pairs([Path(args.gt), Path(args.pseudo)], out):
            partial = PartialLabel(check_labelmap(load_nifti(gt_p)), annotated)
            merged = merge_partial(partial, check_labelmap(load_nifti(pseudo_p)), config.fusion)
            save_nifti(merged, dst)
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    _require(args, "pred", "gt")
    config = load_config(args.config, args.overrides)
    pred, gt = Path(args.pred), Path(args.gt)
    pairs = []
    if pred.is_dir() != gt.is_dir():
        raise VoxsegError("--pred and --gt must both be files or both be directories")
    if pred.is_dir():
        preds, gts = _nifti_files(pred), _nifti_files(gt)
        missing = sorted(set(gts) - set(preds))
        if missing:
            raise VoxsegError(f"no prediction for case(s): {', '.join(missing)}")
        pairs = [(stem, preds[stem], gts[stem]) for stem in sorted(gts)]
        if not pairs:
            raise VoxsegError(f"no NIfTI files in {gt}")
    else:
        pairs = [(_case_stem(pred.name) or pred.name, pred, gt)]
    reports = []
    for case_id, ppath, gpath in pairs:
        reports.append(
            evaluate_case(
                check_labelmap(load_nifti(ppath)),
                check_labelmap(load_nifti(gpath)),
                config.nsd_params(),
                case_id=case_id,
            )
        )
    summary = aggregate_cohort(reports)
    print(f"{'class':<22}{'DSC':>16}{'NSD':>16}")
    for name, row in summary["per_class"].items():
        print(
            f"{name:<22}{row['dsc_mean']:>9.4f}±{row['dsc_std']:.4f}"
            f"{row['nsd_mean']:>9.4f}±{row['nsd_std']:.4f}"
        )
    print(f"mean DSC over {summary['n_cases']} case(s): {summary['mean_dsc']:.4f}")
    if args.out:
        write_cohort_csv(summary, args.out)
        print(f"wrote {args.out}")
    if args.json:
        write_cohort_json(summary, args.json)
        print(f"wrote {args.json}")
    return 0


# -------------------------------------------------------------- preprocess


def _resample_target(args, config: PipelineConfig) -> Spacing | None:
    if args.target is None:
        return None
    if args.target != "median":
        return _parse_spacing(args.target)
    if not args.manifest:
        raise _UsageError("--target median needs --manifest to compute the median spacing")
    spacing = manifest_median_spacing(load_manifest(args.manifest))
    print(f"median spacing: {spacing.as_tuple()}")
    return spacing


def cmd_preprocess(args) -> int:
    _require(args, "image", "out")
    config = load_config(args.config, args.overrides)
    target = _resample_target(args, config)
    src, out = Path(args.image), Path(args.out)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(p, out / f"{stem}.nii.gz") for stem, p in _nifti_files(src).items()]
        if not jobs:
            raise VoxsegError(f"no NIfTI files in {src}")
    else:
        jobs = [(src, out)]
    for in_path, out_path in jobs:
        vol = load_nifti(in_path)
        if args.labels:
            vol = check_labelmap(vol)
            if target is not None:
                vol = resample_labels(vol, ResampleSpec(target))
        else:
            if not args.no_normalize:
                vol = clip_normalize(vol, config.normalization)
            if target is not None:
                vol = resample_image(vol, ResampleSpec(target))
        save_nifti(vol, out_path)
    print(f"wrote {out}")
    return 0


# ----------------------------------------------------------------- monitor


def cmd_monitor(args) -> int:
    _require(args, "cmd")
    returncode, trace = sample_run(args.cmd, probe=args.probe, period_s=args.period)
    runtime = trace.samples[-1][0]
    report = efficiency_report(trace, runtime)
    print(
        f"runtime {report.runtime_s:.2f}s (over tolerance: {report.runtime_over_tolerance_s:.2f}s), "
        f"peak {report.peak_mem_gb:.3f} GB, AUC above {args.floor:g} GB: "
        f"{auc_above_floor(trace, args.floor):.3f} GB*s"
    )
    if args.out:
        write_report(report, args.out)
        print(f"wrote {args.out}")
    if returncode != 0:
        print(f"monitored command exited with {returncode}", file=sys.stderr)
        return 1
    return 0


# ----------------------------------------------------- tta / postprocess


def cmd_tta_aggregate(args) -> int:
    _require(args, "input_dir", "case", "out")
    from .pipeline import _load_prob_map  # shared parsing of _prob_ outputs

    raw = Path(args.input_dir)
    if args.no_flips:
        entries = [(FlipSpec(False, False, False), _load_prob_map(raw, args.case))]
    else:
        entries = [
            (spec, _load_prob_map(raw, f"{args.case}__tta{spec.tag}")) for spec in enumerate_flips()
        ]
    merged = aggregate(entries)
    save_nifti(argmax_labels(merged), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_postprocess(args) -> int:
    _require(args, "input", "out")
    config = load_config(args.config, args.overrides)
    classes = _parse_classes(args.classes) if args.classes else config.keep_largest_classes
    src, out = Path(args.input), Path(args.out)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(p, out / f"{stem}.nii.gz") for stem, p in _nifti_files(src).items()]
    else:
        jobs = [(src, out)]
    for in_path, out_path in jobs:
        vol = check_labelmap(load_nifti(in_path))
        save_nifti(keep_largest(vol, classes, config.connectivity), out_path)
    print(f"wrote {out}")
    return 0


# ------------------------------------------------------------ mock segmenter


def cmd_mock(args) -> int:
    if args.action == "train":
        _require(args, "train_dir", "label_dir", "model_dir")
        mock_segmenter.train(args.train_dir, args.label_dir, args.model_dir)
    else:
        _require(args, "model_dir", "input_dir", "output_dir")
        mock_segmenter.predict(args.model_dir, args.input_dir, args.output_dir, args.mode)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE",
        help="override a config value by dotted key (repeatable)",
    )
    common.add_argument("--manifest", help="dataset manifest (JSON array of case records)")
    common.add_argument("--state", help="pipeline state file (default: WORK/state.json)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="voxseg",
        description="Iterative semi-supervised segmentation pipeline tools",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("run", parents=[common], help="run all phases + merge to completion")
    p.add_argument("--work", help="run directory holding state and outputs")
    p.add_argument("--fresh", action="store_true", help="ignore any existing state")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("phase", parents=[common], help="run a single round of one phase")
    p.add_argument("--phase", required=True, choices=["tumor", "organ"])
    p.add_argument("--work", help="run directory holding state and outputs")
    p.add_argument("--fresh", action="store_true", help="ignore any existing state")
    p.set_defaults(func=cmd_phase)

    p = sub.add_parser("fuse", parents=[common], help="fuse label maps")
    p.add_argument("--mode", required=True, choices=["vote", "organ-tumor", "merge-partial"])
    p.add_argument("--source", action="append", metavar="NAME=PATH", help="vote source (repeat)")
    p.add_argument("--organ", help="organ label map or directory")
    p.add_argument("--tumor", help="tumor label map or directory")
    p.add_argument("--gt", help="partial ground-truth map or directory")
    p.add_argument("--pseudo", help="pseudo-label map or directory")
    p.add_argument("--classes", help="comma-separated annotated classes of --gt")
    p.add_argument("--out", required=True, help="output file or directory")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", parents=[common], help="DSC/NSD of predictions vs ground truth")
    p.add_argument("--pred", help="prediction file or directory")
    p.add_argument("--gt", help="ground-truth file or directory")
    p.add_argument("--out", help="write per-class CSV here")
    p.add_argument("--json", help="write full JSON summary here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("preprocess", parents=[common], help="clip/normalize and resample volumes")
    p.add_argument("--image", help="input volume or directory")
    p.add_argument("--out", help="output volume or directory")
    p.add_argument("--labels", action="store_true", help="treat input as labels (nearest neighbor)")
    p.add_argument("--target", help='target spacing "dx,dy,dz", or "median" (needs --manifest)')
    p.add_argument("--no-normalize", action="store_true", help="skip intensity clip/normalize")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("monitor", parents=[common], help="run a command under a resource monitor")
    p.add_argument("--cmd", help="command line to run")
    p.add_argument("--probe", default=SELF_RSS_PROBE,
                   help="memory probe command printing bytes; {pid} is substituted")
    p.add_argument("--period", type=float, default=DEFAULT_PERIOD_S, help="sample period seconds")
    p.add_argument("--floor", type=float, default=MEM_FLOOR_GB, help="memory floor in GB")
    p.add_argument("--out", help="write the efficiency report JSON here")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("tta-aggregate", parents=[common],
                       help="average flipped probability maps back into one label map")
    p.add_argument("--input-dir", help="directory of <case>__tta<k>_prob_<c>.nii.gz maps")
    p.add_argument("--case", help="case id")
    p.add_argument("--no-flips", action="store_true", help="inputs are unflipped <case>_prob_<c>")
    p.add_argument("--out", help="output label map")
    p.set_defaults(func=cmd_tta_aggregate)

    p = sub.add_parser("postprocess", parents=[common], help="keep the largest component per class")
    p.add_argument("--input", help="label map or directory")
    p.add_argument("--classes", help="comma-separated classes (default: configured organ list)")
    p.add_argument("--out", help="output file or directory")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("mock-segmenter", parents=[common],
                       help="deterministic intensity-band segmenter for tests")
    p.add_argument("action", choices=["train", "predict"])
    p.add_argument("--train-dir")
    p.add_argument("--label-dir")
    p.add_argument("--model-dir")
    p.add_argument("--input-dir")
    p.add_argument("--output-dir")
    p.add_argument("--mode", default="probabilities", choices=["labels", "probabilities"])
    p.set_defaults(func=cmd_mock)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args) or 0
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VoxsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
