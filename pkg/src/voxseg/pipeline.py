"""Iterative teacher→pseudo-label→student orchestration.

Each phase (tumor, organ) repeats: train the segmenter on every case that
annotates the phase's classes plus previously fused students, predict all
remaining cases (8-flip TTA when the segmenter emits probabilities), keep
the largest component per configured class, overlay each case's partial
ground truth, and persist the fused pseudo labels.  A final merge stage
combines the per-phase labels (plus any external pseudo-label sources)
into complete 14-class maps.

State lives in ``<work>/state.json``, rewritten atomically after every
step; fused files carry content digests so a killed run resumes without
recomputing finished cases.  Work directory layout:

    state.json
    rounds/<phase>_r<k>/
      train_images/ train_labels/   teacher set handed to train_cmd
      model/                        segmenter model_dir
      predict_images/               student inputs (flipped copies under TTA)
      predict_raw/                  raw segmenter outputs
      fused/                        per-round fused labels
      logs/                         train.log, predict.log
      eval.json                     held-out metrics for the round
    pseudo_tumor/ pseudo_organ/     latest pseudo label per student case
    final/                          merged labels, one per manifest case
    report.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shlex
import shutil
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from .config import PipelineConfig, SegmenterContract
from .errors import PipelineError, SegmenterError, VoxsegError
from .fusion import PartialLabel, majority_vote, merge_organ_tumor, merge_partial
from .manifest import CaseRecord, Manifest
from .metrics import aggregate_cohort, evaluate_case
from .nifti import load_nifti, peek_nifti, save_nifti
from .postprocess import keep_largest
from .tta import FlipSpec, aggregate, apply_flip, argmax_labels, enumerate_flips
from .volume import ORGAN_CLASSES, TUMOR_CLASS, ProbMap, Volume, check_labelmap, labelmap_like

log = logging.getLogger(__name__)

PHASE_CLASSES = {
    "tumor": frozenset({TUMOR_CLASS}),
    "organ": frozenset(ORGAN_CLASSES),
}
MERGE, DONE = "merge", "done"

PENDING = "pending"
PSEUDO_LABELED = "pseudo_labeled"
FUSED = "fused"
FAILED = "failed"

STATE_VERSION = 1
# test hook: kill the process (os._exit) right after the Nth state write
CRASH_ENV = "VOXSEG_CRASH_AFTER"

_PROB_TAIL = re.compile(r"_prob_(\d+)\.nii(\.gz)?$")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_copy(src, dst) -> None:
    tmp = f"{dst}.tmp{os.getpid()}"
    shutil.copyfile(src, tmp)
    os.replace(tmp, dst)


def _write_json(data: dict, path) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _restrict(vol: Volume, classes) -> Volume:
    """Zero every voxel whose class is not in ``classes``."""
    keep = np.isin(vol.data, sorted(classes))
    return labelmap_like(np.where(keep, vol.data, 0), vol)


def _ext(path) -> str:
    return ".nii.gz" if str(path).endswith(".nii.gz") else ".nii"


class PipelineState:
    """Mutable run state, persisted as JSON after every step.

    All mutators take the internal lock and persist before returning, so
    the on-disk file never lags behind completed work by more than the
    step in flight.
    """

    def __init__(self, path, data: dict):
        self.path = Path(path)
        self.data = data
        self._lock = threading.RLock()

    @classmethod
    def fresh(cls, path, config: PipelineConfig) -> "PipelineState":
        data = {
            "version": STATE_VERSION,
            "phase": config.phase_order[0],
            "round": 0,
            "stage": {"trained": False, "predicted": False},
            "cases": {},
            "history": [],
            "persist_count": 0,
            "config": config.to_dict(),
        }
        state = cls(path, data)
        state.persist()
        return state

    @classmethod
    def load(cls, path) -> "PipelineState":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PipelineError(f"cannot read state {path}: {exc}") from exc
        if data.get("version") != STATE_VERSION:
            raise PipelineError(f"{path}: unsupported state version {data.get('version')!r}")
        return cls(path, data)

    @property
    def work_dir(self) -> Path:
        return self.path.parent

    @property
    def phase(self) -> str:
        return self.data["phase"]

    @property
    def round(self) -> int:
        return self.data["round"]

    @property
    def cases(self) -> dict:
        return self.data["cases"]

    @property
    def history(self) -> list:
        return self.data["history"]

    @property
    def config_snapshot(self) -> dict:
        return self.data["config"]

    def stage(self, key: str) -> bool:
        return bool(self.data["stage"].get(key))

    def case_entry(self, case_id: str) -> dict | None:
        return self.data["cases"].get(case_id)

    def persist(self) -> None:
        with self._lock:
            self.data["persist_count"] += 1
            _write_json(self.data, self.path)
            crash_after = os.environ.get(CRASH_ENV)
            if crash_after and self.data["persist_count"] == int(crash_after):
                log.warning("crash hook: exiting after persist #%s", crash_after)
                os._exit(137)

    def mark_trained(self, student_ids) -> None:
        with self._lock:
            self.data["stage"]["trained"] = True
            self.data["cases"] = {cid: {"status": PENDING} for cid in student_ids}
            self.persist()

    def mark_predicted(self) -> None:
        with self._lock:
            self.data["stage"]["predicted"] = True
            for entry in self.data["cases"].values():
                if entry["status"] == PENDING:
                    entry["status"] = PSEUDO_LABELED
            self.persist()

    def set_case(self, case_id: str, entry: dict) -> None:
        with self._lock:
            self.data["cases"][case_id] = entry
            self.persist()

    def end_round(self, record: dict) -> None:
        with self._lock:
            self.data["history"].append(record)
            self.data["round"] += 1
            self.data["stage"] = {"trained": False, "predicted": False}
            self.data["cases"] = {}
            self.persist()

    def advance_phase(self, next_phase: str) -> None:
        with self._lock:
            self.data["phase"] = next_phase
            self.data["round"] = 0
            self.data["stage"] = {"trained": False, "predicted": False}
            self.data["cases"] = {}
            self.persist()

    def finish(self, record: dict) -> None:
        with self._lock:
            self.data["history"].append(record)
            self.data["phase"] = DONE
            self.persist()


def _round_dir(work: Path, phase: str, rnd: int) -> Path:
    return work / "rounds" / f"{phase}_r{rnd}"


def _store_dir(work: Path, phase: str) -> Path:
    return work / f"pseudo_{phase}"


def _teacher_records(manifest: Manifest, config: PipelineConfig, phase: str) -> list[CaseRecord]:
    held_out = set(config.eval_cases)
    classes = PHASE_CLASSES[phase]
    return [r for r in manifest.cases if r.annotates(classes) and r.case_id not in held_out]


def _student_records(manifest: Manifest, config: PipelineConfig, phase: str) -> list[CaseRecord]:
    teacher_ids = {r.case_id for r in _teacher_records(manifest, config, phase)}
    return [r for r in manifest.cases if r.case_id not in teacher_ids]


def _run_command(template: str, mapping: dict, log_path: Path, what: str) -> None:
    try:
        cmd = template.format(**{k: shlex.quote(str(v)) for k, v in mapping.items()})
    except (KeyError, IndexError) as exc:
        raise SegmenterError(f"bad placeholder in {what} command {template!r}: {exc}") from exc
    argv = shlex.split(cmd)
    log.info("running %s: %s", what, cmd)
    try:
        with open(log_path, "ab") as fh:
            fh.write(f"$ {cmd}\n".encode())
            fh.flush()
            proc = subprocess.run(argv, stdout=fh, stderr=fh)
    except OSError as exc:
        raise SegmenterError(f"cannot launch {what} command {argv[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise SegmenterError(
            f"{what} command exited with {proc.returncode}; see {log_path}"
        )


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _build_train_dirs(
    rd: Path, manifest: Manifest, config: PipelineConfig, phase: str,
    teachers: list[CaseRecord], students: list[CaseRecord],
) -> int:
    """Stage teacher images/labels for train_cmd; returns the case count."""
    img_dir = _fresh_dir(rd / "train_images")
    lab_dir = _fresh_dir(rd / "train_labels")
    classes = PHASE_CLASSES[phase]
    count = 0
    for rec in teachers:
        src = manifest.image_file(rec)
        shutil.copyfile(src, img_dir / f"{rec.case_id}{_ext(src)}")
        gt = check_labelmap(load_nifti(manifest.label_file(rec)))
        save_nifti(_restrict(gt, rec.annotated_classes & classes), lab_dir / f"{rec.case_id}.nii.gz")
        count += 1
    held_out = set(config.eval_cases)
    store = _store_dir(rd.parent.parent, phase)
    for rec in students:
        fused = store / f"{rec.case_id}.nii.gz"
        if rec.case_id in held_out or not fused.exists():
            continue
        src = manifest.image_file(rec)
        shutil.copyfile(src, img_dir / f"{rec.case_id}{_ext(src)}")
        shutil.copyfile(fused, lab_dir / f"{rec.case_id}.nii.gz")
        count += 1
    return count


def _write_predict_inputs(
    rd: Path, manifest: Manifest, students: list[CaseRecord], use_tta: bool
) -> None:
    img_dir = _fresh_dir(rd / "predict_images")
    for rec in students:
        src = manifest.image_file(rec)
        if not use_tta:
            shutil.copyfile(src, img_dir / f"{rec.case_id}{_ext(src)}")
            continue
        image = load_nifti(src)
        for spec in enumerate_flips():
            save_nifti(apply_flip(image, spec), img_dir / f"{rec.case_id}__tta{spec.tag}.nii.gz")


def _load_prob_map(raw_dir: Path, base: str) -> ProbMap:
    paths = {}
    for p in sorted(raw_dir.glob(f"{base}_prob_*.nii*")):
        m = _PROB_TAIL.search(p.name)
        if m and p.name[: m.start()] == base:
            paths[int(m.group(1))] = p
    if not paths:
        raise VoxsegError(f"segmenter wrote no probability maps for {base!r} in {raw_dir}")
    classes = tuple(sorted(paths))
    vols = [load_nifti(paths[c]) for c in classes]
    dims = {v.dims for v in vols}
    if len(dims) > 1:
        raise VoxsegError(f"probability channels for {base!r} disagree on dims: {sorted(dims)}")
    probs = np.stack([v.data.astype(np.float32) for v in vols])
    return ProbMap(probs, classes, vols[0].spacing)


def _predicted_labels(
    rec: CaseRecord, raw_dir: Path, contract: SegmenterContract, use_tta: bool
) -> Volume:
    """Read the segmenter's output for one case and reduce it to labels."""
    if contract.output_mode == "labels":
        for ext in (".nii.gz", ".nii"):
            path = raw_dir / f"{rec.case_id}{ext}"
            if path.exists():
                return check_labelmap(load_nifti(path))
        raise VoxsegError(f"segmenter wrote no label map for {rec.case_id!r} in {raw_dir}")
    if use_tta:
        entries = []
        for spec in enumerate_flips():
            entries.append((spec, _load_prob_map(raw_dir, f"{rec.case_id}__tta{spec.tag}")))
    else:
        entries = [(FlipSpec(False, False, False), _load_prob_map(raw_dir, rec.case_id))]
    return argmax_labels(aggregate(entries))


def _process_case(
    rec: CaseRecord, manifest: Manifest, config: PipelineConfig, contract: SegmenterContract,
    phase: str, rd: Path, store: Path, use_tta: bool,
) -> dict:
    classes = PHASE_CLASSES[phase]
    labels = _predicted_labels(rec, rd / "predict_raw", contract, use_tta)
    keep_classes = [c for c in config.keep_largest_classes if c in classes]
    if keep_classes:
        labels = keep_largest(labels, keep_classes, config.connectivity)
    labels = _restrict(labels, classes)
    annotated = rec.annotated_classes & classes
    if annotated and rec.label_path and rec.case_id not in set(config.eval_cases):
        gt = check_labelmap(load_nifti(manifest.label_file(rec)))
        partial = PartialLabel(_restrict(gt, annotated), frozenset(annotated))
        labels = merge_partial(partial, labels, config.fusion)
    fused_path = rd / "fused" / f"{rec.case_id}.nii.gz"
    save_nifti(labels, fused_path)
    _atomic_copy(fused_path, store / f"{rec.case_id}.nii.gz")
    return {
        "status": FUSED,
        "digest": _sha256(fused_path),
        "foreground": int((labels.data > 0).sum()),
    }


def _files_match(digest: str | None, *paths: Path) -> bool:
    if not digest:
        return False
    return all(p.exists() and _sha256(p) == digest for p in paths)


def _foreach_case(records, fn, state: PipelineState, workers: int) -> None:
    """Run fn per case; record each outcome in state as it completes."""
    if workers <= 1:
        for rec in records:
            cid, entry = fn(rec)
            state.set_case(cid, entry)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, rec) for rec in records]
        for fut in as_completed(futures):
            cid, entry = fut.result()
            state.set_case(cid, entry)


def _zeros_like_image(manifest: Manifest, rec: CaseRecord) -> Volume:
    dims, spacing = peek_nifti(manifest.image_file(rec))
    return Volume(np.zeros(dims, dtype=np.uint8), spacing)


def _combined_pseudo(work: Path, manifest: Manifest, rec: CaseRecord, config: PipelineConfig) -> Volume:
    """Latest organ+tumor pseudo labels merged into one map (no ground truth)."""
    parts = {}
    for phase in ("organ", "tumor"):
        path = _store_dir(work, phase) / f"{rec.case_id}.nii.gz"
        parts[phase] = check_labelmap(load_nifti(path)) if path.exists() else None
    if parts["organ"] is None and parts["tumor"] is None:
        return _zeros_like_image(manifest, rec)
    for phase, vol in parts.items():
        if vol is None:
            other = parts["organ"] or parts["tumor"]
            parts[phase] = labelmap_like(np.zeros(other.dims, dtype=np.uint8), other)
    return merge_organ_tumor(parts["organ"], parts["tumor"], config.fusion.tumor_overrides_organ)


def _evaluate_held_out(work: Path, manifest: Manifest, config: PipelineConfig) -> dict:
    reports = []
    for cid in config.eval_cases:
        rec = manifest.case(cid)
        gt = check_labelmap(load_nifti(manifest.label_file(rec)))
        pred = _combined_pseudo(work, manifest, rec, config)
        reports.append(evaluate_case(pred, gt, config.nsd_params(), case_id=cid))
    return aggregate_cohort(reports)


def run_phase(
    state: PipelineState,
    manifest: Manifest,
    contract: SegmenterContract,
    config: PipelineConfig,
    phase: str,
) -> PipelineState:
    """Execute one teacher→pseudo-label round of the given phase."""
    if phase not in PHASE_CLASSES:
        raise PipelineError(f"unknown phase {phase!r}")
    if state.phase != phase:
        raise PipelineError(f"state is in phase {state.phase!r}, not {phase!r}")
    if contract is None:
        raise PipelineError("no segmenter contract configured")
    teachers = _teacher_records(manifest, config, phase)
    if not teachers:
        raise PipelineError(f"{phase} phase has no teacher cases annotating its classes")
    students = _student_records(manifest, config, phase)
    work = state.work_dir
    rnd = state.round
    rd = _round_dir(work, phase, rnd)
    (rd / "logs").mkdir(parents=True, exist_ok=True)
    store = _store_dir(work, phase)
    store.mkdir(parents=True, exist_ok=True)
    use_tta = config.tta and contract.output_mode == "probabilities"
    log.info(
        "phase %s round %d: %d teacher(s), %d student(s)", phase, rnd, len(teachers), len(students)
    )

    if not state.stage("trained"):
        n = _build_train_dirs(rd, manifest, config, phase, teachers, students)
        model_dir = rd / "model"
        model_dir.mkdir(exist_ok=True)
        _run_command(
            contract.train_cmd,
            {"train_dir": rd / "train_images", "label_dir": rd / "train_labels", "model_dir": model_dir},
            rd / "logs" / "train.log",
            "train",
        )
        log.info("trained on %d case(s)", n)
        state.mark_trained([r.case_id for r in students])

    if not state.stage("predicted"):
        _write_predict_inputs(rd, manifest, students, use_tta)
        (rd / "predict_raw").mkdir(exist_ok=True)
        _run_command(
            contract.predict_cmd,
            {"model_dir": rd / "model", "input_dir": rd / "predict_images", "output_dir": rd / "predict_raw"},
            rd / "logs" / "predict.log",
            "predict",
        )
        state.mark_predicted()

    (rd / "fused").mkdir(exist_ok=True)
    todo = []
    for rec in students:
        entry = state.case_entry(rec.case_id) or {}
        if entry.get("status") == FUSED and _files_match(
            entry.get("digest"), rd / "fused" / f"{rec.case_id}.nii.gz", store / f"{rec.case_id}.nii.gz"
        ):
            continue
        todo.append(rec)

    def fuse_one(rec: CaseRecord):
        try:
            return rec.case_id, _process_case(rec, manifest, config, contract, phase, rd, store, use_tta)
        except (VoxsegError, OSError) as exc:
            log.warning("case %s failed: %s", rec.case_id, exc)
            return rec.case_id, {"status": FAILED, "error": str(exc)}

    _foreach_case(todo, fuse_one, state, config.workers)

    entries = state.cases
    fused = sorted(c for c, e in entries.items() if e.get("status") == FUSED)
    failed = sorted(c for c, e in entries.items() if e.get("status") == FAILED)
    record = {
        "phase": phase,
        "round": rnd,
        "teachers": len(teachers),
        "students": len(students),
        "fused": len(fused),
        "failed": failed,
        "foreground_voxels": {c: entries[c].get("foreground", 0) for c in fused},
    }
    if config.eval_cases:
        evaluation = _evaluate_held_out(work, manifest, config)
        _write_json(evaluation, rd / "eval.json")
        record["eval"] = evaluation
        log.info(
            "phase %s round %d held-out mean DSC: %.4f", phase, rnd, evaluation["mean_dsc"]
        )
    state.end_round(record)
    return state


def _phase_component(
    work: Path, manifest: Manifest, config: PipelineConfig, rec: CaseRecord, phase: str
) -> Volume:
    """A case's best label map restricted to one phase's classes."""
    classes = PHASE_CLASSES[phase]
    held_out = rec.case_id in set(config.eval_cases)
    if rec.annotates(classes) and rec.label_path and not held_out:
        gt = check_labelmap(load_nifti(manifest.label_file(rec)))
        return _restrict(gt, rec.annotated_classes & classes)
    path = _store_dir(work, phase) / f"{rec.case_id}.nii.gz"
    if path.exists():
        return check_labelmap(load_nifti(path))
    return _zeros_like_image(manifest, rec)


def _merge_case(work: Path, manifest: Manifest, config: PipelineConfig, rec: CaseRecord) -> Volume:
    organ = _phase_component(work, manifest, config, rec, "organ")
    tumor = _phase_component(work, manifest, config, rec, "tumor")
    merged = merge_organ_tumor(organ, tumor, config.fusion.tumor_overrides_organ)
    if config.external_label_dirs:
        sources = [("own", merged)]
        for name, directory in config.external_label_dirs.items():
            for ext in (".nii.gz", ".nii"):
                path = Path(directory) / f"{rec.case_id}{ext}"
                if path.exists():
                    sources.append((name, check_labelmap(load_nifti(path))))
                    break
            else:
                log.warning("external source %s has no label for %s", name, rec.case_id)
        if len(sources) > 1:
            merged = majority_vote(sources, config.fusion)
    if rec.label_path and rec.case_id not in set(config.eval_cases):
        gt = check_labelmap(load_nifti(manifest.label_file(rec)))
        merged = merge_partial(PartialLabel(gt, rec.annotated_classes), merged, config.fusion)
    return merged


def run_merge(state: PipelineState, manifest: Manifest, config: PipelineConfig) -> PipelineState:
    """Combine per-phase labels (and external sources) into final maps."""
    if state.phase != MERGE:
        raise PipelineError(f"state is in phase {state.phase!r}, not {MERGE!r}")
    work = state.work_dir
    final_dir = work / "final"
    final_dir.mkdir(parents=True, exist_ok=True)
    todo = []
    for rec in manifest.cases:
        entry = state.case_entry(rec.case_id) or {}
        if entry.get("status") == FUSED and _files_match(
            entry.get("digest"), final_dir / f"{rec.case_id}.nii.gz"
        ):
            continue
        todo.append(rec)

    def merge_one(rec: CaseRecord):
        try:
            merged = _merge_case(work, manifest, config, rec)
            path = final_dir / f"{rec.case_id}.nii.gz"
            save_nifti(merged, path)
            return rec.case_id, {
                "status": FUSED,
                "digest": _sha256(path),
                "foreground": int((merged.data > 0).sum()),
            }
        except (VoxsegError, OSError) as exc:
            log.warning("merge failed for %s: %s", rec.case_id, exc)
            return rec.case_id, {"status": FAILED, "error": str(exc)}

    _foreach_case(todo, merge_one, state, config.workers)
    entries = state.cases
    fused = sorted(c for c, e in entries.items() if e.get("status") == FUSED)
    record = {
        "phase": MERGE,
        "cases": len(manifest.cases),
        "fused": len(fused),
        "failed": sorted(c for c, e in entries.items() if e.get("status") == FAILED),
        "foreground_voxels": {c: entries[c].get("foreground", 0) for c in fused},
    }
    state.finish(record)
    return state


def _next_phase(config: PipelineConfig, current: str) -> str:
    order = list(config.phase_order) + [MERGE]
    return order[order.index(current) + 1]


def _validate_run(manifest: Manifest, config: PipelineConfig, contract) -> None:
    ids = {r.case_id for r in manifest.cases}
    for cid in config.eval_cases:
        if cid not in ids:
            raise PipelineError(f"eval case {cid!r} is not in the manifest")
        if manifest.case(cid).label_path is None:
            raise PipelineError(f"eval case {cid!r} has no ground-truth label to score against")
    if config.external_label_dirs:
        missing = [n for n in ("own", *config.external_label_dirs) if n not in config.fusion.source_priority]
        if missing:
            raise PipelineError(
                f"fusion.source_priority must rank every vote source; missing {missing}"
            )
    total_rounds = sum(config.rounds(p) for p in config.phase_order)
    if total_rounds > 0 and contract is None:
        raise PipelineError("config.segmenter is required when any phase has rounds > 0")


def _build_report(state: PipelineState) -> dict:
    finals = {
        cid: e["digest"]
        for cid, e in state.cases.items()
        if e.get("status") == FUSED and "digest" in e
    }
    return {
        "history": state.history,
        "final_labels": finals,
        "config": state.config_snapshot,
    }


def run_pipeline(
    manifest: Manifest,
    contract: SegmenterContract | None,
    config: PipelineConfig,
    work,
    resume: bool = True,
) -> dict:
    """Drive all configured phases to completion and write report.json."""
    _validate_run(manifest, config, contract)
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    state_path = work / "state.json"
    if resume and state_path.exists():
        state = PipelineState.load(state_path)
        snapshot = json.loads(json.dumps(config.to_dict()))
        if state.config_snapshot != snapshot:
            raise PipelineError(
                f"{state_path} was created with a different config; "
                "pass a fresh work directory or the original config"
            )
        log.info("resuming from %s (phase %s, round %d)", state_path, state.phase, state.round)
    else:
        state = PipelineState.fresh(state_path, config)

    while state.phase != DONE:
        phase = state.phase
        if phase in PHASE_CLASSES:
            if state.round >= config.rounds(phase):
                state.advance_phase(_next_phase(config, phase))
                continue
            run_phase(state, manifest, contract, config, phase)
        elif phase == MERGE:
            run_merge(state, manifest, config)
        else:
            raise PipelineError(f"corrupt state: unknown phase {phase!r}")

    report = _build_report(state)
    _write_json(report, work / "report.json")
    log.info("pipeline done: %d final label(s) in %s", len(report["final_labels"]), work / "final")
    return report
