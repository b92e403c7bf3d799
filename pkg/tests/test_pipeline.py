import json
import sys

import numpy as np
import pytest

from voxseg.config import PipelineConfig, SegmenterContract, load_config
from voxseg.errors import PipelineError, SegmenterError
from voxseg.fixture import make_label
from voxseg.manifest import load_manifest
from voxseg.nifti import load_nifti, save_nifti
from voxseg.pipeline import (
    FUSED,
    MERGE,
    PHASE_CLASSES,
    PipelineState,
    _restrict,
    _student_records,
    _teacher_records,
    run_merge,
    run_phase,
    run_pipeline,
)
from voxseg.volume import ORGAN_CLASSES, Spacing, Volume

EXE = sys.executable


def _load(paths):
    return load_manifest(paths["manifest"]), load_config(paths["config"])


def test_phase_classes():
    assert PHASE_CLASSES["tumor"] == {14}
    assert PHASE_CLASSES["organ"] == set(ORGAN_CLASSES)


def test_restrict():
    data = np.array([[[0, 1, 3, 14]]], dtype=np.uint8)
    vol = Volume(data, Spacing(1, 1, 1))
    out = _restrict(vol, {14})
    assert out.data.ravel().tolist() == [0, 0, 0, 14]
    out2 = _restrict(vol, set(ORGAN_CLASSES))
    assert out2.data.ravel().tolist() == [0, 1, 3, 0]


def test_teacher_student_partition(fixture_dataset):
    manifest, config = _load(fixture_dataset)
    t_tumor = [r.case_id for r in _teacher_records(manifest, config, "tumor")]
    s_tumor = [r.case_id for r in _student_records(manifest, config, "tumor")]
    assert t_tumor == ["case_a", "case_b"]
    assert s_tumor == ["case_c", "case_d", "case_e", "case_f"]
    t_organ = [r.case_id for r in _teacher_records(manifest, config, "organ")]
    s_organ = [r.case_id for r in _student_records(manifest, config, "organ")]
    assert t_organ == ["case_a", "case_c"]
    assert s_organ == ["case_b", "case_d", "case_e", "case_f"]
    # held-out cases never teach, even when fully annotated
    open_config = load_config(fixture_dataset["config"], overrides=["eval_cases=[]"])
    assert "case_f" in [r.case_id for r in _teacher_records(manifest, open_config, "tumor")]


def test_state_roundtrip(tmp_path):
    config = PipelineConfig()
    state = PipelineState.fresh(tmp_path / "state.json", config)
    assert state.phase == "tumor" and state.round == 0
    assert not state.stage("trained")
    back = PipelineState.load(tmp_path / "state.json")
    assert back.data == state.data
    assert back.config_snapshot == json.loads(json.dumps(config.to_dict()))


def test_state_version_and_missing(tmp_path):
    with pytest.raises(PipelineError, match="cannot read state"):
        PipelineState.load(tmp_path / "absent.json")
    path = tmp_path / "state.json"
    PipelineState.fresh(path, PipelineConfig())
    data = json.loads(path.read_text())
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(PipelineError, match="state version"):
        PipelineState.load(path)


def test_state_mutators_persist(tmp_path):
    state = PipelineState.fresh(tmp_path / "state.json", PipelineConfig())
    state.mark_trained(["x", "y"])
    state.mark_predicted()
    state.set_case("x", {"status": FUSED, "digest": "d"})
    ondisk = json.loads((tmp_path / "state.json").read_text())
    assert ondisk["stage"] == {"trained": True, "predicted": True}
    assert ondisk["cases"]["x"]["status"] == FUSED
    assert ondisk["cases"]["y"]["status"] == "pseudo_labeled"
    assert ondisk["persist_count"] == 4
    state.end_round({"phase": "tumor", "round": 0})
    assert state.round == 1 and state.cases == {} and not state.stage("trained")


def test_run_phase_guards(fixture_dataset, tmp_path):
    manifest, config = _load(fixture_dataset)
    state = PipelineState.fresh(tmp_path / "state.json", config)
    with pytest.raises(PipelineError, match="unknown phase"):
        run_phase(state, manifest, config.segmenter, config, "bone")
    with pytest.raises(PipelineError, match="not 'organ'"):
        run_phase(state, manifest, config.segmenter, config, "organ")
    with pytest.raises(PipelineError, match="no segmenter contract"):
        run_phase(state, manifest, None, config, "tumor")


def test_run_phase_requires_teachers(fixture_dataset, tmp_path):
    manifest, _ = _load(fixture_dataset)
    # holding out every tumor-annotated case leaves nobody to teach
    config = load_config(
        fixture_dataset["config"],
        overrides=['eval_cases=["case_a","case_b","case_f"]'],
    )
    state = PipelineState.fresh(tmp_path / "state.json", config)
    with pytest.raises(PipelineError, match="no teacher cases"):
        run_phase(state, manifest, config.segmenter, config, "tumor")
    # nothing was staged or run
    assert not (tmp_path / "rounds").exists()


def test_nonzero_exit_aborts_round_with_state_intact(fixture_dataset, tmp_path):
    manifest, config = _load(fixture_dataset)
    contract = SegmenterContract(
        train_cmd=f'{EXE} -c "raise SystemExit(3)"',
        predict_cmd=f"{EXE} -c pass",
        output_mode="labels",
    )
    state = PipelineState.fresh(tmp_path / "state.json", config)
    with pytest.raises(SegmenterError, match="exited with 3"):
        run_phase(state, manifest, contract, config, "tumor")
    ondisk = PipelineState.load(tmp_path / "state.json")
    assert ondisk.phase == "tumor" and ondisk.round == 0
    assert not ondisk.stage("trained") and ondisk.cases == {}
    log_text = (tmp_path / "rounds" / "tumor_r0" / "logs" / "train.log").read_text()
    assert "SystemExit" in log_text or "$ " in log_text


def test_unlaunchable_command_raises(fixture_dataset, tmp_path):
    manifest, config = _load(fixture_dataset)
    contract = SegmenterContract(
        train_cmd="/nonexistent/segmenter-binary",
        predict_cmd=f"{EXE} -c pass",
        output_mode="labels",
    )
    state = PipelineState.fresh(tmp_path / "state.json", config)
    with pytest.raises(SegmenterError, match="cannot launch"):
        run_phase(state, manifest, contract, config, "tumor")


def test_missing_outputs_fail_cases_but_round_continues(fixture_dataset, tmp_path):
    manifest, config = _load(fixture_dataset)
    # exits 0 without writing anything: every student must fail cleanly
    contract = SegmenterContract(
        train_cmd=f"{EXE} -c pass",
        predict_cmd=f"{EXE} -c pass",
        output_mode="labels",
    )
    state = PipelineState.fresh(tmp_path / "state.json", config)
    run_phase(state, manifest, contract, config, "tumor")
    assert state.round == 1  # the round completed
    record = state.history[-1]
    assert record["fused"] == 0
    assert record["failed"] == ["case_c", "case_d", "case_e", "case_f"]
    assert record["eval"]["mean_dsc"] == 0.0
    assert json.loads((tmp_path / "state.json").read_text())["cases"] == {}


def test_full_run_report_shape(completed_run):
    report = completed_run["report"]
    phases = [(h["phase"], h.get("round")) for h in report["history"]]
    assert phases == [
        ("tumor", 0),
        ("tumor", 1),
        ("organ", 0),
        ("organ", 1),
        (MERGE, None),
    ]
    assert sorted(report["final_labels"]) == [f"case_{s}" for s in "abcdef"]
    for rec in report["history"][:4]:
        assert rec["fused"] >= 1
        assert rec["failed"] == []
    # round 0 of each phase misses case_f (its intensity offset sits outside
    # the teacher band); once round-0 pseudo-labels join training, the band
    # widens and round 1 captures it.
    voxels = [rec["foreground_voxels"] for rec in report["history"][:4]]
    assert voxels == [
        {"case_c": 64, "case_d": 64, "case_e": 64, "case_f": 0},
        {"case_c": 64, "case_d": 64, "case_e": 64, "case_f": 64},
        {"case_b": 192, "case_d": 192, "case_e": 192, "case_f": 0},
        {"case_b": 192, "case_d": 192, "case_e": 192, "case_f": 192},
    ]


def test_full_run_eval_improves_each_round(completed_run):
    scores = [h["eval"]["mean_dsc"] for h in completed_run["report"]["history"][:4]]
    assert scores == [0.0, 0.25, 0.25, 1.0]
    assert all(b >= a for a, b in zip(scores, scores[1:]))


def test_full_run_finals_match_designed_labels(completed_run):
    want = make_label((1, 3, 5, 14)).data
    for cid in [f"case_{s}" for s in "abcdef"]:
        got = load_nifti(completed_run["work"] / "final" / f"{cid}.nii.gz")
        assert np.array_equal(got.data, want), cid
        assert set(np.unique(got.data)) == {0, 1, 3, 5, 14}


def test_full_run_preserves_ground_truth(completed_run):
    manifest = completed_run["manifest"]
    for cid in ("case_a", "case_b", "case_c"):
        rec = manifest.case(cid)
        gt = load_nifti(manifest.label_file(rec))
        final = load_nifti(completed_run["work"] / "final" / f"{cid}.nii.gz")
        fg = gt.data != 0
        assert np.array_equal(final.data[fg], gt.data[fg]), cid


def test_full_run_students_join_later_training(completed_run):
    r1 = completed_run["work"] / "rounds" / "tumor_r1" / "train_images"
    names = sorted(p.name.split(".")[0] for p in r1.glob("*.nii*"))
    # teachers + fused students; the held-out case never trains
    assert names == ["case_a", "case_b", "case_c", "case_d", "case_e"]
    labels = sorted(p.name.split(".")[0] for p in (r1.parent / "train_labels").glob("*.nii*"))
    assert labels == names


def test_full_run_tta_inputs_on_disk(completed_run):
    pred = completed_run["work"] / "rounds" / "tumor_r0" / "predict_images"
    files = sorted(p.name for p in pred.glob("case_c__tta*.nii.gz"))
    assert files == [f"case_c__tta{k}.nii.gz" for k in range(8)]
    # raw outputs hold one probability map per class per flipped input
    raw = completed_run["work"] / "rounds" / "tumor_r0" / "predict_raw"
    probs = sorted(p.name for p in raw.glob("case_c__tta0_prob_*.nii.gz"))
    assert probs == ["case_c__tta0_prob_0.nii.gz", "case_c__tta0_prob_14.nii.gz"]


def test_full_run_per_round_eval_files(completed_run):
    for phase, rnd in (("tumor", 0), ("tumor", 1), ("organ", 0), ("organ", 1)):
        path = completed_run["work"] / "rounds" / f"{phase}_r{rnd}" / "eval.json"
        data = json.loads(path.read_text())
        assert data["n_cases"] == 1
        assert data["cases"][0]["case_id"] == "case_f"


def test_rerun_is_a_noop(completed_run):
    report = run_pipeline(
        completed_run["manifest"],
        completed_run["config"].segmenter,
        completed_run["config"],
        completed_run["work"],
    )
    assert report == completed_run["report"]


def test_resume_rejects_changed_config(completed_run):
    other = load_config(completed_run["dataset"]["config"], overrides=["nsd_tau=2.0"])
    with pytest.raises(PipelineError, match="different config"):
        run_pipeline(completed_run["manifest"], other.segmenter, other, completed_run["work"])


def test_validate_run_guards(fixture_dataset, tmp_path):
    manifest, _ = _load(fixture_dataset)
    bad_eval = load_config(fixture_dataset["config"], overrides=['eval_cases=["ghost"]'])
    with pytest.raises(PipelineError, match="not in the manifest"):
        run_pipeline(manifest, bad_eval.segmenter, bad_eval, tmp_path / "w1")
    unlabeled_eval = load_config(fixture_dataset["config"], overrides=['eval_cases=["case_d"]'])
    with pytest.raises(PipelineError, match="no ground-truth label"):
        run_pipeline(manifest, unlabeled_eval.segmenter, unlabeled_eval, tmp_path / "w2")
    no_contract = load_config(fixture_dataset["config"], overrides=["segmenter=null"])
    with pytest.raises(PipelineError, match="segmenter is required"):
        run_pipeline(manifest, None, no_contract, tmp_path / "w3")
    ext = load_config(
        fixture_dataset["config"],
        overrides=['external_label_dirs={"ext": "/tmp/x"}'],
    )
    with pytest.raises(PipelineError, match="source_priority"):
        run_pipeline(manifest, ext.segmenter, ext, tmp_path / "w4")


def _degenerate_config(paths, *extra):
    return load_config(
        paths["config"],
        overrides=["rounds_tumor=0", "rounds_organ=0", "segmenter=null", *extra],
    )


def test_degenerate_run_uses_only_ground_truth(fixture_dataset, tmp_path):
    manifest, _ = _load(fixture_dataset)
    config = _degenerate_config(fixture_dataset)
    report = run_pipeline(manifest, None, config, tmp_path / "work")
    assert [h["phase"] for h in report["history"]] == [MERGE]

    final = tmp_path / "work" / "final"
    full = make_label((1, 3, 5, 14)).data
    assert np.array_equal(load_nifti(final / "case_a.nii.gz").data, full)
    assert np.array_equal(load_nifti(final / "case_b.nii.gz").data, make_label((14,)).data)
    assert np.array_equal(load_nifti(final / "case_c.nii.gz").data, make_label((1, 3, 5)).data)
    # nothing is known for unlabeled or held-out cases
    assert not load_nifti(final / "case_d.nii.gz").data.any()
    assert not load_nifti(final / "case_f.nii.gz").data.any()


def test_external_sources_respect_priority(fixture_dataset, tmp_path):
    manifest, _ = _load(fixture_dataset)
    ext_dir = tmp_path / "ext"
    ext_dir.mkdir()
    claim = make_label((14,))
    save_nifti(claim, ext_dir / "case_d.nii.gz")

    ext_first = _degenerate_config(
        fixture_dataset,
        f'external_label_dirs={{"ext": "{ext_dir}"}}',
        'fusion.source_priority=["ext","own"]',
    )
    run_pipeline(manifest, None, ext_first, tmp_path / "w1")
    got = load_nifti(tmp_path / "w1" / "final" / "case_d.nii.gz")
    assert np.array_equal(got.data, claim.data)

    own_first = _degenerate_config(
        fixture_dataset,
        f'external_label_dirs={{"ext": "{ext_dir}"}}',
        'fusion.source_priority=["own","ext"]',
    )
    run_pipeline(manifest, None, own_first, tmp_path / "w2")
    got = load_nifti(tmp_path / "w2" / "final" / "case_d.nii.gz")
    assert not got.data.any()
    # ground truth still wins over any vote outcome
    got_a = load_nifti(tmp_path / "w1" / "final" / "case_a.nii.gz")
    assert np.array_equal(got_a.data, make_label((1, 3, 5, 14)).data)


def test_merge_digest_skip_and_redo(fixture_dataset, tmp_path):
    manifest, _ = _load(fixture_dataset)
    config = _degenerate_config(fixture_dataset)
    work = tmp_path / "work"
    run_pipeline(manifest, None, config, work)

    final = work / "final"
    pristine = (final / "case_a.nii.gz").read_bytes()
    b_mtime = (final / "case_b.nii.gz").stat().st_mtime_ns

    # tamper with one final map, then rewind the state to the merge stage
    save_nifti(make_label(()), final / "case_a.nii.gz")
    state = PipelineState.load(work / "state.json")
    state.data["phase"] = MERGE
    state.persist()
    run_merge(state, manifest, config)

    assert (final / "case_a.nii.gz").read_bytes() == pristine  # redone
    assert (final / "case_b.nii.gz").stat().st_mtime_ns == b_mtime  # skipped


def test_workers_two_reproduces_single_worker_run(completed_run, tmp_path):
    config = load_config(completed_run["dataset"]["config"], overrides=["workers=2"])
    report = run_pipeline(completed_run["manifest"], config.segmenter, config, tmp_path / "work")
    assert report["final_labels"] == completed_run["report"]["final_labels"]


def test_labels_mode_contract(fixture_dataset, tmp_path):
    # the same pipeline works when the segmenter emits label maps directly
    manifest, _ = _load(fixture_dataset)
    base = json.loads(fixture_dataset["config"].read_text())
    seg = base["segmenter"]
    config = load_config(
        fixture_dataset["config"],
        overrides=[
            'segmenter.output_mode=labels',
            'segmenter.predict_cmd='
            + seg["predict_cmd"].replace("--mode probabilities", "--mode labels"),
            "rounds_tumor=2",
            "rounds_organ=2",
        ],
    )
    report = run_pipeline(manifest, config.segmenter, config, tmp_path / "work")
    scores = [h["eval"]["mean_dsc"] for h in report["history"][:4]]
    assert scores[-1] == 1.0
    want = make_label((1, 3, 5, 14)).data
    got = load_nifti(tmp_path / "work" / "final" / "case_f.nii.gz")
    assert np.array_equal(got.data, want)
