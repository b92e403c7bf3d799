import json

import pytest

from voxseg.config import (
    PipelineConfig,
    SegmenterContract,
    config_from_dict,
    load_config,
    parse_overrides,
    save_config,
)
from voxseg.errors import ConfigError
from voxseg.volume import ORGAN_CLASSES, Spacing


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.resample_target == "median"
    assert cfg.nsd_tau == 1.0
    assert cfg.tta is True
    assert cfg.connectivity == 26
    assert cfg.keep_largest_classes == ORGAN_CLASSES
    assert (cfg.rounds_tumor, cfg.rounds_organ) == (2, 2)
    assert cfg.phase_order == ("tumor", "organ")
    assert cfg.segmenter is None
    assert cfg.rounds("tumor") == 2 and cfg.rounds("organ") == 2
    assert cfg.nsd_params().tau == 1.0


def test_validation():
    with pytest.raises(ConfigError, match="connectivity"):
        PipelineConfig(connectivity=18)
    with pytest.raises(ConfigError, match="nonnegative"):
        PipelineConfig(rounds_tumor=-1)
    with pytest.raises(ConfigError, match="workers"):
        PipelineConfig(workers=0)
    with pytest.raises(ConfigError, match="phase_order"):
        PipelineConfig(phase_order=("tumor", "tumor"))
    with pytest.raises(ConfigError, match="nsd_tau"):
        PipelineConfig(nsd_tau=0.0)


def test_contract_validation():
    ok = SegmenterContract(
        train_cmd="train {train_dir} {label_dir} {model_dir}",
        predict_cmd="predict {model_dir} {input_dir} {output_dir}",
        output_mode="labels",
    )
    assert ok.output_mode == "labels"
    with pytest.raises(ConfigError, match="output_mode"):
        SegmenterContract("t", "p", output_mode="logits")
    with pytest.raises(ConfigError, match="placeholder"):
        SegmenterContract("train {bogus_dir}", "predict {input_dir}")
    with pytest.raises(ConfigError, match="placeholder"):
        SegmenterContract("train {train_dir}", "predict {train_dir}")


def test_roundtrip_via_file(tmp_path):
    cfg = PipelineConfig(
        resample_target=Spacing(1.0, 1.0, 2.5),
        nsd_tau=2.0,
        rounds_tumor=1,
        eval_cases=("case_f",),
        segmenter=SegmenterContract("t {model_dir}", "p {output_dir}"),
        keep_largest_classes=(1, 3),
    )
    path = tmp_path / "config.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    # file is plain JSON with lists, not tuples
    raw = json.loads(path.read_text())
    assert raw["resample_target"] == [1.0, 1.0, 2.5]
    assert raw["eval_cases"] == ["case_f"]


def test_parse_overrides():
    tree = parse_overrides(["nsd_tau=2.5", "fusion.min_votes=2", "resample_target=median"])
    assert tree == {"nsd_tau": 2.5, "fusion": {"min_votes": 2}, "resample_target": "median"}
    with pytest.raises(ConfigError, match="key=value"):
        parse_overrides(["nsd_tau"])


def test_override_types():
    tree = parse_overrides(
        ["tta=false", "eval_cases=[\"a\",\"b\"]", "fusion.source_priority=[\"own\",\"ext\"]"]
    )
    cfg = config_from_dict(tree)
    assert cfg.tta is False
    assert cfg.eval_cases == ("a", "b")
    assert cfg.fusion.source_priority == ("own", "ext")


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"nsd_tau": 1.0, "fusion": {"min_votes": 3}}))
    cfg = load_config(path, overrides=["nsd_tau=4.0"])
    assert cfg.nsd_tau == 4.0
    assert cfg.fusion.min_votes == 3  # untouched section keys survive the merge


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({"nsd_tua": 1.0})
    with pytest.raises(ConfigError, match="bad config"):
        config_from_dict({"normalization": {"meen": 3}})


def test_dotted_override_into_scalar_rejected():
    with pytest.raises(ConfigError, match="not a section"):
        parse_overrides(["nsd_tau=1", "nsd_tau.x=2"])
    with pytest.raises(ConfigError, match="bad config"):
        load_config(None, ["nsd_tau.x=1"])


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    path = tmp_path / "bad.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(path)


def test_to_dict_is_json_stable():
    cfg = PipelineConfig(resample_target=Spacing(2, 2, 2))
    d = cfg.to_dict()
    again = json.loads(json.dumps(d, sort_keys=True))
    assert config_from_dict(again) == cfg


def test_segmenter_null_allowed():
    cfg = config_from_dict({"segmenter": None})
    assert cfg.segmenter is None
