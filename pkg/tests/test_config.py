import json

import pytest

from vibeam.config import ConfigError, default_config, dump_config, load_config, parse_config


def test_round_trip():
    cfg = default_config(seed=7, output="out")
    text = dump_config(cfg)
    back = parse_config(text)
    assert dump_config(back) == text
    assert back.scene.seed == 7 and back.train.seed == 7


def test_defaults_fill_missing_sections():
    cfg = parse_config('{"version": 1, "seed": 3}')
    assert cfg.scene.episodes == 2000 and cfg.train.seed == 3
    assert cfg.metrics.thresholds == (1, 2, 3)


def test_overrides_are_typed():
    cfg = parse_config(json.dumps({"version": 1, "scene": {"episodes": 10},
                                   "train": {"lr": 1}, "metrics": {"thresholds": [0, 2, 4]}}))
    assert cfg.scene.episodes == 10 and cfg.train.lr == 1
    assert cfg.metrics.thresholds == (0, 2, 4)


def test_unknown_key_reports_line():
    text = '{\n  "version": 1,\n  "scene": {\n    "episodez": 5\n  }\n}'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 4 and "episodez" in str(info.value)


def test_wrong_type_reports_line():
    text = '{\n  "version": 1,\n  "train": {"lr": "fast"}\n}'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 3


def test_section_seed_is_rejected():
    with pytest.raises(ConfigError, match="top-level seed"):
        parse_config('{"version": 1, "train": {"seed": 4}}')


def test_malformed_json_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config('{\n  "version": 1,\n  "seed": \n}')
    assert info.value.line == 4


@pytest.mark.parametrize("text", [
    "[]",
    '{"seed": 1}',
    '{"version": 2}',
    '{"version": 1, "seed": -1}',
    '{"version": 1, "seed": true}',
    '{"version": 1, "outptu": "x"}',
    '{"version": 1, "scene": []}',
    '{"version": 1, "metrics": {"thresholds": [3, 2, 1]}}',
    '{"version": 1, "pipeline": {"fractions": [0.0]}}',
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "nope.json")
