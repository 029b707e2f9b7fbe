import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcom import io
from lcom.config import RunConfig, dump_config, load_config
from lcom.surrogate import ComsConfig


def test_defaults():
    cfg = RunConfig()
    assert len(cfg.compositions) == 10 and cfg.seeds == [17, 43, 101]
    assert cfg.threshold == 0.2 and cfg.global_budget == 2000 and cfg.optimizer.steps == 50


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig(compositions=["AB2"], surrogate=ComsConfig(tau=1.0), master_seed=3)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_partial_file_takes_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("schema_version: 1\ncompositions: [AB]\nsurrogate: {epochs: 7}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.compositions == ["AB"] and cfg.surrogate.epochs == 7
    assert cfg.surrogate.hidden == ComsConfig().hidden


@pytest.mark.parametrize(
    "text",
    ["schema_version: 2\n", "bogus: 1\n", "threshold: 1.5\n", "compositions: []\n", "global_budget: 0\n", "surrogate: {tau: -1}\n"],
)
def test_invalid_configs(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises((ValueError, TypeError)):
        load_config(tmp_path / "c.yaml")


@given(st.floats(allow_nan=False))
def test_floats_round_trip_exactly(x):
    assert io.loads(io.dumps(x)) == x


def test_special_values_and_arrays():
    assert io.dumps([math.inf, -math.inf]) == "[Infinity,-Infinity]"
    assert math.isnan(io.loads(io.dumps(math.nan)))
    a = np.arange(6, dtype=float).reshape(2, 3) / 7
    assert np.array_equal(np.array(io.loads(io.dumps(a))), a)
    assert io.dumps({"b": 1, "a": True, "c": None}) == '{"b":1,"a":true,"c":null}'
    with pytest.raises(TypeError):
        io.dumps(object())


def test_lines_round_trip(tmp_path):
    objs = [{"x": 0.1, "n": 2}, {"x": 1e-300, "n": -1}]
    io.write_lines(tmp_path / "r.jsonl", objs)
    assert io.read_lines(tmp_path / "r.jsonl") == objs


def test_optimizer_presets(tmp_path):
    (tmp_path / "c.yaml").write_text("optimizer: oqmd-analog\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.optimizer.steps == 10 and cfg.optimizer.step_size == RunConfig().optimizer.step_size
    assert RunConfig.from_dict({"optimizer": "matbench-analog"}).optimizer.steps == 40
    with pytest.raises(ValueError):
        RunConfig.from_dict({"optimizer": "nope"})
