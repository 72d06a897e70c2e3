import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from repainv import io
from repainv.config import (DEFAULTS, ConfigError, config_hash, defaults, dump_config, int_list,
                            load_config, override, parse_config, str_list)


def test_defaults_round_trip_through_text():
    cfg = defaults()
    assert parse_config(dump_config(cfg)) == cfg
    assert config_hash(parse_config(dump_config(cfg))) == config_hash(cfg)


def test_values_are_typed():
    cfg = parse_config("[solver]\nsteps = 20\nkappa = 1.5\nreeval_repa = yes\nkind = resample\n")
    assert cfg["solver"]["steps"] == 20 and isinstance(cfg["solver"]["steps"], int)
    assert cfg["solver"]["kappa"] == 1.5
    assert cfg["solver"]["reeval_repa"] is True
    assert cfg["solver"]["kind"] == "resample"
    assert cfg["flow"] == DEFAULTS["flow"]


@pytest.mark.parametrize("text,msg", [
    ("[solvr]\nsteps = 3\n", "unknown section"),
    ("[solver]\nstep = 3\n", "unknown key"),
    ("[solver]\nsteps = many\n", "cannot parse"),
    ("[solver]\nreeval_repa = maybe\n", "cannot parse"),
    ("steps = 3\n", "malformed"),
])
def test_bad_configs_fail_loudly(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_load_config(tmp_path):
    assert load_config(None) == defaults()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    p = tmp_path / "c.ini"
    p.write_text("[data]\nheldout_count = 64  # smaller\n")
    assert load_config(p)["data"]["heldout_count"] == 64


def test_override_and_hash_sensitivity():
    cfg = defaults()
    new = override(cfg, "solver", lam=0.05, steps=None)
    assert new["solver"]["lam"] == 0.05 and new["solver"]["steps"] == cfg["solver"]["steps"]
    assert cfg["solver"]["lam"] == DEFAULTS["solver"]["lam"]
    assert config_hash(new) != config_hash(cfg)
    assert config_hash(new, ["data", "ae"]) == config_hash(cfg, ["data", "ae"])
    with pytest.raises(ConfigError):
        override(cfg, "solver", lamda=1)


def test_lists():
    assert int_list("10, 20,40") == [10, 20, 40]
    assert str_list("a, b,,c") == ["a", "b", "c"]
    with pytest.raises(ConfigError):
        int_list("1,x")


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7))
    io.write_pgm(tmp_path / "a.pgm", img)
    back = io.read_pgm(tmp_path / "a.pgm")
    assert back.shape == (5, 7)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    with pytest.raises(ValueError):
        io.write_pgm(tmp_path / "b.pgm", np.zeros((2, 2, 2)))
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        io.read_pgm(tmp_path / "c.pgm")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_raw_round_trip_is_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("raw") / "x.f64"
    io.write_raw(p, arr)
    assert np.array_equal(io.read_raw(p), arr)


def test_csv_with_provenance(tmp_path):
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "c": "x"}]
    io.write_csv(tmp_path / "t.csv", rows, {"config_hash": "abc"})
    text = (tmp_path / "t.csv").read_text()
    assert text.startswith("# config_hash=abc\n")
    back = io.read_csv(tmp_path / "t.csv")
    assert back[0]["b"] == "0.1" and back[1]["c"] == "x" and back[0]["c"] == ""


def test_json_and_hashes(tmp_path):
    io.write_json(tmp_path / "s.json", {"v": np.float64(1.5), "a": np.arange(3), "p": tmp_path})
    assert '"v": 1.5' in (tmp_path / "s.json").read_text()
    with pytest.raises(TypeError):
        io.write_json(tmp_path / "bad.json", {"x": object()})
    (tmp_path / "u").write_text("1")
    (tmp_path / "v").write_text("2")
    h = io.tree_hash([tmp_path / "v", tmp_path / "u"])
    assert h == io.tree_hash([tmp_path / "u", tmp_path / "v"])
    assert io.file_hash(tmp_path / "u") != io.file_hash(tmp_path / "v")
