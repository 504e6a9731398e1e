"""
Test configuration loading: defaults, YAML, key = value files, environment and overrides
"""
from pathlib import Path

import pytest

from csg.config import MODES, expand_env, load_config, parse_key_value
from csg.errors import (
    ConfigError,
    DegenerateAlignmentError,
    DisconnectedMeshError,
    MeshFormatError,
    TrainingDivergedError,
)

REPO_ROOT = Path(__file__).resolve().parents[2]


def test_defaults_validate():
    config = load_config()

    assert config.network.layer_sizes() == (4, 32, 64, 32)
    assert config.training.patience == 10
    assert config.mrf.sweep == (0.1, 0.2, 0.5, 1.0, 2.0)
    assert config.runtime.modes == MODES


def test_shipped_yaml_loads(monkeypatch):
    monkeypatch.delenv("CSG_DATA_DIR", raising=False)
    monkeypatch.setenv("CSG_OUT_DIR", "/tmp/csg-out")

    config = load_config(str(REPO_ROOT / "csg.yaml"))

    assert config.runtime.data_dir == "data"
    assert config.runtime.out_dir == "/tmp/csg-out"
    assert config.network.hidden_maps == (32, 64)
    assert config.network.expected_neighbors == 7.0
    assert config.mrf.lambda_ is None


def test_key_value_file_and_flag_overrides(tmp_path):
    """
    WHAT: A key = value file overridden by command-line values.

    WHY: Flags must win over the file, which must win over the defaults.

    EXPECTED: file values where no flag is given, flag values otherwise
    """
    path = tmp_path / "run.conf"
    path.write_text(
        "# comment\n"
        "training.learning_rate = 0.05\n"
        "training.max_epochs = 12\n"
        "runtime.modes = euclidean, spectral\n"
        "mrf.sweep = [0.5, 1.0]\n",
        encoding="utf-8",
    )

    config = load_config(str(path), {"training": {"max_epochs": 3}, "runtime": {"workers": 2}})

    assert config.training.learning_rate == 0.05
    assert config.training.max_epochs == 3
    assert config.runtime.modes == ("euclidean", "spectral")
    assert config.runtime.workers == 2
    assert config.mrf.sweep == (0.5, 1.0)


def test_parse_key_value_nests_dotted_keys():
    tree = parse_key_value("a.b = 1\na.c = text\nd = true\n")
    assert tree == {"a": {"b": 1, "c": "text"}, "d": True}


def test_parse_key_value_reports_the_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_key_value("a = 1\nnot a pair\n", source="x.conf")


def test_env_expansion(monkeypatch):
    monkeypatch.setenv("CSG_TEST_DIR", "/data/cohort")
    monkeypatch.delenv("CSG_TEST_MISSING", raising=False)

    assert expand_env("dir: ${CSG_TEST_DIR}") == "dir: /data/cohort"
    assert expand_env("dir: ${CSG_TEST_MISSING:-fallback}") == "dir: fallback"
    with pytest.raises(ConfigError):
        expand_env("dir: ${CSG_TEST_MISSING}")


@pytest.mark.parametrize("overrides", [
    {"training": {"bogus": 1}},
    {"training": {"max_epochs": 2.5}},
    {"training": {"learning_rate": "fast"}},
    {"runtime": {"modes": ("spectral", "geodesic")}},
    {"runtime": {"workers": 0}},
    {"runtime": {"checkpoint_format": "npz"}},
    {"network": {"n_parcels": 16}},
    {"synth": 3},
])
def test_invalid_values_are_config_errors(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.yaml"))

    bad = tmp_path / "bad.yaml"
    bad.write_text("training: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_config_error_maps_to_usage_exit_code():
    assert ConfigError("x").exit_code == 2


def test_error_families_carry_their_exit_codes():
    """
    WHAT: Concrete errors from each family.

    WHY: The CLI returns ``exit_code`` of whatever error reaches it, so every
         subclass must inherit its family's code.

    EXPECTED: data errors 3, numerical errors 4
    """
    assert MeshFormatError("m.off", 3, "bad count").exit_code == 3
    assert DisconnectedMeshError([10, 2]).exit_code == 3
    assert DegenerateAlignmentError([1.0, 0.0, 0.0]).exit_code == 4
    assert TrainingDivergedError(7, None).exit_code == 4
