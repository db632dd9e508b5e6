"""Unit tests for run configuration loading."""

import json
from pathlib import Path

import pytest

from src.intersection_forecast.config import (
    GenerateConfig,
    PathsConfig,
    RunConfig,
    apply_override,
    load_run_config,
    parse_override,
)
from src.intersection_forecast.exceptions import ConfigError
from src.intersection_forecast.simgen import IntersectionKind

pytestmark = pytest.mark.unit


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep credentials and config paths from the host out of these tests."""
    for name in ("NEO4J_URI", "NEO4J_USERNAME", "NEO4J_PASSWORD", "FORECAST_CONFIG"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr("src.intersection_forecast.config.load_dotenv", lambda: None)


class TestDefaults:
    """Test the default run configuration."""

    def test_defaults(self):
        """Test documented defaults."""
        config = load_run_config()
        assert config.seed == 0
        assert config.dataset.m == 12
        assert config.dataset.n == 15
        assert config.dataset.search_distance == 100.0
        assert config.raster.resolution == 0.5
        assert config.train.learning_rate == 0.003
        assert config.train.huber_r == 3.0
        assert config.map_store.uri == "bolt://localhost:7687"

    def test_model_follows_dataset_and_raster(self):
        """Test model input sizes are derived from the other sections."""
        config = RunConfig.model_validate(
            {"dataset": {"m": 8, "n": 5}, "raster": {"height_px": 32, "width_px": 48}}
        )
        assert (config.model.m, config.model.n) == (8, 5)
        assert (config.model.height_px, config.model.width_px) == (32, 48)

    def test_conflicting_model_size(self):
        """Test an explicit model size that disagrees with the dataset."""
        with pytest.raises(ConfigError):
            load_run_config(overrides=["model.m=5"])


class TestOverrides:
    """Test dot-path overrides."""

    def test_parse_json_value(self):
        """Test JSON values are decoded."""
        assert parse_override("train.max_epochs=3") == (["train", "max_epochs"], 3)
        assert parse_override("dataset.split_ratio=[1, 1, 1]") == (
            ["dataset", "split_ratio"],
            [1, 1, 1],
        )

    def test_parse_string_value(self):
        """Test non-JSON values stay strings."""
        assert parse_override("paths.out=runs/a") == (["paths", "out"], "runs/a")

    def test_malformed(self):
        """Test overrides without a path or equals sign."""
        with pytest.raises(ConfigError):
            parse_override("train.max_epochs")
        with pytest.raises(ConfigError):
            parse_override("=3")

    def test_apply_creates_sections(self):
        """Test missing sections are created."""
        data = {}
        apply_override(data, ["train", "seed"], 4)
        assert data == {"train": {"seed": 4}}

    def test_apply_into_scalar(self):
        """Test a path through a non-section value."""
        with pytest.raises(ConfigError):
            apply_override({"seed": 1}, ["seed", "x"], 2)

    def test_overrides_applied(self):
        """Test overrides reach the validated config."""
        config = load_run_config(overrides=["train.max_epochs=2", "generate.count=3"])
        assert config.train.max_epochs == 2
        assert config.generate.count == 3

    def test_unknown_key(self):
        """Test unknown keys are rejected."""
        with pytest.raises(ConfigError):
            load_run_config(overrides=["train.momentum=0.9"])

    def test_invalid_value(self):
        """Test values failing validation."""
        with pytest.raises(ConfigError):
            load_run_config(overrides=["train.learning_rate=-1"])


class TestConfigFile:
    """Test JSON config files and precedence."""

    def test_file_then_overrides_then_flags(self, tmp_path):
        """Test precedence: file < overrides < seed/out flags."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 1, "train": {"max_epochs": 7, "batch_size": 8}}))
        config = load_run_config(
            str(path), overrides=["train.max_epochs=4", "seed=2"], seed=5, out="runs/x"
        )
        assert config.train.batch_size == 8
        assert config.train.max_epochs == 4
        assert config.seed == 5
        assert config.paths.out == "runs/x"

    def test_env_names_config_file(self, tmp_path, monkeypatch):
        """Test FORECAST_CONFIG selects the file when no path is given."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 9}))
        monkeypatch.setenv("FORECAST_CONFIG", str(path))
        assert load_run_config().seed == 9

    def test_missing_file(self, tmp_path):
        """Test a config path that doesn't exist."""
        with pytest.raises(FileNotFoundError):
            load_run_config(str(tmp_path / "absent.json"))

    def test_bad_json(self, tmp_path):
        """Test a file that isn't JSON."""
        path = tmp_path / "run.json"
        path.write_text("{seed: 1")
        with pytest.raises(ConfigError):
            load_run_config(str(path))

    def test_not_an_object(self, tmp_path):
        """Test a JSON file that isn't an object."""
        path = tmp_path / "run.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_run_config(str(path))

    def test_credentials_from_environment(self, monkeypatch):
        """Test Neo4j credentials come from the environment."""
        monkeypatch.setenv("NEO4J_URI", "bolt://db:7687")
        monkeypatch.setenv("NEO4J_PASSWORD", "secret")
        config = load_run_config()
        assert config.map_store.uri == "bolt://db:7687"
        assert config.map_store.password == "secret"
        assert config.map_store.username == "neo4j"

    def test_file_credentials_win(self, tmp_path, monkeypatch):
        """Test credentials in the file beat the environment."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"map_store": {"uri": "bolt://file:7687"}}))
        monkeypatch.setenv("NEO4J_URI", "bolt://env:7687")
        assert load_run_config(str(path)).map_store.uri == "bolt://file:7687"


class TestSections:
    """Test helpers on config sections."""

    def test_paths_resolve(self):
        """Test default output locations under out."""
        paths = PathsConfig(out="runs/a", reports="elsewhere")
        assert paths.resolve("scenarios") == Path("runs/a/scenarios.jsonl")
        assert paths.resolve("reports") == Path("elsewhere")
        assert paths.split_file == Path("runs/a/dataset/split.json")

    def test_spec_for_cycles_kinds(self):
        """Test scenario specs take consecutive seeds and alternate kinds."""
        generate = GenerateConfig(agent_count=2)
        first, second = generate.spec_for(0, seed=10), generate.spec_for(3, seed=10)
        assert first.seed == 10 and first.intersection_kind == IntersectionKind.FOUR_LEG
        assert second.seed == 13 and second.intersection_kind == IntersectionKind.T_TYPE
        assert second.agent_count == 2
