"""End-to-end tests for the forecasting pipeline.

These tests drive the command line through a complete, deliberately tiny run:
- Generating scenarios
- Extracting and splitting samples
- Training and evaluating two models
- Predicting one sample and plotting the results

Run with: pytest -m e2e
"""

import csv
import json

import pytest

from src.intersection_forecast.checkpoint import CheckpointManager
from src.intersection_forecast.cli import main
from src.intersection_forecast.dataset import SampleArchive, SplitManifest
from src.intersection_forecast.simgen import read_scenarios

pytestmark = pytest.mark.e2e

TINY_RUN = {
    "seed": 4,
    "generate": {
        "count": 5,
        "agent_count": 3,
        "lanes_per_approach": 1,
        "speed_range": [4.0, 8.0],
        "behavior_mix": {"straight": 1.0, "turn_left": 1.0, "turn_right": 1.0},
    },
    "raster": {"height_px": 16, "width_px": 16, "resolution": 4.0},
    "model": {
        "scene_conv3d_channels": 2,
        "scene_conv2d_channels": 3,
        "scene_fc_width": 8,
        "seq_hidden": 6,
        "seq_conv_channels": 4,
        "refiner_width": 4,
        "decoder_hidden": 6,
        "decoder_fc": [8, 8],
        "baseline_hidden": 8,
        "baseline_fc": 8,
    },
    "train": {"max_epochs": 2, "batch_size": 32},
}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep host config files and .env out of the run."""
    monkeypatch.delenv("FORECAST_CONFIG", raising=False)
    monkeypatch.setattr("src.intersection_forecast.config.load_dotenv", lambda: None)


@pytest.fixture
def run_config(tmp_path):
    """Write the tiny run configuration and return the CLI prefix using it."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    return ["--config", str(path), "--out", str(tmp_path / "run"), "--quiet"]


class TestPipelineWorkflow:
    """End-to-end tests for the generate -> train -> evaluate -> plot workflow."""

    @pytest.mark.timeout(600)
    def test_complete_pipeline(self, run_config, tmp_path, capsys):
        """Test the whole pipeline through main()."""
        out = tmp_path / "run"

        # Step 1: Generate scenarios
        assert main([*run_config, "generate"]) == 0
        scenarios = read_scenarios(str(out / "scenarios.jsonl"))
        assert [s.scenario_id for s in scenarios] == [f"scn_{4 + i:06d}" for i in range(5)]

        # Step 2: Extract samples and split by scenario
        assert main([*run_config, "build-dataset"]) == 0
        manifest = SplitManifest.load(str(out / "dataset" / "split.json"))
        archive = SampleArchive(str(out / "dataset"))
        assert len(manifest.train) + len(manifest.val) + len(manifest.test) == len(archive)
        assert [len(manifest.scenarios[name]) for name in ("train", "val", "test")] == [3, 1, 1]
        assert archive[manifest.test[0]].raster_array().shape == (12, 2, 16, 16)

        # Step 3: Train the baseline and the full model
        assert main([*run_config, "train", "--model", "lstm", "--model", "sapi"]) == 0
        manager = CheckpointManager(str(out / "checkpoints"))
        assert manager.exists("lstm") and manager.exists("sapi")
        with open(out / "reports" / "train_sapi.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["epoch", "train_loss", "val_loss", "val_ade"]
        assert 1 <= len(rows) - 1 <= 2

        # Step 4: Evaluate on the test split
        assert main([*run_config, "evaluate", "--model", "lstm", "--model", "sapi"]) == 0
        with open(out / "reports" / "comparison.csv", newline="") as handle:
            table = list(csv.reader(handle))
        assert [row[0] for row in table[1:]] == ["lstm", "sapi"]
        assert (out / "reports" / "eval_sapi_by_behavior.json").exists()

        # Step 5: Predict one test sample
        key = manifest.test[0]
        assert main([*run_config, "predict", "--sample", key]) == 0
        dump_path = out / "predictions" / f"sapi_{key.replace(':', '_')}.json"
        dump = json.loads(dump_path.read_text())
        assert dump["key"] == key
        assert len(dump["prediction"]) == 15

        # Step 6: Plot curves and overlays
        capsys.readouterr()
        assert main([*run_config, "plot"]) == 0
        assert "wrote 2 figures" in capsys.readouterr().out
        assert (out / "plots" / "step_errors.png").exists()
        assert (out / "plots" / f"{dump_path.stem}.png").exists()

    def test_generation_is_reproducible(self, run_config, tmp_path):
        """Test two runs with one seed write identical scenario files."""
        other = tmp_path / "again"
        assert main([*run_config, "generate"]) == 0
        assert main([*run_config, "--out", str(other), "generate"]) == 0
        first = (tmp_path / "run" / "scenarios.jsonl").read_bytes()
        assert (other / "scenarios.jsonl").read_bytes() == first

    def test_unknown_sample(self, run_config):
        """Test predicting a key that isn't in the archive."""
        assert main([*run_config, "generate"]) == 0
        assert main([*run_config, "build-dataset"]) == 0
        assert main([*run_config, "predict", "--sample", "scn_999999:agent_000:11"]) == 2

    @pytest.mark.slow
    @pytest.mark.timeout(1200)
    def test_benchmark_over_seeds(self, run_config, tmp_path, capsys):
        """Test the multi-seed benchmark writes one summary row per model."""
        out = tmp_path / "run"
        argv = [*run_config, "benchmark", "--seeds", "1", "2", "--model", "lstm", "--model", "sapi"]
        assert main(argv) == 0
        assert (out / "benchmark" / "seed_1" / "reports" / "comparison.csv").exists()
        assert (out / "benchmark" / "seed_2" / "reports" / "comparison.csv").exists()
        with open(out / "reports" / "benchmark.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert [row[0] for row in rows[1:]] == ["lstm", "sapi"]
        assert all(row[1] == "2" for row in rows[1:])
        summary = json.loads((out / "reports" / "benchmark.json").read_text())
        assert sorted(summary["runs"]) == ["1", "2"]
        assert "mean 6s ADE ranking" in capsys.readouterr().out
