"""Unit tests for sample extraction, archives and splits."""

import json

import numpy as np
import pytest
import torch
from torch.utils.data import DataLoader

from src.intersection_forecast.dataset import (
    Sample,
    SampleArchive,
    SampleDataset,
    SplitManifest,
    attach_rasters,
    extract_dataset,
    extract_samples,
    read_samples,
    sample_key,
    split,
    write_samples,
)
from src.intersection_forecast.exceptions import (
    SchemaVersionMismatch,
    ShapeMismatch,
    UnknownSample,
)
from src.intersection_forecast.simgen import IntersectionKind, Scenario

pytestmark = pytest.mark.unit


def bare_sample(scenario_id, agent_id="agent_000", t_index=11):
    return Sample(np.zeros((12, 2)), np.zeros((15, 2)), scenario_id, agent_id, t_index)


@pytest.fixture
def inline_samples(straight_scenario, small_raster_config):
    """Samples of the straight scenario with rasters rendered."""
    return extract_samples(
        straight_scenario.graph,
        straight_scenario.tracks,
        config=small_raster_config,
        scenario_id=straight_scenario.scenario_id,
    )


class TestSample:
    """Test Sample validation."""

    def test_key(self):
        """Test the sample key format."""
        assert bare_sample("scn_1").key == "scn_1:agent_000:11"
        assert sample_key("a", "b", 3) == "a:b:3"

    def test_float32_positions(self):
        """Test positions are stored as float32."""
        sample = bare_sample("scn_1")
        assert sample.history_positions.dtype == np.float32
        assert (sample.m, sample.n) == (12, 15)

    def test_bad_shape(self):
        """Test positions must be (k, 2)."""
        with pytest.raises(ShapeMismatch):
            Sample(np.zeros((12, 3)), np.zeros((15, 2)), "s", "a", 11)
        with pytest.raises(ShapeMismatch):
            Sample(np.zeros((12, 2)), np.zeros(15), "s", "a", 11)

    def test_no_rasters(self):
        """Test raster_array requires rasters."""
        sample = bare_sample("scn_1")
        assert not sample.has_rasters
        with pytest.raises(ValueError):
            sample.raster_array()


class TestExtractSamples:
    """Test sliding-window extraction."""

    def test_single_window(self, straight_road, track_factory):
        """Test m + n states give exactly one sample."""
        samples = extract_samples(straight_road, [track_factory(count=27)], inline_rasters=False)
        assert len(samples) == 1
        assert samples[0].t_index == 11

    def test_stride_one(self, straight_road, track_factory):
        """Test four extra states give four extra samples."""
        samples = extract_samples(straight_road, [track_factory(count=31)], inline_rasters=False)
        assert [s.t_index for s in samples] == [11, 12, 13, 14, 15]

    def test_too_short(self, straight_road, track_factory):
        """Test a track shorter than m + n yields nothing."""
        assert extract_samples(straight_road, [track_factory(count=26)]) == []

    def test_ego_frame_positions(self, straight_road, track_factory):
        """Test a northbound track maps to straight ahead in the ego frame."""
        (sample,) = extract_samples(
            straight_road, [track_factory(count=27)], inline_rasters=False
        )
        expected_future = np.stack([np.zeros(15), 4.0 * np.arange(1, 16)], axis=1)
        expected_history = np.stack([np.zeros(12), -4.0 * np.arange(11, -1, -1)], axis=1)
        assert np.allclose(sample.future_positions, expected_future, atol=1e-5)
        assert np.allclose(sample.history_positions, expected_history, atol=1e-5)
        assert sample.origin == pytest.approx((0.0, 44.0))

    def test_inline_rasters(self, inline_samples, small_raster_config):
        """Test each sample carries m rasters of the configured size."""
        assert [s.key for s in inline_samples] == [
            "scn_straight:agent_000:11",
            "scn_straight:agent_000:12",
        ]
        arrays = inline_samples[0].raster_array()
        assert arrays.shape == (12, 2, 16, 16)
        assert arrays.dtype == np.uint8

    def test_invalid_lengths(self, straight_road, track_factory):
        """Test m and n must be positive."""
        with pytest.raises(ValueError):
            extract_samples(straight_road, [track_factory()], m=0)

    def test_off_road_windows_skipped(self, straight_road, track_factory, small_raster_config):
        """Test windows outside every lane are counted and dropped."""
        scenario = Scenario(
            "scn_off",
            straight_road,
            [track_factory("lost", start=(50.0, 0.0))],
            IntersectionKind.FOUR_LEG,
            0,
        )
        samples, skipped = extract_dataset([scenario], config=small_raster_config)
        assert samples == []
        assert skipped == 1

    def test_attach_matches_inline(self, straight_scenario, inline_samples, small_raster_config):
        """Test rasters rendered later equal rasters rendered inline."""
        bare = extract_samples(
            straight_scenario.graph,
            straight_scenario.tracks,
            scenario_id=straight_scenario.scenario_id,
            inline_rasters=False,
        )
        assert not bare[0].has_rasters
        attached = attach_rasters(
            bare, {straight_scenario.scenario_id: straight_scenario}, small_raster_config
        )
        assert attached == inline_samples

    def test_attach_unknown_scenario(self, small_raster_config):
        """Test attaching rasters without the sample's scenario."""
        with pytest.raises(UnknownSample):
            attach_rasters([bare_sample("scn_missing")], {}, small_raster_config)

    def test_extract_dataset_keeps_order(self, straight_scenario, small_raster_config):
        """Test samples follow scenario order."""
        other = Scenario.from_dict({**straight_scenario.to_dict(), "scenario_id": "scn_b"})
        samples, skipped = extract_dataset(
            [straight_scenario, other], config=small_raster_config, inline_rasters=False
        )
        assert skipped == 0
        assert [s.scenario_id for s in samples] == ["scn_straight"] * 2 + ["scn_b"] * 2

    @pytest.mark.slow
    def test_worker_pool_matches_serial(self, straight_scenario, small_raster_config):
        """Test the process pool returns the serial result."""
        other = Scenario.from_dict({**straight_scenario.to_dict(), "scenario_id": "scn_b"})
        serial, _ = extract_dataset([straight_scenario, other], config=small_raster_config)
        pooled, _ = extract_dataset(
            [straight_scenario, other], config=small_raster_config, workers=2
        )
        assert pooled == serial


class TestSplit:
    """Test scenario-level splitting."""

    def test_three_one_one(self):
        """Test five scenarios split 3/1/1."""
        samples = [bare_sample(f"s{i}") for i in range(5)]
        manifest = split(samples, seed=0)
        assert [len(manifest.scenarios[k]) for k in ("train", "val", "test")] == [3, 1, 1]

    def test_hundred_scenarios(self):
        """Test the ratio is respected on a larger set."""
        samples = [bare_sample(f"s{i:03d}") for i in range(100)]
        manifest = split(samples, seed=4)
        assert len(manifest.train) == 60
        assert len(manifest.val) == 20
        assert len(manifest.test) == 20

    def test_no_scenario_in_two_splits(self):
        """Test every scenario's samples land in one split."""
        samples = [bare_sample(f"s{i}", t_index=t) for i in range(10) for t in (11, 12, 13)]
        manifest = split(samples, seed=3)
        owners = {}
        for name in ("train", "val", "test"):
            for key in manifest.keys(name):
                owners.setdefault(key.split(":")[0], set()).add(name)
        assert all(len(names) == 1 for names in owners.values())
        assert sum(len(manifest.keys(n)) for n in ("train", "val", "test")) == 30

    def test_deterministic(self):
        """Test the same seed gives the same manifest."""
        samples = [bare_sample(f"s{i}") for i in range(20)]
        assert split(samples, seed=9) == split(samples, seed=9)
        assert split(samples, seed=9).train != split(samples, seed=10).train

    def test_bad_ratio(self):
        """Test invalid ratios are rejected."""
        with pytest.raises(ValueError):
            split([bare_sample("s0")], ratio=(1, 1))
        with pytest.raises(ValueError):
            split([bare_sample("s0")], ratio=(0, 0, 0))

    def test_save_and_load(self, tmp_path):
        """Test manifests persist as JSON."""
        manifest = split([bare_sample(f"s{i}") for i in range(5)], seed=1)
        path = manifest.save(str(tmp_path / "split.json"))
        assert SplitManifest.load(str(path)) == manifest

    def test_unknown_split_name(self):
        """Test keys() with an unknown split."""
        with pytest.raises(ValueError):
            split([bare_sample("s0")]).keys("holdout")

    def test_load_missing(self, tmp_path):
        """Test loading a missing manifest."""
        with pytest.raises(FileNotFoundError):
            SplitManifest.load(str(tmp_path / "none.json"))


class TestSampleArchive:
    """Test the on-disk archive."""

    def test_write_and_read(self, inline_samples, small_raster_config, tmp_path):
        """Test archived samples equal the originals."""
        root = write_samples(inline_samples, str(tmp_path / "ds"), small_raster_config)
        archive = SampleArchive(str(root))
        assert len(archive) == 2
        assert (archive.m, archive.n) == (12, 15)
        assert archive.raster_config == small_raster_config
        assert archive[0] == inline_samples[0]
        assert archive["scn_straight:agent_000:12"] == inline_samples[1]
        assert read_samples(str(root)) == inline_samples

    def test_rasters_stored_once(self, inline_samples, small_raster_config, tmp_path):
        """Test overlapping windows share raster blobs."""
        root = write_samples(inline_samples, str(tmp_path / "ds"), small_raster_config)
        manifest = json.loads((root / "manifest.json").read_text())
        assert len(manifest["rasters"]) == 13
        assert len(list((root / "blobs").glob("r*.bin"))) == 13

    def test_rewrite_leaves_no_orphan_blobs(self, inline_samples, small_raster_config, tmp_path):
        """Test rewriting a smaller archive removes blobs the new manifest doesn't reference."""
        path = str(tmp_path / "ds")
        write_samples(inline_samples, path, small_raster_config)
        root = write_samples(inline_samples[:1], path, small_raster_config)
        manifest = json.loads((root / "manifest.json").read_text())
        referenced = {ref["blob"] for ref in manifest["rasters"].values()}
        for entry in manifest["samples"]:
            referenced.add(entry["history_positions"]["blob"])
            referenced.add(entry["future_positions"]["blob"])
        on_disk = {f"blobs/{p.name}" for p in (root / "blobs").iterdir()}
        assert on_disk == referenced
        assert len(on_disk) == 14
        assert read_samples(str(root)) == inline_samples[:1]

    def test_positions_little_endian_float32(self, inline_samples, tmp_path):
        """Test position blobs hold raw float32 values."""
        root = write_samples(inline_samples, str(tmp_path / "ds"))
        manifest = json.loads((root / "manifest.json").read_text())
        ref = manifest["samples"][0]["future_positions"]
        raw = np.frombuffer((root / ref["blob"]).read_bytes(), dtype="<f4")
        assert raw.size == 30
        assert np.array_equal(raw.reshape(15, 2), inline_samples[0].future_positions)

    def test_mixed_lengths_rejected(self, tmp_path):
        """Test all samples in an archive share m and n."""
        short = Sample(np.zeros((5, 2)), np.zeros((15, 2)), "s", "a", 4)
        with pytest.raises(ShapeMismatch):
            write_samples([bare_sample("s"), short], str(tmp_path / "ds"))

    def test_schema_version_mismatch(self, inline_samples, tmp_path):
        """Test an archive from another schema version."""
        root = write_samples(inline_samples, str(tmp_path / "ds"))
        manifest_path = root / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["schema_version"] = 999
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(SchemaVersionMismatch):
            SampleArchive(str(root))

    def test_missing_archive(self, tmp_path):
        """Test opening a missing archive."""
        with pytest.raises(FileNotFoundError):
            SampleArchive(str(tmp_path / "nothing"))

    def test_unknown_key(self, inline_samples, tmp_path):
        """Test looking up a missing key."""
        archive = SampleArchive(str(write_samples(inline_samples, str(tmp_path / "ds"))))
        assert "scn_straight:agent_000:11" in archive
        with pytest.raises(UnknownSample):
            archive["scn_straight:agent_000:99"]

    def test_empty_archive(self, tmp_path):
        """Test an archive without samples."""
        root = write_samples([], str(tmp_path / "ds"), m=4, n=6)
        archive = SampleArchive(str(root))
        assert len(archive) == 0
        assert (archive.m, archive.n) == (4, 6)


class TestSampleDataset:
    """Test the torch Dataset."""

    def test_item_shapes(self, inline_samples):
        """Test tensor shapes and dtypes."""
        item = SampleDataset(inline_samples)[1]
        assert item["history"].shape == (12, 2)
        assert item["history"].dtype == torch.float32
        assert item["future"].shape == (15, 2)
        assert item["rasters"].shape == (12, 2, 16, 16)
        assert item["rasters"].dtype == torch.uint8
        assert int(item["index"]) == 1

    def test_without_rasters(self, inline_samples):
        """Test rasters can be left out."""
        item = SampleDataset(inline_samples, with_rasters=False)[0]
        assert "rasters" not in item

    def test_keys_select_subset(self, inline_samples, tmp_path):
        """Test keys select and order samples from an archive."""
        archive = SampleArchive(str(write_samples(inline_samples, str(tmp_path / "ds"))))
        dataset = SampleDataset(archive, keys=["scn_straight:agent_000:12"])
        assert len(dataset) == 1
        assert dataset.sample(0).t_index == 12

    def test_unknown_key(self, inline_samples):
        """Test a key missing from in-memory samples."""
        with pytest.raises(UnknownSample):
            SampleDataset(inline_samples, keys=["nope:agent:0"])

    def test_batches(self, inline_samples):
        """Test default collation stacks the items."""
        batch = next(iter(DataLoader(SampleDataset(inline_samples), batch_size=2)))
        assert batch["history"].shape == (2, 12, 2)
        assert batch["rasters"].shape == (2, 12, 2, 16, 16)
