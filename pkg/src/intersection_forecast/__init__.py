"""Intersection Forecast - synthetic intersection traffic and scene-aware trajectory prediction."""

from .checkpoint import CheckpointManager
from .dataset import Sample, SampleArchive, SampleDataset, SplitManifest
from .lane_graph import LaneGraph, LaneSegment
from .map_store import LaneGraphStore
from .model import LstmBaseline, ModelConfig, ModelKind, SapiNet, build_model
from .raster import EnvRaster, RasterConfig
from .simgen import Scenario, ScenarioSpec, generate_scenario
from .train_eval import EvalReport, TrainConfig, evaluate, train

__all__ = [
    "CheckpointManager",
    "EnvRaster",
    "EvalReport",
    "LaneGraph",
    "LaneGraphStore",
    "LaneSegment",
    "LstmBaseline",
    "ModelConfig",
    "ModelKind",
    "RasterConfig",
    "Sample",
    "SampleArchive",
    "SampleDataset",
    "SapiNet",
    "Scenario",
    "ScenarioSpec",
    "SplitManifest",
    "TrainConfig",
    "build_model",
    "evaluate",
    "generate_scenario",
    "train",
]
