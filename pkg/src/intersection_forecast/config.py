"""Run configuration: defaults, JSON config file, dot-path overrides and environment."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dataset import FUTURE_STEPS, HISTORY_STEPS, SEARCH_DISTANCE
from .exceptions import ConfigError
from .model import ModelConfig
from .raster import RasterConfig
from .simgen import (
    APPROACH_LENGTH,
    Behavior,
    IntersectionKind,
    ScenarioSpec,
    default_behavior_mix,
)
from .train_eval import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = "FORECAST_CONFIG"
ENV_CREDENTIALS = (
    ("uri", "NEO4J_URI"),
    ("username", "NEO4J_USERNAME"),
    ("password", "NEO4J_PASSWORD"),
)


class GenerateConfig(BaseModel):
    """Scenario generation. Scenario i uses seed `seed + i` and cycles through the kinds."""

    model_config = ConfigDict(extra="forbid")

    count: int = Field(20, ge=0)
    intersection_kinds: List[IntersectionKind] = Field(
        default_factory=lambda: [IntersectionKind.FOUR_LEG, IntersectionKind.T_TYPE], min_length=1
    )
    lanes_per_approach: int = Field(2, ge=1)
    agent_count: int = Field(8, ge=0)
    behavior_mix: Dict[Behavior, float] = Field(default_factory=default_behavior_mix)
    approach_length: float = Field(APPROACH_LENGTH, gt=0)
    speed_range: Tuple[float, float] = (5.0, 15.0)

    def spec_for(self, index: int, seed: int) -> ScenarioSpec:
        return ScenarioSpec(
            intersection_kind=self.intersection_kinds[index % len(self.intersection_kinds)],
            lanes_per_approach=self.lanes_per_approach,
            agent_count=self.agent_count,
            behavior_mix=self.behavior_mix,
            seed=seed + index,
            approach_length=self.approach_length,
            speed_range=self.speed_range,
        )


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m: int = Field(HISTORY_STEPS, ge=1)
    n: int = Field(FUTURE_STEPS, ge=1)
    search_distance: float = Field(SEARCH_DISTANCE, ge=0)
    split_ratio: Tuple[float, float, float] = (3.0, 1.0, 1.0)
    inline_rasters: bool = True
    workers: int = Field(1, ge=1)


class PathsConfig(BaseModel):
    """Output locations. Unset paths live under `out`."""

    model_config = ConfigDict(extra="forbid")

    out: str = "runs/default"
    scenarios: Optional[str] = None
    dataset: Optional[str] = None
    checkpoints: Optional[str] = None
    reports: Optional[str] = None
    predictions: Optional[str] = None
    plots: Optional[str] = None

    def resolve(self, name: str) -> Path:
        explicit = getattr(self, name)
        if explicit:
            return Path(explicit)
        defaults = {
            "scenarios": "scenarios.jsonl",
            "dataset": "dataset",
            "checkpoints": "checkpoints",
            "reports": "reports",
            "predictions": "predictions",
            "plots": "plots",
        }
        return Path(self.out) / defaults[name]

    @property
    def split_file(self) -> Path:
        return self.resolve("dataset") / "split.json"


class MapStoreConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    uri: str = "bolt://localhost:7687"
    username: str = "neo4j"
    password: str = "yourpassword"


class RunConfig(BaseModel):
    """Complete configuration of a pipeline run."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    generate: GenerateConfig = Field(default_factory=GenerateConfig)
    raster: RasterConfig = Field(default_factory=RasterConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    map_store: MapStoreConfig = Field(default_factory=MapStoreConfig)

    @model_validator(mode="after")
    def _align_model(self) -> "RunConfig":
        """Model input sizes follow the dataset and raster sections."""
        derived = {
            "m": self.dataset.m,
            "n": self.dataset.n,
            "height_px": self.raster.height_px,
            "width_px": self.raster.width_px,
        }
        for key in self.model.model_fields_set & derived.keys():
            if getattr(self.model, key) != derived[key]:
                raise ValueError(
                    f"model.{key}={getattr(self.model, key)} conflicts with "
                    f"the dataset/raster value {derived[key]}"
                )
        self.model = ModelConfig(**{**self.model.model_dump(), **derived})
        return self


def parse_override(text: str) -> Tuple[List[str], Any]:
    """
    Split a `dot.path=value` override; the value is parsed as JSON, else kept as a string.

    Raises:
        ConfigError: If the override has no `=` or an empty path
    """
    path, sep, raw = text.partition("=")
    keys = [k for k in path.strip().split(".") if k]
    if not sep or not keys:
        raise ConfigError(f"Malformed override {text!r}, expected dot.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_override(data: Dict[str, Any], keys: Sequence[str], value: Any) -> None:
    node = data
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot set {'.'.join(keys)}: {key} is not a section")
        node = child
    node[keys[-1]] = value


def load_run_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> RunConfig:
    """
    Build and validate the run configuration.

    Precedence, lowest first: defaults, the JSON file at `path` (or the file
    named by FORECAST_CONFIG), `overrides`, then `seed` and `out`. Neo4j
    credentials default to NEO4J_URI, NEO4J_USERNAME and NEO4J_PASSWORD.

    Args:
        path: JSON config file
        overrides: `dot.path=value` strings
        seed: Seed override
        out: Output directory override

    Returns:
        RunConfig

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: On malformed JSON, bad overrides, unknown keys or invalid values
    """
    load_dotenv()
    path = path or os.getenv(CONFIG_ENV)
    data: Dict[str, Any] = {}
    if path:
        source = Path(path)
        if not source.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            data = json.loads(source.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        logger.debug(f"Loaded config file {path}")

    store = data.setdefault("map_store", {})
    if isinstance(store, dict):
        for key, env in ENV_CREDENTIALS:
            if key not in store and os.getenv(env):
                store[key] = os.getenv(env)

    for text in overrides:
        keys, value = parse_override(text)
        apply_override(data, keys, value)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        apply_override(data, ["paths", "out"], out)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration:\n{e}") from e
