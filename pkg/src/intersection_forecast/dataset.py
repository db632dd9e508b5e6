"""Sliding-window samples, sample archives and scenario-level splits."""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from .exceptions import NotOnRoad, SchemaVersionMismatch, ShapeMismatch, UnknownSample
from .lane_graph import LaneGraph
from .raster import (
    TICK_SECONDS,
    EnvRaster,
    RasterConfig,
    RasterKey,
    build_history,
    ego_frame_points,
)
from .simgen import AgentTrack, Scenario

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HISTORY_STEPS = 12
FUTURE_STEPS = 15
SEARCH_DISTANCE = 100.0

POSITION_DTYPE = "<f4"
RASTER_DTYPE = "|u1"


@dataclass
class Sample:
    """One training example: m observed steps of the target and its n future positions."""

    history_positions: np.ndarray
    future_positions: np.ndarray
    scenario_id: str
    target_agent_id: str
    t_index: int
    history_rasters: List[EnvRaster] = field(default_factory=list)
    behavior_label: str = "straight"
    origin: Tuple[float, float] = (0.0, 0.0)
    origin_heading: float = 0.0

    def __post_init__(self):
        self.history_positions = np.asarray(self.history_positions, dtype=np.float32)
        self.future_positions = np.asarray(self.future_positions, dtype=np.float32)
        if self.history_positions.ndim != 2 or self.history_positions.shape[1] != 2:
            raise ShapeMismatch(
                f"history_positions must be (m, 2), got {self.history_positions.shape}"
            )
        if self.future_positions.ndim != 2 or self.future_positions.shape[1] != 2:
            raise ShapeMismatch(
                f"future_positions must be (n, 2), got {self.future_positions.shape}"
            )
        if self.history_rasters and len(self.history_rasters) != len(self.history_positions):
            raise ShapeMismatch(
                f"{len(self.history_rasters)} rasters for {self.m} history steps"
            )

    @property
    def key(self) -> str:
        return sample_key(self.scenario_id, self.target_agent_id, self.t_index)

    @property
    def m(self) -> int:
        return len(self.history_positions)

    @property
    def n(self) -> int:
        return len(self.future_positions)

    @property
    def has_rasters(self) -> bool:
        return bool(self.history_rasters)

    def raster_array(self) -> np.ndarray:
        """History rasters stacked to (m, 2, H, W) uint8."""
        if not self.history_rasters:
            raise ValueError(f"Sample {self.key} carries no rasters")
        return np.stack([env.stacked for env in self.history_rasters])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.key == other.key
            and self.behavior_label == other.behavior_label
            and self.origin == other.origin
            and self.origin_heading == other.origin_heading
            and np.array_equal(self.history_positions, other.history_positions)
            and np.array_equal(self.future_positions, other.future_positions)
            and self.history_rasters == other.history_rasters
        )


def sample_key(scenario_id: str, agent_id: str, t_index: int) -> str:
    return f"{scenario_id}:{agent_id}:{t_index}"


def _window(
    graph: LaneGraph,
    track: AgentTrack,
    tracks: Sequence[AgentTrack],
    t_index: int,
    m: int,
    n: int,
    d: float,
    config: RasterConfig,
    scenario_id: str,
    inline_rasters: bool,
    cache: Dict[RasterKey, EnvRaster],
) -> Sample:
    last = track.states[t_index]
    rasters: List[EnvRaster] = []
    if inline_rasters:
        history = build_history(graph, track, tracks, t_index, m, d, config, cache)
        rasters = [env for env, _ in history]
    world_history = np.array([s.position for s in track.states[t_index - m + 1 : t_index + 1]])
    world_future = np.array([s.position for s in track.states[t_index + 1 : t_index + n + 1]])
    return Sample(
        history_positions=ego_frame_points(world_history, last.position, last.heading),
        future_positions=ego_frame_points(world_future, last.position, last.heading),
        scenario_id=scenario_id,
        target_agent_id=track.agent_id,
        t_index=t_index,
        history_rasters=rasters,
        behavior_label=track.behavior_label.value,
        origin=last.position,
        origin_heading=last.heading,
    )


def _extract(
    graph: LaneGraph,
    tracks: Sequence[AgentTrack],
    m: int,
    n: int,
    d: float,
    config: RasterConfig,
    scenario_id: str,
    inline_rasters: bool,
) -> Tuple[List[Sample], int]:
    if m < 1 or n < 1:
        raise ValueError(f"m and n must be at least 1, got m={m} n={n}")
    samples: List[Sample] = []
    skipped = 0
    cache: Dict[RasterKey, EnvRaster] = {}
    for track in tracks:
        for t_index in range(m - 1, len(track.states) - n):
            try:
                samples.append(
                    _window(
                        graph, track, tracks, t_index, m, n, d, config,
                        scenario_id, inline_rasters, cache,
                    )
                )
            except NotOnRoad as e:
                skipped += 1
                logger.debug(f"Skipping {sample_key(scenario_id, track.agent_id, t_index)}: {e}")
    return samples, skipped


def extract_samples(
    graph: LaneGraph,
    tracks: Sequence[AgentTrack],
    m: int = HISTORY_STEPS,
    n: int = FUTURE_STEPS,
    d: float = SEARCH_DISTANCE,
    config: Optional[RasterConfig] = None,
    scenario_id: str = "",
    inline_rasters: bool = True,
) -> List[Sample]:
    """
    Slice tracks into samples with a stride of one tick.

    Each (agent, t_index) with m states up to t_index and n states after it
    yields one sample. Positions are expressed in the ego frame of the pose
    at t_index. Windows whose history leaves the road are skipped.

    Args:
        graph: Lane graph of the scenario
        tracks: All tracks of the scenario
        m: History steps
        n: Future steps
        d: LRA search distance in meters
        config: Raster configuration
        scenario_id: Id recorded on every sample
        inline_rasters: Render history rasters; when False they can be attached later

    Returns:
        List of Sample, ordered by track then t_index
    """
    samples, skipped = _extract(
        graph, tracks, m, n, d, config or RasterConfig(), scenario_id, inline_rasters
    )
    if skipped:
        logger.warning(f"Skipped {skipped} off-road windows in scenario {scenario_id}")
    return samples


def _extract_payload(
    payload: Dict[str, Any], m: int, n: int, d: float, config: Dict[str, Any], inline_rasters: bool
) -> Tuple[List[Sample], int]:
    scenario = Scenario.from_dict(payload)
    return _extract(
        scenario.graph,
        scenario.tracks,
        m,
        n,
        d,
        RasterConfig(**config),
        scenario.scenario_id,
        inline_rasters,
    )


def extract_dataset(
    scenarios: Iterable[Scenario],
    m: int = HISTORY_STEPS,
    n: int = FUTURE_STEPS,
    d: float = SEARCH_DISTANCE,
    config: Optional[RasterConfig] = None,
    inline_rasters: bool = True,
    workers: int = 1,
    show_progress: bool = False,
) -> Tuple[List[Sample], int]:
    """
    Extract samples from many scenarios, optionally in a process pool.

    Output order follows the input order regardless of the worker count.

    Returns:
        Tuple of (samples, number of skipped off-road windows)
    """
    config = config or RasterConfig()
    payloads = [scenario.to_dict() for scenario in scenarios]
    job = partial(
        _extract_payload,
        m=m,
        n=n,
        d=d,
        config=config.model_dump(),
        inline_rasters=inline_rasters,
    )
    progress = partial(tqdm, total=len(payloads), desc="extract", unit="scenario")

    samples: List[Sample] = []
    skipped = 0
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(job, payloads)
            for found, missed in progress(results, disable=not show_progress):
                samples.extend(found)
                skipped += missed
    else:
        for payload in progress(payloads, disable=not show_progress):
            found, missed = job(payload)
            samples.extend(found)
            skipped += missed

    logger.info(f"Extracted {len(samples)} samples from {len(payloads)} scenarios")
    if skipped:
        logger.warning(f"Skipped {skipped} off-road windows")
    return samples, skipped


def attach_rasters(
    samples: Sequence[Sample],
    scenarios: Mapping[str, Scenario],
    config: Optional[RasterConfig] = None,
    d: float = SEARCH_DISTANCE,
) -> List[Sample]:
    """
    Render history rasters for samples that were stored without them.

    Raises:
        UnknownSample: If a sample's scenario or agent is not available
    """
    config = config or RasterConfig()
    caches: Dict[str, Dict[RasterKey, EnvRaster]] = {}
    out = []
    for sample in samples:
        scenario = scenarios.get(sample.scenario_id)
        if scenario is None:
            raise UnknownSample(f"Scenario {sample.scenario_id} of {sample.key} not loaded")
        try:
            track = scenario.track(sample.target_agent_id)
        except KeyError:
            raise UnknownSample(sample.key) from None
        cache = caches.setdefault(sample.scenario_id, {})
        history = build_history(
            scenario.graph, track, scenario.tracks, sample.t_index, sample.m, d, config, cache
        )
        out.append(replace(sample, history_rasters=[env for env, _ in history]))
    return out


class SplitManifest:
    """Scenario-level train/val/test partition of sample keys."""

    def __init__(
        self,
        train: List[str],
        val: List[str],
        test: List[str],
        seed: int,
        scenarios: Optional[Dict[str, List[str]]] = None,
    ):
        self.train = list(train)
        self.val = list(val)
        self.test = list(test)
        self.seed = seed
        self.scenarios = scenarios or {"train": [], "val": [], "test": []}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SplitManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def keys(self, name: str) -> List[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"Unknown split {name}")
        return getattr(self, name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "scenarios": self.scenarios,
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitManifest":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"Split schema_version {data.get('schema_version')}, expected {SCHEMA_VERSION}"
            )
        return cls(data["train"], data["val"], data["test"], data["seed"], data["scenarios"])

    def save(self, path: str) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.to_dict(), indent=2))
        return out

    @classmethod
    def load(cls, path: str) -> "SplitManifest":
        source = Path(path)
        if not source.exists():
            raise FileNotFoundError(f"Split manifest not found: {path}")
        return cls.from_dict(json.loads(source.read_text()))


def split(
    samples: Sequence[Sample], ratio: Sequence[float] = (3, 1, 1), seed: int = 0
) -> SplitManifest:
    """
    Partition samples by scenario so no scenario spans two splits.

    Scenario ids are sorted, shuffled with the seed and cut at the cumulative
    ratio boundaries (rounded to whole scenarios).

    Args:
        samples: Samples to partition
        ratio: Relative train/val/test sizes
        seed: Shuffle seed

    Returns:
        SplitManifest
    """
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) <= 0:
        raise ValueError(f"ratio must be three non-negative weights, got {ratio}")
    scenario_ids = sorted({s.scenario_id for s in samples})
    order = [scenario_ids[i] for i in np.random.default_rng(seed).permutation(len(scenario_ids))]

    total = float(sum(ratio))
    count = len(order)
    cut_train = int(round(count * ratio[0] / total))
    cut_val = int(round(count * (ratio[0] + ratio[1]) / total))
    groups = {
        "train": order[:cut_train],
        "val": order[cut_train:cut_val],
        "test": order[cut_val:],
    }
    membership = {sid: name for name, ids in groups.items() for sid in ids}
    keys: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
    for sample in samples:
        keys[membership[sample.scenario_id]].append(sample.key)

    logger.info(
        f"Split {count} scenarios into {len(groups['train'])}/{len(groups['val'])}/"
        f"{len(groups['test'])} (train/val/test)"
    )
    return SplitManifest(
        keys["train"], keys["val"], keys["test"], seed, {k: sorted(v) for k, v in groups.items()}
    )


def _write_blob(directory: Path, name: str, array: np.ndarray, dtype: str) -> Dict[str, Any]:
    data = np.ascontiguousarray(array, dtype=np.dtype(dtype))
    (directory / name).write_bytes(data.tobytes())
    return {"blob": f"blobs/{name}", "dtype": dtype, "shape": list(data.shape)}


def _read_blob(root: Path, ref: Dict[str, Any]) -> np.ndarray:
    raw = (root / ref["blob"]).read_bytes()
    array = np.frombuffer(raw, dtype=np.dtype(ref["dtype"]))
    shape = tuple(ref["shape"])
    if array.size != int(np.prod(shape)):
        raise ShapeMismatch(f"Blob {ref['blob']} holds {array.size} values, expected shape {shape}")
    return array.reshape(shape).copy()


def _raster_tick(env: EnvRaster) -> int:
    return int(round(env.timestamp / TICK_SECONDS))


def write_samples(
    samples: Sequence[Sample],
    path: str,
    config: Optional[RasterConfig] = None,
    m: Optional[int] = None,
    n: Optional[int] = None,
    source: Optional[str] = None,
) -> Path:
    """
    Write samples to an archive directory, replacing any archive already there.

    The archive holds manifest.json plus one blob per tensor under blobs/.
    Positions are little-endian float32; rasters are uint8 and stored once per
    (scenario, agent, tick) however many windows share them.

    Args:
        samples: Samples to write
        path: Archive directory
        config: Raster configuration echoed into the manifest
        m: History length when samples is empty
        n: Future length when samples is empty
        source: Scenario file the samples came from

    Returns:
        Archive directory
    """
    root = Path(path)
    m = samples[0].m if samples else (m or HISTORY_STEPS)
    n = samples[0].n if samples else (n or FUTURE_STEPS)
    for sample in samples:
        if sample.m != m or sample.n != n:
            raise ShapeMismatch(
                f"Sample {sample.key} has m={sample.m} n={sample.n}, archive m={m} n={n}"
            )

    blobs = root / "blobs"
    if blobs.exists():
        shutil.rmtree(blobs)
        logger.debug(f"Cleared previous blobs under {blobs}")
    blobs.mkdir(parents=True)

    raster_refs: Dict[str, Dict[str, Any]] = {}
    entries = []
    for index, sample in enumerate(samples):
        entry: Dict[str, Any] = {
            "key": sample.key,
            "scenario_id": sample.scenario_id,
            "target_agent_id": sample.target_agent_id,
            "t_index": sample.t_index,
            "behavior_label": sample.behavior_label,
            "origin": list(sample.origin),
            "origin_heading": sample.origin_heading,
            "history_positions": _write_blob(
                blobs, f"s{index:07d}_history.bin", sample.history_positions, POSITION_DTYPE
            ),
            "future_positions": _write_blob(
                blobs, f"s{index:07d}_future.bin", sample.future_positions, POSITION_DTYPE
            ),
            "rasters": [],
        }
        for env in sample.history_rasters:
            rkey = f"{sample.scenario_id}:{sample.target_agent_id}:{_raster_tick(env)}"
            if rkey not in raster_refs:
                ref = _write_blob(blobs, f"r{len(raster_refs):07d}.bin", env.stacked, RASTER_DTYPE)
                raster_refs[rkey] = {**ref, "timestamp": env.timestamp}
            entry["rasters"].append(rkey)
        entries.append(entry)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "m": m,
        "n": n,
        "tick_seconds": TICK_SECONDS,
        "raster": (config or RasterConfig()).model_dump(),
        "source": source,
        "rasters": raster_refs,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest))
    logger.info(f"Wrote {len(entries)} samples and {len(raster_refs)} rasters to {root}")
    return root


class SampleArchive:
    """Lazy, indexable view of a sample archive."""

    def __init__(self, path: str):
        """
        Open an archive written by write_samples.

        Raises:
            FileNotFoundError: If the archive manifest doesn't exist
            SchemaVersionMismatch: If the archive uses another schema version
        """
        self.root = Path(path)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"Sample archive not found: {path}")
        self.manifest = json.loads(manifest_path.read_text())
        version = self.manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"Sample archive schema_version {version}, expected {SCHEMA_VERSION}"
            )
        self._entries: List[Dict[str, Any]] = self.manifest["samples"]
        self._positions = {entry["key"]: i for i, entry in enumerate(self._entries)}

    @property
    def m(self) -> int:
        return int(self.manifest["m"])

    @property
    def n(self) -> int:
        return int(self.manifest["n"])

    @property
    def raster_config(self) -> RasterConfig:
        return RasterConfig(**self.manifest["raster"])

    @property
    def keys(self) -> List[str]:
        return [entry["key"] for entry in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: object) -> bool:
        return key in self._positions

    def index(self, key: str) -> int:
        try:
            return self._positions[key]
        except KeyError:
            raise UnknownSample(key) from None

    def __getitem__(self, item: Union[int, str]) -> Sample:
        position = self.index(item) if isinstance(item, str) else item
        entry = self._entries[position]
        rasters = []
        for rkey in entry["rasters"]:
            ref = self.manifest["rasters"][rkey]
            stacked = _read_blob(self.root, ref)
            rasters.append(EnvRaster(stacked[0], stacked[1], ref["timestamp"]))
        return Sample(
            history_positions=_read_blob(self.root, entry["history_positions"]),
            future_positions=_read_blob(self.root, entry["future_positions"]),
            scenario_id=entry["scenario_id"],
            target_agent_id=entry["target_agent_id"],
            t_index=int(entry["t_index"]),
            history_rasters=rasters,
            behavior_label=entry["behavior_label"],
            origin=tuple(entry["origin"]),
            origin_heading=entry["origin_heading"],
        )

    def __iter__(self):
        for position in range(len(self)):
            yield self[position]


def read_samples(path: str) -> List[Sample]:
    return list(SampleArchive(path))


class SampleDataset(Dataset):
    """
    torch Dataset over in-memory samples or an archive.

    Items are dicts with "history" (m, 2) float32, "future" (n, 2) float32,
    "rasters" (m, 2, H, W) uint8 when with_rasters is set, and "index".
    """

    def __init__(
        self,
        source: Union[Sequence[Sample], SampleArchive],
        keys: Optional[Sequence[str]] = None,
        with_rasters: bool = True,
    ):
        self.source = source
        self.with_rasters = with_rasters
        if keys is None:
            self._indices = list(range(len(source)))
        elif isinstance(source, SampleArchive):
            self._indices = [source.index(key) for key in keys]
        else:
            lookup = {sample.key: i for i, sample in enumerate(source)}
            missing = [key for key in keys if key not in lookup]
            if missing:
                raise UnknownSample(missing[0])
            self._indices = [lookup[key] for key in keys]

    def __len__(self) -> int:
        return len(self._indices)

    def sample(self, idx: int) -> Sample:
        return self.source[self._indices[idx]]

    def __getitem__(self, idx: int) -> Dict[str, torch.Tensor]:
        sample = self.sample(idx)
        item = {
            "history": torch.from_numpy(sample.history_positions.copy()),
            "future": torch.from_numpy(sample.future_positions.copy()),
            "index": torch.tensor(idx, dtype=torch.long),
        }
        if self.with_rasters:
            item["rasters"] = torch.from_numpy(sample.raster_array())
        return item
