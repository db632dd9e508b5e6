"""Ego-frame bird's-eye-view rasters: LRA channel and motion-energy traffic channel."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from pydantic import BaseModel, ConfigDict, Field
from shapely.geometry import Polygon

from .exceptions import InsufficientHistory, InvalidGeometry, ShapeMismatch
from .lane_graph import LaneGraph

if TYPE_CHECKING:
    from .simgen import AgentTrack

logger = logging.getLogger(__name__)

TICK_SECONDS = 0.4
LRA_VALUE = 255
# scales footprint area times squared speed in the motion-energy value
ENERGY_COEFFICIENT = 0.01

PolygonLike = Union[Polygon, Sequence[Sequence[float]]]
RasterKey = Tuple[str, int]


class RasterConfig(BaseModel):
    """Raster geometry. The target vehicle sits at the mid-bottom pixel."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    height_px: int = Field(200, gt=0)
    width_px: int = Field(200, gt=0)
    resolution: float = Field(0.5, gt=0, description="meters per pixel")
    traffic_background: int = Field(255, ge=0, le=255)

    @property
    def ego_anchor(self) -> Tuple[int, int]:
        """Pixel (column, row) of the target vehicle."""
        return self.width_px // 2, self.height_px - 1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height_px, self.width_px


@dataclass(frozen=True)
class AgentState:
    """Pose, speed and footprint of one vehicle at one tick."""

    position: Tuple[float, float]
    heading: float
    speed: float
    length: float
    width: float

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        if self.speed < 0:
            raise InvalidGeometry(f"Negative speed {self.speed}")
        if not (self.length > 0 and self.width > 0):
            raise InvalidGeometry(f"Non-positive footprint {self.length}x{self.width}")

    @property
    def footprint_size(self) -> float:
        return self.length * self.width

    def box_corners(self) -> np.ndarray:
        """World-frame corners of the oriented bounding box, counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        half_l, half_w = self.length / 2.0, self.width / 2.0
        local = np.array(
            [[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]]
        )
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.position)


@dataclass(frozen=True)
class EnvRaster:
    """Two-channel environment image: the LRA channel stacked over the traffic channel."""

    lra_channel: np.ndarray
    traffic_channel: np.ndarray
    timestamp: float

    def __post_init__(self):
        if self.lra_channel.shape != self.traffic_channel.shape:
            raise ShapeMismatch(
                f"Channel shapes differ: {self.lra_channel.shape} vs {self.traffic_channel.shape}"
            )
        object.__setattr__(self, "lra_channel", np.asarray(self.lra_channel, dtype=np.uint8))
        object.__setattr__(
            self, "traffic_channel", np.asarray(self.traffic_channel, dtype=np.uint8)
        )

    @property
    def stacked(self) -> np.ndarray:
        """Channel-first array of shape (2, H, W), channel order (LRA, traffic)."""
        return np.stack([self.lra_channel, self.traffic_channel])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnvRaster):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and np.array_equal(self.lra_channel, other.lra_channel)
            and np.array_equal(self.traffic_channel, other.traffic_channel)
        )


def ego_frame_points(
    points: np.ndarray, ego_position: Sequence[float], ego_heading: float
) -> np.ndarray:
    """
    Express world points in the ego frame: x to the vehicle's right, y ahead.

    Args:
        points: Array of shape (..., 2)
        ego_position: World position of the ego vehicle
        ego_heading: Ego heading in radians

    Returns:
        Array of the same shape in meters
    """
    phi = math.pi / 2.0 - ego_heading
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    return (np.asarray(points, dtype=float) - np.asarray(ego_position, dtype=float)) @ rot.T


def ego_transform(
    world_point: Sequence[float],
    ego_position: Sequence[float],
    ego_heading: float,
    config: RasterConfig,
) -> Tuple[float, float]:
    """
    Map a world point to real-valued pixel coordinates (column, row).

    Ego heading maps to image-up; out-of-frame results are returned unclipped.
    """
    x, y = ego_frame_points(np.asarray(world_point, dtype=float), ego_position, ego_heading)
    anchor_col, anchor_row = config.ego_anchor
    return anchor_col + x / config.resolution, anchor_row - y / config.resolution


def _to_pixels(
    points: np.ndarray, ego_position: Sequence[float], ego_heading: float, config: RasterConfig
) -> np.ndarray:
    local = ego_frame_points(points, ego_position, ego_heading)
    anchor_col, anchor_row = config.ego_anchor
    cols = anchor_col + local[:, 0] / config.resolution
    rows = anchor_row - local[:, 1] / config.resolution
    return np.stack([cols, rows], axis=1)


def _ring(polygon: PolygonLike) -> np.ndarray:
    if isinstance(polygon, Polygon):
        return np.asarray(polygon.exterior.coords, dtype=float)
    return np.asarray(polygon, dtype=float)


def _pixel_mask(ring_px: np.ndarray, config: RasterConfig) -> Optional[Tuple[int, int, np.ndarray]]:
    """Pixel-center containment test restricted to the polygon's bounding box."""
    min_c, min_r = ring_px.min(axis=0)
    max_c, max_r = ring_px.max(axis=0)
    c0, c1 = max(math.ceil(min_c), 0), min(math.floor(max_c), config.width_px - 1)
    r0, r1 = max(math.ceil(min_r), 0), min(math.floor(max_r), config.height_px - 1)
    if c0 > c1 or r0 > r1:
        return None
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    inside = shapely.contains_xy(Polygon(ring_px), cols.ravel(), rows.ravel())
    return r0, c0, inside.reshape(cols.shape)


def rasterize_lra(
    lra_polygons: Iterable[PolygonLike],
    ego_position: Sequence[float],
    ego_heading: float,
    config: RasterConfig,
) -> np.ndarray:
    """
    Draw legally reachable lane polygons: 255 inside, 0 elsewhere.

    Returns:
        uint8 array of shape (height_px, width_px)
    """
    channel = np.zeros(config.shape, dtype=np.uint8)
    for polygon in lra_polygons:
        hit = _pixel_mask(_to_pixels(_ring(polygon), ego_position, ego_heading, config), config)
        if hit is None:
            continue
        r0, c0, inside = hit
        window = channel[r0 : r0 + inside.shape[0], c0 : c0 + inside.shape[1]]
        window[inside] = LRA_VALUE
    return channel


def motion_energy_pixel(footprint_size: float, speed: float) -> int:
    """
    Encode a vehicle's motion energy as an 8-bit pixel value.

    Greater energy (size times squared speed) gives a darker pixel.

    Args:
        footprint_size: Footprint area in square meters
        speed: Speed in m/s

    Returns:
        Integer in 0..255
    """
    if footprint_size <= 0:
        raise ValueError(f"footprint_size must be positive, got {footprint_size}")
    if speed < 0:
        raise ValueError(f"speed must be non-negative, got {speed}")
    energy = ENERGY_COEFFICIENT * footprint_size * speed**2
    value = 255.0 * (1.0 - math.exp(-1.0 / (energy + 1.0)))
    return int(math.floor(value + 0.5))


def rasterize_traffic(
    agents: Iterable[AgentState],
    ego_position: Sequence[float],
    ego_heading: float,
    config: RasterConfig,
) -> np.ndarray:
    """
    Draw surrounding vehicles as oriented boxes filled with their motion-energy value.

    Overlaps keep the minimum value. The target vehicle must not be passed in.

    Returns:
        uint8 array of shape (height_px, width_px)
    """
    channel = np.full(config.shape, config.traffic_background, dtype=np.uint8)
    for agent in agents:
        value = motion_energy_pixel(agent.footprint_size, agent.speed)
        corners = _to_pixels(agent.box_corners(), ego_position, ego_heading, config)
        hit = _pixel_mask(corners, config)
        if hit is None:
            continue
        r0, c0, inside = hit
        window = channel[r0 : r0 + inside.shape[0], c0 : c0 + inside.shape[1]]
        window[inside] = np.minimum(window[inside], value)
    return channel


def build_env(lra_channel: np.ndarray, traffic_channel: np.ndarray, timestamp: float) -> EnvRaster:
    """
    Stack the two channels into an EnvRaster.

    Raises:
        ShapeMismatch: If the channel shapes differ
    """
    return EnvRaster(lra_channel=lra_channel, traffic_channel=traffic_channel, timestamp=timestamp)


def render_step(
    graph: LaneGraph,
    target: AgentState,
    others: Iterable[AgentState],
    d: float,
    config: RasterConfig,
    timestamp: float,
) -> EnvRaster:
    """Compute the LRA at the target pose and rasterize both channels in its ego frame."""
    lra = graph.compute_lra(target.position, target.heading, d)
    lra_channel = rasterize_lra(graph.lra_polygons(lra), target.position, target.heading, config)
    traffic_channel = rasterize_traffic(others, target.position, target.heading, config)
    return build_env(lra_channel, traffic_channel, timestamp)


def build_history(
    graph: LaneGraph,
    target_track: "AgentTrack",
    other_tracks: Iterable["AgentTrack"],
    t_index: int,
    m: int,
    d: float,
    config: RasterConfig,
    cache: Optional[Dict[RasterKey, EnvRaster]] = None,
) -> List[Tuple[EnvRaster, Tuple[float, float]]]:
    """
    Build the observed history: m (raster, world position) pairs, oldest first.

    Args:
        graph: Lane graph of the scenario
        target_track: Track of the target vehicle
        other_tracks: Tracks of the other vehicles (the target is skipped if present)
        t_index: Index of the last observed state in target_track.states
        m: Number of history steps
        d: LRA search distance in meters
        config: Raster configuration
        cache: Optional memo of rasters keyed by (agent_id, tick)

    Raises:
        InsufficientHistory: If fewer than m states end at t_index
        NotOnRoad: If a history pose lies outside every lane
    """
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    first = t_index - m + 1
    if first < 0 or t_index >= len(target_track.states):
        raise InsufficientHistory(
            f"Track {target_track.agent_id} has {len(target_track.states)} states, "
            f"cannot end {m} history steps at index {t_index}"
        )
    others = [track for track in other_tracks if track.agent_id != target_track.agent_id]

    history = []
    for index in range(first, t_index + 1):
        state = target_track.states[index]
        tick = target_track.start_tick + index
        key = (target_track.agent_id, tick)
        env = cache.get(key) if cache is not None else None
        if env is None:
            present = (track.state_at_tick(tick) for track in others)
            neighbours = [s for s in present if s is not None]
            env = render_step(graph, state, neighbours, d, config, tick * TICK_SECONDS)
            if cache is not None:
                cache[key] = env
        history.append((env, state.position))
    return history


def export_pgm(env: EnvRaster, directory: str, stem: str) -> Tuple[Path, Path]:
    """
    Write both channels as binary 8-bit PGM (P5) files for debugging.

    Returns:
        Paths of the LRA and traffic images
    """
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for suffix, channel in (("lra", env.lra_channel), ("traffic", env.traffic_channel)):
        height, width = channel.shape
        path = out_dir / f"{stem}_{suffix}.pgm"
        path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + channel.tobytes())
        paths.append(path)
    logger.debug(f"Exported rasters {paths[0].name} and {paths[1].name}")
    return paths[0], paths[1]
