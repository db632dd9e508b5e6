"""Synthetic intersection scenarios and kinematic vehicle tracks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from shapely.geometry import LineString, Point

from .exceptions import InvalidGeometry, SchemaVersionMismatch
from .lane_graph import LaneGraph, LaneSegment
from .raster import TICK_SECONDS, AgentState

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

LANE_WIDTH = 3.5
APPROACH_LENGTH = 60.0
BOX_HALF = 10.0
ARC_SEGMENTS = 32

MAX_ACCEL = 4.0
MAX_HEADING_STEP = 0.5
# controller limits stay inside the track invariants above
BRAKE_LIMIT = 3.8
ACCEL_LIMIT = 2.5
COMFORT_DECEL = 3.0
STOP_DECEL = 3.5
LATERAL_ACCEL = 3.0

SUBSTEPS = 4
LOOKAHEAD_MIN = 3.0
LOOKAHEAD_TIME = 0.5
LANE_CHANGE_SECONDS = 2.4
STOP_HORIZON_SECONDS = 3.0
STOP_MARGIN = 6.0
COMMIT_DISTANCE = 2.0
CONFLICT_RADIUS = 5.0
CROSSING_COS = 0.5
END_MARGIN = 0.5
# generated agents start this far along their path, clear of the lane's entry edge
SPAWN_OFFSET = 0.5
CREEP_SPEED = 0.5
MAX_TICKS = 150

ARM_ANGLES = {"east": 0.0, "north": math.pi / 2, "west": math.pi, "south": -math.pi / 2}


class IntersectionKind(str, Enum):
    FOUR_LEG = "four_leg"
    T_TYPE = "t_type"


class Behavior(str, Enum):
    STRAIGHT = "straight"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    LANE_CHANGE = "lane_change"
    STOP_FOR_TRAFFIC = "stop_for_traffic"


def default_behavior_mix() -> Dict[Behavior, float]:
    return {behavior: 1.0 for behavior in Behavior}


class ScenarioSpec(BaseModel):
    """Parameters of one generated scenario."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    intersection_kind: IntersectionKind = IntersectionKind.FOUR_LEG
    lanes_per_approach: int = Field(1, ge=1)
    agent_count: int = Field(8, ge=0)
    behavior_mix: Dict[Behavior, float] = Field(default_factory=default_behavior_mix)
    seed: int = 0
    approach_length: float = Field(APPROACH_LENGTH, gt=0)
    speed_range: Tuple[float, float] = (5.0, 15.0)

    @field_validator("behavior_mix")
    @classmethod
    def _check_mix(cls, mix: Dict[Behavior, float]) -> Dict[Behavior, float]:
        if any(weight < 0 for weight in mix.values()):
            raise ValueError("behavior weights must be non-negative")
        if sum(mix.values()) <= 0:
            raise ValueError("behavior weights must sum to a positive value")
        return mix

    @field_validator("speed_range")
    @classmethod
    def _check_speeds(cls, speeds: Tuple[float, float]) -> Tuple[float, float]:
        low, high = speeds
        if not 0 < low <= high:
            raise ValueError(f"invalid speed range {speeds}")
        return speeds


@dataclass
class AgentTrack:
    """Time-ordered states of one vehicle, one state per 0.4 s tick from start_tick."""

    agent_id: str
    start_tick: int
    states: List[AgentState]
    behavior_label: Behavior

    @property
    def end_tick(self) -> int:
        return self.start_tick + len(self.states) - 1

    def state_at_tick(self, tick: int) -> Optional[AgentState]:
        index = tick - self.start_tick
        if 0 <= index < len(self.states):
            return self.states[index]
        return None

    def time_at(self, index: int) -> float:
        return (self.start_tick + index) * TICK_SECONDS

    def validate(self, tolerance: float = 1e-9) -> None:
        """
        Check the kinematic bounds of the track.

        Raises:
            InvalidGeometry: If speed or heading change between ticks exceeds its bound
        """
        for prev, cur in zip(self.states, self.states[1:]):
            if abs(cur.speed - prev.speed) > MAX_ACCEL * TICK_SECONDS + tolerance:
                raise InvalidGeometry(f"Track {self.agent_id} exceeds the acceleration bound")
            if abs(wrap_angle(cur.heading - prev.heading)) > MAX_HEADING_STEP + tolerance:
                raise InvalidGeometry(f"Track {self.agent_id} exceeds the heading-rate bound")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "behavior_label": self.behavior_label.value,
            "states": [
                [self.time_at(i), *s.position, s.heading, s.speed, s.length, s.width]
                for i, s in enumerate(self.states)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AgentTrack":
        rows = data["states"]
        start_tick = int(round(rows[0][0] / TICK_SECONDS)) if rows else 0
        states = [
            AgentState(position=(x, y), heading=h, speed=v, length=length, width=width)
            for _, x, y, h, v, length, width in rows
        ]
        return cls(data["agent_id"], start_tick, states, Behavior(data["behavior_label"]))


@dataclass
class Scenario:
    """One lane graph plus the tracks driven on it."""

    scenario_id: str
    graph: LaneGraph
    tracks: List[AgentTrack]
    intersection_kind: IntersectionKind
    seed: int

    def track(self, agent_id: str) -> AgentTrack:
        for track in self.tracks:
            if track.agent_id == agent_id:
                return track
        raise KeyError(agent_id)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "intersection_kind": self.intersection_kind.value,
            "seed": self.seed,
            "lane_graph": self.graph.to_dict(),
            "tracks": [track.to_dict() for track in self.tracks],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scenario":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"Scenario schema_version {version}, expected {SCHEMA_VERSION}"
            )
        return cls(
            scenario_id=data["scenario_id"],
            graph=LaneGraph.from_dict(data["lane_graph"]),
            tracks=[AgentTrack.from_dict(item) for item in data["tracks"]],
            intersection_kind=IntersectionKind(data["intersection_kind"]),
            seed=int(data["seed"]),
        )


def wrap_angle(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _arms(kind: IntersectionKind) -> List[str]:
    if kind == IntersectionKind.T_TYPE:
        return ["east", "south", "west"]
    return ["east", "north", "west", "south"]


def _arc(start: np.ndarray, direction: np.ndarray, radius: float, left: bool) -> np.ndarray:
    """Quarter circle leaving start along direction, turning left or right."""
    normal = np.array([-direction[1], direction[0]])
    if not left:
        normal = -normal
    center = start + normal * radius
    theta0 = math.atan2(start[1] - center[1], start[0] - center[0])
    sweep = math.pi / 2 if left else -math.pi / 2
    angles = theta0 + sweep * np.arange(ARC_SEGMENTS + 1) / ARC_SEGMENTS
    return center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def box_half_size(lanes_per_approach: int) -> float:
    """Half-size of the intersection box; widened so right-turn arcs keep a valid radius."""
    return max(BOX_HALF, (lanes_per_approach + 1) * LANE_WIDTH)


def build_intersection(
    kind: IntersectionKind,
    lanes_per_approach: int = 1,
    seed: int = 0,
    approach_length: float = APPROACH_LENGTH,
) -> LaneGraph:
    """
    Build an intersection lane graph.

    Each arm gets inbound lanes ``<arm>_in_<i>`` and outbound lanes ``<arm>_out_<i>``.
    Connectors ``<arm>_<movement>_<i>`` join inbound lane i to an outbound lane:
    straight from every lane, left from the innermost lane, right from the
    outermost lane. A T intersection has no north arm. The seed picks a
    rigid placement of the whole layout in the world frame.

    Args:
        kind: Intersection kind
        lanes_per_approach: Lanes per direction on every arm
        seed: Placement seed
        approach_length: Length of inbound and outbound legs in meters

    Returns:
        LaneGraph
    """
    kind = IntersectionKind(kind)
    if lanes_per_approach < 1:
        raise ValueError(f"lanes_per_approach must be at least 1, got {lanes_per_approach}")
    arms = _arms(kind)
    half = box_half_size(lanes_per_approach)
    far = half + approach_length
    lanes = range(lanes_per_approach)

    def offset(i: int) -> float:
        return (i + 0.5) * LANE_WIDTH

    specs: Dict[str, Dict[str, Any]] = {}
    for arm in arms:
        u = _unit(ARM_ANGLES[arm])
        right_in = np.array([-u[1], u[0]])
        for i in lanes:
            specs[f"{arm}_in_{i}"] = {
                "centerline": [u * far + right_in * offset(i), u * half + right_in * offset(i)],
                "successors": [],
            }
            specs[f"{arm}_out_{i}"] = {
                "centerline": [u * half - right_in * offset(i), u * far - right_in * offset(i)],
                "successors": [],
            }

    for arm in arms:
        u = _unit(ARM_ANGLES[arm])
        heading_in = wrap_angle(ARM_ANGLES[arm] + math.pi)
        targets = {
            "straight": arm_at(heading_in),
            "left": arm_at(heading_in + math.pi / 2),
            "right": arm_at(heading_in - math.pi / 2),
        }
        for movement, target in targets.items():
            if target not in arms:
                continue
            if movement == "straight":
                chosen = list(lanes)
            elif movement == "left":
                chosen = [0]
            else:
                chosen = [lanes_per_approach - 1]
            for i in chosen:
                inbound = f"{arm}_in_{i}"
                outbound = f"{target}_out_{i}"
                start = specs[inbound]["centerline"][-1]
                if movement == "straight":
                    points = [start, specs[outbound]["centerline"][0]]
                else:
                    radius = half + offset(i) if movement == "left" else half - offset(i)
                    points = list(_arc(start, -u, radius, left=movement == "left"))
                    # snap the arc end onto the outbound lane start
                    points[-1] = specs[outbound]["centerline"][0]
                conn = f"{arm}_{movement}_{i}"
                specs[conn] = {"centerline": points, "successors": [outbound], "connector": True}
                specs[inbound]["successors"].append(conn)

    segments = []
    for sid, item in specs.items():
        is_connector = item.get("connector", False)
        left = right = None
        if not is_connector:
            arm, direction, index = sid.split("_")
            i = int(index)
            left = f"{arm}_{direction}_{i - 1}" if i > 0 else None
            right = f"{arm}_{direction}_{i + 1}" if i + 1 < lanes_per_approach else None
        segments.append(
            LaneSegment(
                id=sid,
                centerline=tuple(tuple(p) for p in item["centerline"]),
                width=LANE_WIDTH,
                successors=tuple(sorted(item["successors"])),
                left_neighbor=left,
                right_neighbor=right,
                left_change_legal=left is not None,
                right_change_legal=right is not None,
            )
        )

    rng = np.random.default_rng(seed)
    rotation = float(rng.uniform(-math.pi, math.pi))
    translation = rng.uniform(-50.0, 50.0, size=2)
    graph = LaneGraph(segments).transformed(rotation, translation)
    logger.debug(f"Built {kind.value} intersection with {len(graph)} segments (seed {seed})")
    return graph


def arm_at(heading: float) -> str:
    """Name of the arm a vehicle driving with this heading leaves through."""
    for arm, angle in ARM_ANGLES.items():
        if abs(wrap_angle(heading - angle)) < 1e-6:
            return arm
    raise ValueError(f"Heading {heading} is not axis-aligned")


def route_polyline(graph: LaneGraph, segment_ids: Sequence[str]) -> np.ndarray:
    """Concatenate segment centerlines into one path, dropping repeated joint points."""
    points: List[np.ndarray] = []
    for sid in segment_ids:
        for p in graph[sid].points:
            if points and np.hypot(*(p - points[-1])) < 1e-9:
                continue
            points.append(p)
    return np.asarray(points)


def lane_change_polyline(
    graph: LaneGraph,
    from_lane: str,
    to_lane: str,
    start_offset: float,
    change_length: float,
    continuation: Sequence[str],
    spacing: float = 1.0,
) -> np.ndarray:
    """
    Path that drifts from one lane onto its neighbor with a smoothstep lateral profile.

    Args:
        graph: Lane graph
        from_lane: Lane the vehicle starts in
        to_lane: Neighbor lane it moves to
        start_offset: Arc length where the transition starts
        change_length: Arc length covered by the transition
        continuation: Segments driven after to_lane
        spacing: Sampling step along the lane in meters
    """
    source = graph[from_lane]
    target = graph[to_lane]
    line_from = LineString(source.centerline)
    line_to = LineString(target.centerline)
    stations = np.arange(0.0, source.arc_length, spacing)
    points = []
    for s in stations:
        a = np.asarray(line_from.interpolate(s).coords[0])
        b = np.asarray(line_to.interpolate(line_to.project(Point(a))).coords[0])
        x = np.clip((s - start_offset) / change_length, 0.0, 1.0)
        blend = x * x * (3.0 - 2.0 * x)
        points.append(a + (b - a) * blend)
    tail = route_polyline(graph, [to_lane, *continuation])
    start = line_to.project(Point(points[-1]))
    tail_stations = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(tail, axis=0).T))])
    tail = tail[tail_stations > start + 1e-6]
    return np.vstack([np.asarray(points), tail])


class _Path:
    """Arc-length parametrised path with a feasible speed ceiling."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        steps = np.hypot(*np.diff(self.points, axis=0).T)
        self.stations = np.concatenate([[0.0], np.cumsum(steps)])
        self.length = float(self.stations[-1])
        self.line = LineString(self.points)
        self.speed_cap = self._speed_cap(steps)

    def _speed_cap(self, steps: np.ndarray) -> np.ndarray:
        headings = np.arctan2(*np.diff(self.points, axis=0).T[::-1])
        caps = np.full(len(self.points), np.inf)
        for i in range(1, len(self.points) - 1):
            turn = abs(wrap_angle(headings[i] - headings[i - 1]))
            curvature = turn / max(0.5 * (steps[i - 1] + steps[i]), 1e-9)
            if curvature > 1e-9:
                caps[i] = math.sqrt(LATERAL_ACCEL / curvature)
        # braking feasibility from the end backwards
        for i in range(len(caps) - 2, -1, -1):
            reachable = math.sqrt(caps[i + 1] ** 2 + 2.0 * COMFORT_DECEL * steps[i])
            caps[i] = min(caps[i], reachable)
        return caps

    def project(self, position: np.ndarray) -> float:
        return float(self.line.project(Point(position[0], position[1])))

    def point_at(self, s: float) -> np.ndarray:
        if s <= self.length:
            return np.asarray(self.line.interpolate(s).coords[0])
        tail = self.points[-1] - self.points[-2]
        return self.points[-1] + tail / np.hypot(*tail) * (s - self.length)

    def direction_at(self, s: float) -> np.ndarray:
        ahead = self.point_at(min(s + 0.5, self.length)) - self.point_at(max(s - 0.5, 0.0))
        return ahead / max(float(np.hypot(*ahead)), 1e-9)

    def heading_at_start(self) -> float:
        first = self.points[1] - self.points[0]
        return math.atan2(first[1], first[0])

    def cap_at(self, s: float) -> float:
        return float(np.interp(s, self.stations, self.speed_cap))


def _stopping_speed(speed: float, room: float) -> float:
    """Largest next-tick speed that still allows a stop within room at STOP_DECEL."""
    # (speed + v) / 2 * dt + v^2 / (2 * decel) <= room
    a = 1.0 / (2.0 * STOP_DECEL)
    b = TICK_SECONDS / 2.0
    c = speed * TICK_SECONDS / 2.0 - room
    if c >= 0:
        return 0.0
    return (-b + math.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)


@dataclass
class _Agent:
    agent_id: str
    path: _Path
    speed: float
    behavior: Behavior
    spawn_tick: int
    length: float
    width: float
    start_offset: float = 0.0
    conflicts: List[Tuple[float, Point, str]] = field(default_factory=list)


class TrafficSimulator:
    """
    Kinematic pure-pursuit simulation of agents driving fixed paths.

    Agents without the stop behavior are simulated first and never react to
    others. Stop-for-traffic agents then brake to a stop line before any
    crossing point that another agent will occupy within the stop horizon.
    A triggered stop is held until the agent stands still and the crossing
    is clear for the whole horizon; that crossing is then ignored.
    """

    def __init__(self, max_ticks: int = MAX_TICKS):
        self.max_ticks = max_ticks
        self._agents: List[_Agent] = []

    def add_agent(
        self,
        agent_id: str,
        path: np.ndarray,
        speed: float,
        behavior: Behavior = Behavior.STRAIGHT,
        spawn_tick: int = 0,
        length: float = 4.5,
        width: float = 1.9,
        start_offset: float = 0.0,
    ) -> None:
        """
        Register an agent.

        Args:
            agent_id: Track id
            path: Polyline the agent follows, shape (N, 2)
            speed: Cruise speed in m/s
            behavior: Behavior label; STOP_FOR_TRAFFIC enables the stop rule
            spawn_tick: Tick of the first state
            length: Vehicle length in meters
            width: Vehicle width in meters
            start_offset: Arc length along the path where the agent starts
        """
        self._agents.append(
            _Agent(
                agent_id=agent_id,
                path=_Path(path),
                speed=float(speed),
                behavior=Behavior(behavior),
                spawn_tick=int(spawn_tick),
                length=float(length),
                width=float(width),
                start_offset=float(start_offset),
            )
        )

    def run(self) -> List[AgentTrack]:
        """Simulate every agent; tracks are returned in registration order."""
        tracks: Dict[str, AgentTrack] = {}
        reactive = [a for a in self._agents if a.behavior == Behavior.STOP_FOR_TRAFFIC]
        for agent in self._agents:
            if agent.behavior != Behavior.STOP_FOR_TRAFFIC:
                tracks[agent.agent_id] = self._drive(agent, {})
        for agent in reactive:
            occupancy = self._conflict_occupancy(agent, tracks)
            tracks[agent.agent_id] = self._drive(agent, occupancy)
        ordered = [tracks[a.agent_id] for a in self._agents]
        for track in ordered:
            track.validate()
        return ordered

    def _conflict_occupancy(
        self, agent: _Agent, tracks: Dict[str, AgentTrack]
    ) -> Dict[float, set]:
        """Map each crossing point (as arc length on the agent path) to the ticks it is occupied."""
        occupancy: Dict[float, set] = {}
        for other in self._agents:
            track = tracks.get(other.agent_id)
            if track is None:
                continue
            crossing = agent.path.line.intersection(other.path.line)
            if crossing.is_empty:
                continue
            if crossing.geom_type == "Point":
                points = [crossing]
            else:
                points = list(getattr(crossing, "geoms", []))
            for point in points:
                if point.geom_type != "Point":
                    continue
                s_conflict = agent.path.project(np.array([point.x, point.y]))
                own = agent.path.direction_at(s_conflict)
                ticks = set()
                for index, state in enumerate(track.states):
                    gap = math.hypot(state.position[0] - point.x, state.position[1] - point.y)
                    if gap > CONFLICT_RADIUS:
                        continue
                    cos = abs(own[0] * math.cos(state.heading) + own[1] * math.sin(state.heading))
                    if cos < CROSSING_COS:
                        ticks.add(track.start_tick + index)
                if ticks:
                    occupancy.setdefault(round(s_conflict, 6), set()).update(ticks)
        return occupancy

    def _drive(self, agent: _Agent, occupancy: Dict[float, set]) -> AgentTrack:
        path = agent.path
        position = path.point_at(agent.start_offset)
        if agent.start_offset > 0:
            ahead = path.point_at(agent.start_offset + 0.5) - position
            heading = math.atan2(ahead[1], ahead[0])
        else:
            heading = path.heading_at_start()
        speed = min(agent.speed, path.cap_at(agent.start_offset))
        horizon = int(STOP_HORIZON_SECONDS / TICK_SECONDS)
        dt = TICK_SECONDS / SUBSTEPS

        states = []
        tick = agent.spawn_tick
        holding: set = set()
        cleared: set = set()
        while True:
            states.append(
                AgentState(tuple(position), wrap_angle(heading), speed, agent.length, agent.width)
            )
            s_now = path.project(position)
            if s_now >= path.length - END_MARGIN or len(states) >= self.max_ticks:
                break

            target_speed = min(agent.speed, path.cap_at(s_now))
            for s_conflict, ticks in occupancy.items():
                if s_conflict in cleared:
                    continue
                busy = any(t in ticks for t in range(tick, tick + horizon + 1))
                if s_conflict in holding:
                    if speed == 0.0 and not busy:
                        holding.discard(s_conflict)
                        cleared.add(s_conflict)
                        continue
                elif busy and s_now <= s_conflict - STOP_MARGIN + COMMIT_DISTANCE:
                    holding.add(s_conflict)
                else:
                    continue
                room = max(s_conflict - STOP_MARGIN - s_now, 0.0)
                stop_speed = _stopping_speed(speed, room)
                if stop_speed < CREEP_SPEED:
                    stop_speed = 0.0
                target_speed = min(target_speed, stop_speed)
            new_speed = float(
                np.clip(
                    target_speed,
                    max(speed - BRAKE_LIMIT * TICK_SECONDS, 0.0),
                    speed + ACCEL_LIMIT * TICK_SECONDS,
                )
            )
            # the next state would leave the end of the path
            if s_now + 0.5 * (speed + new_speed) * TICK_SECONDS > path.length - END_MARGIN:
                break

            heading_start = heading
            for k in range(SUBSTEPS):
                v = speed + (new_speed - speed) * (k + 0.5) / SUBSTEPS
                lookahead = max(LOOKAHEAD_MIN, LOOKAHEAD_TIME * v)
                target = path.point_at(path.project(position) + lookahead)
                bearing = math.atan2(target[1] - position[1], target[0] - position[0])
                alpha = wrap_angle(bearing - heading)
                yaw = 2.0 * math.sin(alpha) / lookahead * v * dt
                limit = MAX_HEADING_STEP - abs(wrap_angle(heading - heading_start))
                heading += float(np.clip(yaw, -limit / 2.0, limit / 2.0))
                position = position + v * dt * np.array([math.cos(heading), math.sin(heading)])
            speed = new_speed
            tick += 1

        return AgentTrack(agent.agent_id, agent.spawn_tick, states, agent.behavior)


def _movement_routes(graph: LaneGraph, movement: str) -> List[List[str]]:
    routes = []
    for sid in sorted(graph.segments):
        parts = sid.split("_")
        if len(parts) == 3 and parts[1] == movement:
            arm, _, index = parts
            routes.append([f"{arm}_in_{index}", sid, graph[sid].successors[0]])
    return routes


def _crossing_route(graph: LaneGraph, route: List[str]) -> Optional[List[str]]:
    """Straight route entering from the arm on the driver's right (crossing right to left)."""
    arm = route[0].split("_")[0]
    heading_in = ARM_ANGLES[arm] + math.pi
    right_arm = arm_at(heading_in - math.pi / 2)
    prefix = f"{right_arm}_in_"
    candidates = [r for r in _movement_routes(graph, "straight") if r[0].startswith(prefix)]
    return candidates[-1] if candidates else None


def simulate(graph: LaneGraph, spec: ScenarioSpec) -> List[AgentTrack]:
    """
    Sample agents with behaviors from the scenario parameters and simulate their tracks.

    Every stop_for_traffic agent gets an extra crossing agent from the arm on
    its right, timed to reach the crossing point shortly after it would.

    Args:
        graph: Lane graph built by build_intersection
        spec: Scenario parameters

    Returns:
        List of AgentTrack, deterministic in spec.seed
    """
    rng = np.random.default_rng([spec.seed, 1])
    straight = _movement_routes(graph, "straight")
    options: Dict[Behavior, List[List[str]]] = {
        Behavior.STRAIGHT: straight,
        Behavior.TURN_LEFT: _movement_routes(graph, "left"),
        Behavior.TURN_RIGHT: _movement_routes(graph, "right"),
        Behavior.LANE_CHANGE: [
            r for r in straight if graph[r[0]].left_neighbor or graph[r[0]].right_neighbor
        ],
        Behavior.STOP_FOR_TRAFFIC: [r for r in straight if _crossing_route(graph, r)],
    }
    behaviors = [b for b in Behavior if options[b] and spec.behavior_mix.get(b, 0.0) > 0]
    if not behaviors:
        behaviors = [Behavior.STRAIGHT]
    weights = np.array([spec.behavior_mix.get(b, 1.0) for b in behaviors], dtype=float)
    weights /= weights.sum()

    sim = TrafficSimulator()
    low, high = spec.speed_range
    for k in range(spec.agent_count):
        behavior = behaviors[int(rng.choice(len(behaviors), p=weights))]
        route = options[behavior][int(rng.integers(len(options[behavior])))]
        speed = float(rng.uniform(low, high))
        spawn = int(rng.integers(0, 12))
        length, width = float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.8, 2.1))
        agent_id = f"agent_{k:03d}"

        if behavior == Behavior.LANE_CHANGE:
            lane = graph[route[0]]
            neighbors = [n for n in (lane.left_neighbor, lane.right_neighbor) if n]
            to_lane = neighbors[int(rng.integers(len(neighbors)))]
            change = speed * LANE_CHANGE_SECONDS
            latest = max(lane.arc_length - change - 5.0, 5.0)
            start = float(rng.uniform(5.0, latest))
            arm, _, index = to_lane.split("_")
            connector = f"{arm}_straight_{index}"
            continuation = [connector, graph[connector].successors[0]]
            path = lane_change_polyline(graph, route[0], to_lane, start, change, continuation)
        else:
            path = route_polyline(graph, route)
        sim.add_agent(
            agent_id, path, speed, behavior, spawn, length, width, start_offset=SPAWN_OFFSET
        )

        if behavior == Behavior.STOP_FOR_TRAFFIC:
            cross = _crossing_route(graph, route)
            cross_path = _Path(route_polyline(graph, cross))
            crossing = _Path(path).line.intersection(cross_path.line)
            if crossing.is_empty or crossing.geom_type != "Point":
                continue
            own_distance = LineString(path).project(crossing)
            cross_distance = cross_path.project(np.array([crossing.x, crossing.y]))
            cross_speed = float(rng.uniform(5.0, 10.0))
            arrival = spawn * TICK_SECONDS + own_distance / speed + float(rng.uniform(0.5, 1.0))
            cross_spawn = int(round((arrival - cross_distance / cross_speed) / TICK_SECONDS))
            offset = SPAWN_OFFSET
            if cross_spawn < 0:
                ahead = -cross_spawn * TICK_SECONDS * cross_speed
                offset = max(SPAWN_OFFSET, min(ahead, cross_distance - 1.0))
                cross_spawn = 0
            sim.add_agent(
                f"{agent_id}_crosser",
                cross_path.points,
                cross_speed,
                Behavior.STRAIGHT,
                cross_spawn,
                float(rng.uniform(4.0, 5.0)),
                float(rng.uniform(1.8, 2.1)),
                start_offset=offset,
            )

    tracks = sim.run()
    logger.debug(f"Simulated {len(tracks)} tracks for seed {spec.seed}")
    return tracks


def generate_scenario(spec: ScenarioSpec, scenario_id: Optional[str] = None) -> Scenario:
    """Build the intersection and simulate its traffic."""
    graph = build_intersection(
        spec.intersection_kind, spec.lanes_per_approach, spec.seed, spec.approach_length
    )
    tracks = simulate(graph, spec)
    return Scenario(
        scenario_id=scenario_id or f"scn_{spec.seed:06d}",
        graph=graph,
        tracks=tracks,
        intersection_kind=IntersectionKind(spec.intersection_kind),
        seed=spec.seed,
    )


def write_scenarios(path: str, scenarios: Iterable[Scenario]) -> int:
    """
    Write scenarios as JSON Lines, one scenario per line.

    Returns:
        Number of scenarios written
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with out.open("w", encoding="utf-8") as handle:
        for scenario in scenarios:
            handle.write(json.dumps(scenario.to_dict()) + "\n")
            count += 1
    logger.info(f"Wrote {count} scenarios to {out}")
    return count


def iter_scenarios(path: str) -> Iterator[Scenario]:
    """
    Stream scenarios from a JSON Lines file.

    Raises:
        FileNotFoundError: If the file doesn't exist
        SchemaVersionMismatch: If a line uses another schema version
    """
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    with source.open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield Scenario.from_dict(json.loads(line))


def read_scenarios(path: str) -> List[Scenario]:
    return list(iter_scenarios(path))


def load_scenario(path: str, scenario_id: str) -> Scenario:
    for scenario in iter_scenarios(path):
        if scenario.scenario_id == scenario_id:
            return scenario
    raise KeyError(f"Scenario {scenario_id} not found in {path}")
