"""Lane topology and legally reachable area (LRA) queries."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.strtree import STRtree

from .exceptions import (
    DegenerateGeometry,
    InvalidGeometry,
    NotOnRoad,
    SchemaVersionMismatch,
    UnknownSegment,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Point2D = Tuple[float, float]


@dataclass(frozen=True)
class LaneSegment:
    """One directed lane segment with its centerline geometry and links."""

    id: str
    centerline: Tuple[Point2D, ...]
    width: float
    successors: Tuple[str, ...] = ()
    left_neighbor: Optional[str] = None
    right_neighbor: Optional[str] = None
    left_change_legal: bool = False
    right_change_legal: bool = False

    def __post_init__(self):
        points = tuple((float(x), float(y)) for x, y in self.centerline)
        object.__setattr__(self, "centerline", points)
        object.__setattr__(self, "successors", tuple(self.successors))

        if len(points) < 2:
            raise InvalidGeometry(f"Segment {self.id} needs at least 2 centerline points")
        if not self.width > 0:
            raise InvalidGeometry(f"Segment {self.id} has non-positive width {self.width}")
        steps = np.diff(np.asarray(points), axis=0)
        if np.any(np.hypot(steps[:, 0], steps[:, 1]) == 0.0):
            raise DegenerateGeometry(f"Segment {self.id} has duplicate consecutive points")

    @cached_property
    def points(self) -> np.ndarray:
        return np.asarray(self.centerline, dtype=float)

    @cached_property
    def cumulative_length(self) -> np.ndarray:
        """Arc length at each centerline vertex, starting at 0."""
        steps = np.diff(self.points, axis=0)
        return np.concatenate([[0.0], np.cumsum(np.hypot(steps[:, 0], steps[:, 1]))])

    @property
    def arc_length(self) -> float:
        return float(self.cumulative_length[-1])

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(segment_polygon(self))

    def nearest_edge(self, point: Sequence[float]) -> Tuple[int, float, float]:
        """
        Find the centerline edge closest to a point.

        Args:
            point: Query point (world frame)

        Returns:
            Tuple of (edge index, fraction along the edge, distance)
        """
        p = np.asarray(point, dtype=float)
        starts = self.points[:-1]
        edges = self.points[1:] - starts
        lengths_sq = np.einsum("ij,ij->i", edges, edges)
        t = np.clip(np.einsum("ij,ij->i", p - starts, edges) / lengths_sq, 0.0, 1.0)
        closest = starts + edges * t[:, None]
        dist = np.hypot(closest[:, 0] - p[0], closest[:, 1] - p[1])
        idx = int(np.argmin(dist))
        return idx, float(t[idx]), float(dist[idx])

    def project(self, point: Sequence[float]) -> float:
        """Arc-length offset of the point's projection onto the centerline."""
        idx, t, _ = self.nearest_edge(point)
        edge_len = self.cumulative_length[idx + 1] - self.cumulative_length[idx]
        return float(self.cumulative_length[idx] + t * edge_len)

    def direction_at(self, point: Sequence[float]) -> np.ndarray:
        """Unit direction of the centerline edge nearest to the point."""
        idx, _, _ = self.nearest_edge(point)
        edge = self.points[idx + 1] - self.points[idx]
        return edge / np.hypot(edge[0], edge[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "centerline": [[x, y] for x, y in self.centerline],
            "width": self.width,
            "successors": list(self.successors),
            "left_neighbor": self.left_neighbor,
            "right_neighbor": self.right_neighbor,
            "left_change_legal": self.left_change_legal,
            "right_change_legal": self.right_change_legal,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LaneSegment":
        return cls(
            id=data["id"],
            centerline=tuple(tuple(p) for p in data["centerline"]),
            width=data["width"],
            successors=tuple(data.get("successors", ())),
            left_neighbor=data.get("left_neighbor"),
            right_neighbor=data.get("right_neighbor"),
            left_change_legal=bool(data.get("left_change_legal", False)),
            right_change_legal=bool(data.get("right_change_legal", False)),
        )


def segment_polygon(segment: LaneSegment) -> List[Point2D]:
    """
    Build the lane polygon by offsetting the centerline by +/- width/2.

    Interior vertices use mitred offsets so straight runs stay exact.

    Args:
        segment: Lane segment

    Returns:
        Polygon ring as ordered points: left side forward, right side backward

    Raises:
        DegenerateGeometry: If the offset outline self-intersects
    """
    pts = segment.points
    edges = np.diff(pts, axis=0)
    edges /= np.hypot(edges[:, 0], edges[:, 1])[:, None]
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)

    # vertex normals: edge normal at the ends, mitred bisector inside
    vertex_normals = np.empty_like(pts)
    vertex_normals[0] = normals[0]
    vertex_normals[-1] = normals[-1]
    for i in range(1, len(pts) - 1):
        bisector = normals[i - 1] + normals[i]
        norm = np.hypot(bisector[0], bisector[1])
        cos_half = float(np.dot(bisector / norm, normals[i])) if norm > 1e-12 else 0.0
        if cos_half < 1e-6:
            raise DegenerateGeometry(f"Segment {segment.id} folds back on itself")
        vertex_normals[i] = bisector / norm / cos_half

    half = segment.width / 2.0
    left = pts + vertex_normals * half
    right = pts - vertex_normals * half
    ring = [tuple(p) for p in left] + [tuple(p) for p in right[::-1]]

    polygon = Polygon(ring)
    if not polygon.is_valid:
        raise DegenerateGeometry(f"Offset outline of segment {segment.id} self-intersects")
    return [(float(x), float(y)) for x, y in ring]


@dataclass(frozen=True)
class LraResult:
    """Legally reachable area of a vehicle, split by how each segment is reached."""

    c1: str
    c2: FrozenSet[str] = field(default_factory=frozenset)
    c3: FrozenSet[str] = field(default_factory=frozenset)
    c4: FrozenSet[str] = field(default_factory=frozenset)

    @property
    def all(self) -> FrozenSet[str]:
        return frozenset({self.c1}) | self.c2 | self.c3 | self.c4


class LaneGraph:
    """Directed lane topology with a spatial index over lane polygons."""

    def __init__(self, segments: Iterable[LaneSegment]):
        """
        Initialize and validate a lane graph.

        Args:
            segments: Lane segments making up the graph

        Raises:
            InvalidGeometry: On duplicate ids, dangling links or inconsistent neighbors
        """
        self.segments: Dict[str, LaneSegment] = {}
        for segment in segments:
            if segment.id in self.segments:
                raise InvalidGeometry(f"Duplicate segment id {segment.id}")
            self.segments[segment.id] = segment
        self._validate_links()

        self._index_ids: List[str] = sorted(self.segments)
        polygons = [self.segments[sid].polygon for sid in self._index_ids]
        self.spatial_index: Optional[STRtree] = STRtree(polygons) if polygons else None

    @classmethod
    def from_segments(cls, segments: Iterable[LaneSegment]) -> "LaneGraph":
        return cls(segments)

    def _validate_links(self) -> None:
        for seg in self.segments.values():
            refs = list(seg.successors) + [
                ref for ref in (seg.left_neighbor, seg.right_neighbor) if ref is not None
            ]
            for ref in refs:
                if ref not in self.segments:
                    raise InvalidGeometry(f"Segment {seg.id} references missing segment {ref}")
            left = self.segments.get(seg.left_neighbor) if seg.left_neighbor else None
            if left is not None and left.right_neighbor not in (None, seg.id):
                raise InvalidGeometry(f"Neighbor links of {seg.id} and {left.id} disagree")
            right = self.segments.get(seg.right_neighbor) if seg.right_neighbor else None
            if right is not None and right.left_neighbor not in (None, seg.id):
                raise InvalidGeometry(f"Neighbor links of {seg.id} and {right.id} disagree")

    def __len__(self) -> int:
        return len(self.segments)

    def __contains__(self, segment_id: object) -> bool:
        return segment_id in self.segments

    def __getitem__(self, segment_id: str) -> LaneSegment:
        try:
            return self.segments[segment_id]
        except KeyError:
            raise UnknownSegment(segment_id) from None

    def candidates(self, position: Sequence[float]) -> List[str]:
        """
        Ids of segments whose lane polygon covers the position (boundary included).

        Args:
            position: World-frame point

        Returns:
            Sorted list of segment ids
        """
        if self.spatial_index is None:
            return []
        hits = self.spatial_index.query(Point(position[0], position[1]), predicate="intersects")
        return sorted(self._index_ids[int(i)] for i in hits)

    def locate_segment(self, position: Sequence[float], heading: float) -> str:
        """
        Find the lane segment the vehicle is in (c1).

        Among several containing segments, the one whose local centerline
        direction best matches the heading wins; exact ties go to the lowest id.

        Args:
            position: World-frame point
            heading: Vehicle heading in radians

        Returns:
            Segment id

        Raises:
            NotOnRoad: If no lane polygon contains the position
        """
        found = self.candidates(position)
        if not found:
            raise NotOnRoad(f"No lane contains position ({position[0]:.2f}, {position[1]:.2f})")
        heading_vec = np.array([math.cos(heading), math.sin(heading)])
        scores = {
            sid: float(np.dot(self.segments[sid].direction_at(position), heading_vec))
            for sid in found
        }
        return min(found, key=lambda sid: (-scores[sid], sid))

    def project(self, segment_id: str, position: Sequence[float]) -> float:
        """Arc-length offset of a point projected onto a segment's centerline."""
        return self[segment_id].project(position)

    def forward_search(self, start: str, start_offset: float, d: float) -> FrozenSet[str]:
        """
        Collect segments reachable within d meters along successor links.

        The budget is spent along centerline arc length starting at start_offset
        on the start segment. A segment is reached when some path arrives at its
        entry with budget left; the start segment itself is never returned.

        Args:
            start: Start segment id
            start_offset: Arc-length offset on the start segment
            d: Search distance in meters

        Returns:
            Set of reachable segment ids

        Raises:
            UnknownSegment: If start is not in the graph
        """
        if d < 0:
            raise ValueError(f"Search distance must be non-negative, got {d}")
        start_seg = self[start]
        offset = min(max(start_offset, 0.0), start_seg.arc_length)

        best: Dict[str, float] = {}
        queue: deque = deque()
        remaining = d - (start_seg.arc_length - offset)
        if remaining > 0:
            for succ in start_seg.successors:
                queue.append((succ, remaining))

        while queue:
            sid, budget = queue.popleft()
            if best.get(sid, -math.inf) >= budget:
                continue
            best[sid] = budget
            left_over = budget - self.segments[sid].arc_length
            if left_over > 0:
                for succ in self.segments[sid].successors:
                    if best.get(succ, -math.inf) < left_over:
                        queue.append((succ, left_over))

        best.pop(start, None)
        return frozenset(best)

    def compute_lra(self, position: Sequence[float], heading: float, d: float) -> LraResult:
        """
        Compute the legally reachable area of a vehicle.

        Args:
            position: World-frame vehicle position
            heading: Vehicle heading in radians
            d: Forward search distance in meters

        Returns:
            LraResult with c1..c4

        Raises:
            NotOnRoad: If the vehicle is outside every lane
        """
        c1 = self.locate_segment(position, heading)
        current = self.segments[c1]
        c2 = self.forward_search(c1, current.project(position), d)

        c3 = set()
        if current.left_change_legal and current.left_neighbor is not None:
            c3.add(current.left_neighbor)
        if current.right_change_legal and current.right_neighbor is not None:
            c3.add(current.right_neighbor)

        c4: set = set()
        for neighbor in sorted(c3):
            c4 |= self.forward_search(neighbor, self.project(neighbor, position), d)

        return LraResult(c1=c1, c2=c2, c3=frozenset(c3), c4=frozenset(c4))

    def lra_polygons(self, lra: LraResult) -> List[Polygon]:
        return [self.segments[sid].polygon for sid in sorted(lra.all)]

    def transformed(
        self, rotation: float, translation: Sequence[float] = (0.0, 0.0)
    ) -> "LaneGraph":
        """
        Rigidly move the whole graph.

        Args:
            rotation: Counter-clockwise rotation about the origin in radians
            translation: Offset applied after rotation

        Returns:
            New LaneGraph
        """
        c, s = math.cos(rotation), math.sin(rotation)
        tx, ty = float(translation[0]), float(translation[1])
        moved = []
        for seg in self.segments.values():
            points = tuple((c * x - s * y + tx, s * x + c * y + ty) for x, y in seg.centerline)
            moved.append(LaneSegment.from_dict({**seg.to_dict(), "centerline": points}))
        return LaneGraph(moved)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "segments": [self.segments[sid].to_dict() for sid in sorted(self.segments)],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LaneGraph":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"Lane graph schema_version {version}, expected {SCHEMA_VERSION}"
            )
        return cls(LaneSegment.from_dict(item) for item in data["segments"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LaneGraph":
        return cls.from_dict(json.loads(text))


def save_lane_graph(graph: LaneGraph, path: str) -> Path:
    """
    Write a lane graph as JSON.

    Args:
        graph: Lane graph
        path: Output file

    Returns:
        Path written
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(graph.to_json())
    logger.info(f"Saved lane graph with {len(graph)} segments to {out}")
    return out


def load_lane_graph(path: str) -> LaneGraph:
    """
    Read a lane graph written by save_lane_graph.

    Raises:
        FileNotFoundError: If the file doesn't exist
        SchemaVersionMismatch: If the file uses another schema version
    """
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Lane graph file not found: {path}")
    return LaneGraph.from_json(source.read_text())
