"""Neo4j-backed storage of lane graphs."""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

from neo4j import Driver, GraphDatabase
from neo4j.exceptions import AuthError, ServiceUnavailable

from .lane_graph import LaneGraph, LaneSegment

logger = logging.getLogger(__name__)

DELETE_MAP = "MATCH (s:LaneSegment {map_id: $map_id}) DETACH DELETE s"
CREATE_SEGMENTS = """
UNWIND $rows AS row
CREATE (s:LaneSegment {map_id: $map_id})
SET s += row
"""
LINK_SUCCESSORS = """
MATCH (a:LaneSegment {map_id: $map_id})
UNWIND a.successors AS next_id
MATCH (b:LaneSegment {map_id: $map_id, segment_id: next_id})
CREATE (a)-[:SUCCESSOR]->(b)
"""
LINK_NEIGHBORS = """
MATCH (a:LaneSegment {map_id: $map_id})
OPTIONAL MATCH (l:LaneSegment {map_id: $map_id, segment_id: a.left_neighbor})
OPTIONAL MATCH (r:LaneSegment {map_id: $map_id, segment_id: a.right_neighbor})
FOREACH (_ IN CASE WHEN l IS NULL THEN [] ELSE [1] END |
    CREATE (a)-[:LEFT_NEIGHBOR]->(l))
FOREACH (_ IN CASE WHEN r IS NULL THEN [] ELSE [1] END |
    CREATE (a)-[:RIGHT_NEIGHBOR]->(r))
"""


class LaneGraphStore:
    """
    Stores lane graphs in Neo4j.

    Each segment is a (:LaneSegment) node keyed by (map_id, segment_id) with its
    centerline as parallel xs/ys lists and a bounding box for area queries.
    Successor and neighbor links are stored both as node properties and as
    SUCCESSOR / LEFT_NEIGHBOR / RIGHT_NEIGHBOR relationships.
    """

    def __init__(
        self,
        uri: str = "bolt://localhost:7687",
        username: str = "neo4j",
        password: str = "yourpassword",
    ):
        """
        Initialize the store.

        Args:
            uri: Neo4j bolt URI
            username: Database username
            password: Database password
        """
        self.uri = uri
        self.username = username
        self.password = password
        self._driver: Optional[Driver] = None

    def connect(self) -> Driver:
        """
        Establish connection to Neo4j.

        Returns:
            Neo4j driver instance

        Raises:
            ServiceUnavailable: If Neo4j is not reachable
            AuthError: If authentication fails
        """
        try:
            self._driver = GraphDatabase.driver(self.uri, auth=(self.username, self.password))
            self._driver.verify_connectivity()
            logger.info(f"Connected to map store at {self.uri}")
            return self._driver
        except ServiceUnavailable as e:
            logger.error(f"Map store unavailable at {self.uri}: {e}")
            raise
        except AuthError as e:
            logger.error(f"Authentication failed for user {self.username}: {e}")
            raise

    def close(self) -> None:
        if self._driver:
            self._driver.close()
            logger.info("Map store connection closed")
            self._driver = None

    @property
    def driver(self) -> Driver:
        if not self._driver:
            return self.connect()
        return self._driver

    def execute_query(
        self, query: str, parameters: Optional[Dict[str, Any]] = None
    ) -> List[Dict[str, Any]]:
        with self.driver.session() as session:
            result = session.run(query, parameters or {})
            return [dict(record) for record in result]

    def execute_write(
        self, query: str, parameters: Optional[Dict[str, Any]] = None
    ) -> List[Dict[str, Any]]:
        def _write_tx(tx):
            result = tx.run(query, parameters or {})
            return [dict(record) for record in result]

        with self.driver.session() as session:
            return session.execute_write(_write_tx)

    def execute_write_batch(self, statements: Sequence[Tuple[str, Dict[str, Any]]]) -> None:
        """Run several write statements in one transaction; a failure rolls all of them back."""

        def _write_tx(tx):
            for query, parameters in statements:
                tx.run(query, parameters).consume()

        with self.driver.session() as session:
            session.execute_write(_write_tx)

    def save_graph(self, map_id: str, graph: LaneGraph) -> int:
        """
        Store a lane graph, replacing any map with the same id.

        The delete and all writes share one transaction, so a failed save
        leaves the previous map in place.

        Args:
            map_id: Map identifier
            graph: Lane graph

        Returns:
            Number of segments written
        """
        rows = []
        for sid in sorted(graph.segments):
            seg = graph[sid]
            xs = [p[0] for p in seg.centerline]
            ys = [p[1] for p in seg.centerline]
            rows.append(
                {
                    "segment_id": sid,
                    "xs": xs,
                    "ys": ys,
                    "width": seg.width,
                    "successors": list(seg.successors),
                    "left_neighbor": seg.left_neighbor,
                    "right_neighbor": seg.right_neighbor,
                    "left_change_legal": seg.left_change_legal,
                    "right_change_legal": seg.right_change_legal,
                    "min_x": min(xs) - seg.width,
                    "max_x": max(xs) + seg.width,
                    "min_y": min(ys) - seg.width,
                    "max_y": max(ys) + seg.width,
                }
            )
        key = {"map_id": map_id}
        self.execute_write_batch(
            [
                (DELETE_MAP, key),
                (CREATE_SEGMENTS, {**key, "rows": rows}),
                (LINK_SUCCESSORS, key),
                (LINK_NEIGHBORS, key),
            ]
        )
        logger.info(f"Stored map {map_id} with {len(rows)} segments")
        return len(rows)

    def load_graph(self, map_id: str) -> LaneGraph:
        """
        Rebuild a stored lane graph.

        Raises:
            KeyError: If no map with this id is stored
        """
        records = self.execute_query(
            """
            MATCH (s:LaneSegment {map_id: $map_id})
            RETURN s.segment_id AS segment_id, s.xs AS xs, s.ys AS ys, s.width AS width,
                   s.successors AS successors, s.left_neighbor AS left_neighbor,
                   s.right_neighbor AS right_neighbor,
                   s.left_change_legal AS left_change_legal,
                   s.right_change_legal AS right_change_legal
            ORDER BY segment_id
            """,
            {"map_id": map_id},
        )
        if not records:
            raise KeyError(f"Map {map_id} is not stored")
        segments = [
            LaneSegment(
                id=r["segment_id"],
                centerline=tuple(zip(r["xs"], r["ys"])),
                width=r["width"],
                successors=tuple(r["successors"] or ()),
                left_neighbor=r["left_neighbor"],
                right_neighbor=r["right_neighbor"],
                left_change_legal=bool(r["left_change_legal"]),
                right_change_legal=bool(r["right_change_legal"]),
            )
            for r in records
        ]
        return LaneGraph(segments)

    def segments_near(self, map_id: str, x: float, y: float, radius: float) -> List[str]:
        """Ids of segments whose padded bounding box lies within radius of (x, y)."""
        records = self.execute_query(
            """
            MATCH (s:LaneSegment {map_id: $map_id})
            WHERE s.min_x <= $x + $radius AND s.max_x >= $x - $radius
              AND s.min_y <= $y + $radius AND s.max_y >= $y - $radius
            RETURN s.segment_id AS segment_id
            ORDER BY segment_id
            """,
            {"map_id": map_id, "x": x, "y": y, "radius": radius},
        )
        return [r["segment_id"] for r in records]

    def list_maps(self) -> List[str]:
        records = self.execute_query(
            "MATCH (s:LaneSegment) RETURN DISTINCT s.map_id AS map_id ORDER BY map_id"
        )
        return [r["map_id"] for r in records]

    def segment_count(self, map_id: str) -> int:
        result = self.execute_query(
            "MATCH (s:LaneSegment {map_id: $map_id}) RETURN count(s) AS count", {"map_id": map_id}
        )
        return result[0]["count"] if result else 0

    def delete_map(self, map_id: str) -> None:
        logger.debug(f"Deleting map {map_id}")
        self.execute_write(DELETE_MAP, {"map_id": map_id})

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
