"""Pytest configuration and shared fixtures."""

import math
import os

import numpy as np
import pytest
from dotenv import load_dotenv

from src.intersection_forecast.lane_graph import LaneGraph, LaneSegment
from src.intersection_forecast.map_store import LaneGraphStore
from src.intersection_forecast.raster import AgentState, RasterConfig
from src.intersection_forecast.simgen import AgentTrack, Behavior, IntersectionKind, Scenario

# Load environment variables
load_dotenv()


@pytest.fixture(scope="session")
def neo4j_uri():
    """Get Neo4j URI from environment."""
    return os.getenv("NEO4J_URI", "bolt://localhost:7687")


@pytest.fixture(scope="session")
def neo4j_username():
    """Get Neo4j username from environment."""
    return os.getenv("NEO4J_USERNAME", "neo4j")


@pytest.fixture(scope="session")
def neo4j_password():
    """Get Neo4j password from environment."""
    return os.getenv("NEO4J_PASSWORD", "yourpassword")


@pytest.fixture(scope="session")
def neo4j_credentials(neo4j_uri, neo4j_username, neo4j_password):
    """Return Neo4j credentials as a dictionary."""
    return {
        "uri": neo4j_uri,
        "username": neo4j_username,
        "password": neo4j_password,
    }


@pytest.fixture
def lane_graph_store(neo4j_credentials):
    """Connected map store; skips the test when Neo4j isn't reachable."""
    store = LaneGraphStore(**neo4j_credentials)
    try:
        store.connect()
    except Exception as e:
        pytest.skip(f"Neo4j not reachable: {e}")
    yield store
    for map_id in store.list_maps():
        if map_id.startswith("test_"):
            store.delete_map(map_id)
    store.close()


@pytest.fixture
def chain_graph():
    """Three 40 m segments in a row: A -> B -> C."""
    return LaneGraph(
        [
            LaneSegment("A", ((0.0, 0.0), (40.0, 0.0)), 3.5, successors=("B",)),
            LaneSegment("B", ((40.0, 0.0), (80.0, 0.0)), 3.5, successors=("C",)),
            LaneSegment("C", ((80.0, 0.0), (120.0, 0.0)), 3.5),
        ]
    )


@pytest.fixture
def three_lane_graph():
    """
    Straight three-lane road heading +x with a second section.

    L0 is the left lane (y = 3.5), L1 the middle, L2 the right lane; each
    continues into N0/N1/N2. Lane changes are legal between neighbors.
    """

    def lane(sid, y, successor, **links):
        return LaneSegment(sid, ((0.0, y), (50.0, y)), 3.5, (successor,), **links)

    def build(legal=True):
        return LaneGraph(
            [
                lane("L0", 3.5, "N0", right_neighbor="L1", right_change_legal=legal),
                lane(
                    "L1",
                    0.0,
                    "N1",
                    left_neighbor="L0",
                    right_neighbor="L2",
                    left_change_legal=legal,
                    right_change_legal=legal,
                ),
                lane("L2", -3.5, "N2", left_neighbor="L1", left_change_legal=legal),
                LaneSegment("N0", ((50.0, 3.5), (100.0, 3.5)), 3.5),
                LaneSegment("N1", ((50.0, 0.0), (100.0, 0.0)), 3.5),
                LaneSegment("N2", ((50.0, -3.5), (100.0, -3.5)), 3.5),
            ]
        )

    return build


@pytest.fixture
def straight_road():
    """One long northbound lane along x = 0."""
    return LaneGraph([LaneSegment("road", ((0.0, -100.0), (0.0, 500.0)), 3.5)])


@pytest.fixture
def track_factory():
    """Build constant-velocity tracks: states at start + k * speed * 0.4 along heading."""

    def build(
        agent_id="agent_000",
        count=27,
        speed=10.0,
        heading=math.pi / 2,
        start=(0.0, 0.0),
        start_tick=0,
        behavior=Behavior.STRAIGHT,
    ):
        step = speed * 0.4 * np.array([math.cos(heading), math.sin(heading)])
        states = [
            AgentState(tuple(np.asarray(start) + k * step), heading, speed, 4.5, 1.9)
            for k in range(count)
        ]
        return AgentTrack(agent_id, start_tick, states, behavior)

    return build


@pytest.fixture
def small_raster_config():
    """16 x 16 rasters at 2 m per pixel."""
    return RasterConfig(height_px=16, width_px=16, resolution=2.0)


@pytest.fixture
def straight_scenario(straight_road, track_factory):
    """Scenario with two northbound agents on the straight road."""
    return Scenario(
        scenario_id="scn_straight",
        graph=straight_road,
        tracks=[
            track_factory("agent_000", count=28),
            track_factory("agent_001", count=20, start=(0.0, 30.0), speed=8.0),
        ],
        intersection_kind=IntersectionKind.FOUR_LEG,
        seed=0,
    )
