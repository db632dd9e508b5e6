"""Integration tests for the Neo4j map store.

These tests require a running Neo4j instance (see docker-compose.yml) and
are skipped when it can't be reached.
Run with: pytest -m integration
"""

import pytest

from src.intersection_forecast.lane_graph import LaneGraph

pytestmark = pytest.mark.integration


class TestLaneGraphStoreIntegration:
    """Integration tests for LaneGraphStore."""

    def test_simple_query(self, lane_graph_store):
        """Test the store can run a query."""
        assert lane_graph_store.execute_query("RETURN 1 AS num")[0]["num"] == 1

    def test_save_and_load_round_trip(self, lane_graph_store, three_lane_graph):
        """Test a stored graph comes back identical."""
        graph = three_lane_graph(legal=False)
        assert lane_graph_store.save_graph("test_three_lane", graph) == 6

        restored = lane_graph_store.load_graph("test_three_lane")
        assert isinstance(restored, LaneGraph)
        assert restored.to_dict() == graph.to_dict()
        assert lane_graph_store.segment_count("test_three_lane") == 6

    def test_relationships(self, lane_graph_store, chain_graph):
        """Test successor links become relationships."""
        lane_graph_store.save_graph("test_chain", chain_graph)
        result = lane_graph_store.execute_query(
            """
            MATCH (a:LaneSegment {map_id: $map_id})-[:SUCCESSOR]->(b)
            RETURN a.segment_id AS source, b.segment_id AS target ORDER BY source
            """,
            {"map_id": "test_chain"},
        )
        assert [(r["source"], r["target"]) for r in result] == [("A", "B"), ("B", "C")]

    def test_save_replaces_map(self, lane_graph_store, chain_graph):
        """Test saving twice under one id doesn't duplicate segments."""
        lane_graph_store.save_graph("test_chain", chain_graph)
        lane_graph_store.save_graph("test_chain", chain_graph)
        assert lane_graph_store.segment_count("test_chain") == 3

    def test_segments_near(self, lane_graph_store, chain_graph):
        """Test the bounding-box lookup."""
        lane_graph_store.save_graph("test_chain", chain_graph)
        assert lane_graph_store.segments_near("test_chain", 20.0, 0.0, 5.0) == ["A"]
        assert lane_graph_store.segments_near("test_chain", 40.0, 0.0, 1.0) == ["A", "B"]
        assert lane_graph_store.segments_near("test_chain", 20.0, 50.0, 5.0) == []

    def test_list_and_delete(self, lane_graph_store, chain_graph):
        """Test maps are listed and can be deleted."""
        lane_graph_store.save_graph("test_list", chain_graph)
        assert "test_list" in lane_graph_store.list_maps()

        lane_graph_store.delete_map("test_list")
        assert "test_list" not in lane_graph_store.list_maps()
        assert lane_graph_store.segment_count("test_list") == 0

    def test_load_missing_map(self, lane_graph_store):
        """Test loading a map that was never stored."""
        with pytest.raises(KeyError):
            lane_graph_store.load_graph("test_never_saved")
