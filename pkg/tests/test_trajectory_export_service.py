"""
轨迹导出测试: 转移图、成本表、终止直方图
"""
import json

import numpy as np
import pandas as pd
import pytest

from services.trajectory_export_service import (
    TrajectoryExportService, build_transition_graph, termination_histogram, timestep_cost_table,
)
from storage.models import CostSpec, StepRecord, TrajectoryRecord
from storage.store_manager import StoreManager
from utils.errors import InputError


def _record(grid, name="r"):
    grid = np.asarray(grid, dtype=int)
    times = [t + 1 for t in range(grid.shape[0]) if grid[t].any()]
    steps = [StepRecord(t=t + 1, prediction=[0.5, 0.5], acquired=grid[t].tolist(), replanned=bool(grid[t].any()))
             for t in range(grid.shape[0])]
    temporal = float(grid.sum())
    return TrajectoryRecord(instance_id=name, context_mask=[0], steps=steps,
                            termination_step=times[-1] if times else 0,
                            context_cost=0.0, temporal_cost=temporal, total_cost=temporal)


class TestTransitionGraph:

    def test_single_transition(self):
        graph = build_transition_graph([_record([[1, 0], [0, 0], [0, 1]])])
        edges = graph.edge_map()
        assert list(edges) == [((0, 1), (1, 3))]
        assert edges[((0, 1), (1, 3))].weight == pytest.approx(1.0)
        assert [(n.feature, n.t, n.frequency) for n in graph.nodes] == [(0, 1, 1.0), (1, 3, 1.0)]

    def test_weight_split_over_following_features(self):
        records = [_record([[1, 0], [1, 1], [0, 0]], "a"), _record([[1, 0], [0, 0], [0, 0]], "b")]
        edges = build_transition_graph(records).edge_map()
        assert edges[((0, 1), (0, 2))].weight == pytest.approx(0.25)
        assert edges[((0, 1), (1, 2))].weight == pytest.approx(0.25)
        assert edges[((0, 1), (1, 2))].count == 1

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(0)
        grids = [(rng.random((5, 3)) < 0.3).astype(int) for _ in range(40)]
        graph = build_transition_graph([_record(g, f"r{i}") for i, g in enumerate(grids)])
        expected = {}
        for g in grids:
            for t in range(5):
                for t_next in range(t + 1, 5):
                    if not g[t].any() or not g[t_next].any() or g[t + 1: t_next].any():
                        continue
                    for m in np.flatnonzero(g[t]):
                        for k in np.flatnonzero(g[t_next]):
                            key = ((int(m), t + 1), (int(k), t_next + 1))
                            expected[key] = expected.get(key, 0.0) + 1.0 / (40 * g[t_next].sum())
        edges = graph.edge_map()
        assert set(edges) == set(expected)
        for key, weight in expected.items():
            assert edges[key].weight == pytest.approx(weight)

    def test_outgoing_weight_bounded(self):
        rng = np.random.default_rng(1)
        records = [_record((rng.random((6, 4)) < 0.5).astype(int), f"r{i}") for i in range(25)]
        graph = build_transition_graph(records)
        for node in graph.nodes:
            assert graph.outgoing_weight((node.feature, node.t)) <= node.frequency + 1e-12

    def test_no_acquisitions(self):
        records = [_record(np.zeros((4, 2)), f"r{i}") for i in range(3)]
        graph = build_transition_graph(records)
        assert graph.nodes == [] and graph.edges == []
        histogram = termination_histogram(records)
        assert list(histogram["termination_step"]) == [0, 1, 2, 3, 4]
        assert list(histogram["count"]) == [3, 0, 0, 0, 0]
        assert histogram["fraction"].iloc[0] == 1.0

    def test_renderings(self):
        graph = build_transition_graph([_record([[1, 0], [0, 1]])])
        data = graph.to_json(["hr", "bp"])
        assert [n["id"] for n in data["nodes"]] == ["hr@1", "bp@2"]
        assert data["edges"][0]["from"] == "hr@1" and data["edges"][0]["to"] == "bp@2"
        dot = graph.to_dot(["hr", "bp"])
        assert dot.startswith("digraph")
        assert '"hr@1" -> "bp@2"' in dot


class TestTables:

    def test_timestep_costs(self):
        records = [_record([[1, 1], [0, 0]], "a"), _record([[1, 0], [0, 1]], "b")]
        table = timestep_cost_table(records, CostSpec(c_s=[0.0], c_x=[1.0, 2.0]))
        assert list(table["t"]) == [1, 2]
        assert list(table["mean_features"]) == [1.5, 0.5]
        assert list(table["mean_cost"]) == [2.0, 1.0]
        assert list(table["fraction_acquiring"]) == [1.0, 0.5]


class TestExport:

    def test_writes_all_files(self, tmp_path):
        records = [_record([[1, 0], [0, 1], [0, 0]], "a"), _record([[0, 0], [0, 0], [0, 0]], "b")]
        paths = TrajectoryExportService(StoreManager(tmp_path)).export_trajectories(
            records, tmp_path / "traj", ["hr", "bp"])
        for path in paths.values():
            assert path.exists()
        rollouts = json.loads(paths["rollouts"].read_text(encoding="utf-8"))
        assert rollouts[0]["acquisitions"] == [{"t": 1, "features": ["hr"]}, {"t": 2, "features": ["bp"]}]
        histogram = pd.read_csv(paths["termination"])
        assert histogram.set_index("termination_step")["count"].to_dict() == {0: 1, 1: 0, 2: 1, 3: 0}

    def test_empty_records(self, tmp_path):
        with pytest.raises(InputError):
            TrajectoryExportService(StoreManager(tmp_path)).export_trajectories([], tmp_path)
