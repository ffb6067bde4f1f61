"""
轨迹导出服务
逐实例获取轨迹、聚合转移图 (JSON/DOT)、逐时间步平均成本表与终止步直方图
"""
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from storage.models import CostSpec, TrajectoryRecord
from storage.store_manager import StoreManager
from utils.errors import InputError

logger = logging.getLogger(__name__)

NodeKey = Tuple[int, int]    # (特征下标, 时间步)


@dataclass
class GraphNode:
    feature: int
    t: int
    frequency: float
    count: int


@dataclass
class GraphEdge:
    source: NodeKey
    target: NodeKey
    weight: float
    count: int


@dataclass
class TransitionGraph:
    """聚合转移图: 节点为 特征@时间，边连接相邻两次获取"""
    nodes: List[GraphNode] = field(default_factory=list)
    edges: List[GraphEdge] = field(default_factory=list)
    n_records: int = 0

    def edge_map(self) -> Dict[Tuple[NodeKey, NodeKey], GraphEdge]:
        return {(e.source, e.target): e for e in self.edges}

    def outgoing_weight(self, node: NodeKey) -> float:
        return sum(e.weight for e in self.edges if e.source == node)

    def to_json(self, feature_names: Optional[Sequence[str]] = None) -> dict:
        name = _namer(feature_names)
        return {
            "n_records": self.n_records,
            "nodes": [
                {"id": f"{name(n.feature)}@{n.t}", "feature": n.feature, "t": n.t,
                 "frequency": n.frequency, "count": n.count}
                for n in self.nodes
            ],
            "edges": [
                {"from": f"{name(e.source[0])}@{e.source[1]}", "to": f"{name(e.target[0])}@{e.target[1]}",
                 "weight": e.weight, "count": e.count}
                for e in self.edges
            ],
        }

    def to_dot(self, feature_names: Optional[Sequence[str]] = None) -> str:
        """DOT 渲染，同一时间步的节点排在同一层"""
        name = _namer(feature_names)
        lines = ["digraph acquisitions {", "  rankdir=LR;", "  node [shape=ellipse];"]
        by_time: Dict[int, List[GraphNode]] = defaultdict(list)
        for node in self.nodes:
            by_time[node.t].append(node)
        for t in sorted(by_time):
            members = " ".join(f'"{name(n.feature)}@{n.t}";' for n in by_time[t])
            lines.append(f"  {{ rank=same; {members} }}")
        for node in self.nodes:
            label = f"{name(node.feature)}@{node.t}\\n{node.frequency:.2f}"
            lines.append(f'  "{name(node.feature)}@{node.t}" [label="{label}"];')
        for edge in self.edges:
            source = f"{name(edge.source[0])}@{edge.source[1]}"
            target = f"{name(edge.target[0])}@{edge.target[1]}"
            lines.append(f'  "{source}" -> "{target}" [label="{edge.weight:.3f}", penwidth={1 + 4 * edge.weight:.2f}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _namer(feature_names: Optional[Sequence[str]]):
    if feature_names:
        return lambda i: str(feature_names[i])
    return lambda i: f"x{i}"


def acquisition_sequence(record: TrajectoryRecord) -> List[Tuple[int, List[int]]]:
    """按时间排列的 (t, 获取的特征下标列表)，只含有获取的时间步"""
    return [(step.t, [i for i, a in enumerate(step.acquired) if a]) for step in record.steps if any(step.acquired)]


def build_transition_graph(records: Sequence[TrajectoryRecord]) -> TransitionGraph:
    """
    聚合转移图

    边 m@t → n@t' 当且仅当某条记录在 t 获取 m 且下一次获取发生在 t' 并包含 n；
    每条记录对该边贡献 1/(N·|t' 的获取特征数|)，所以同一源节点的出边权重之和 ≤ 1
    """
    n = len(records)
    graph = TransitionGraph(n_records=n)
    if n == 0:
        return graph
    node_counts: Dict[NodeKey, int] = defaultdict(int)
    edge_weights: Dict[Tuple[NodeKey, NodeKey], float] = defaultdict(float)
    edge_counts: Dict[Tuple[NodeKey, NodeKey], int] = defaultdict(int)

    for record in records:
        sequence = acquisition_sequence(record)
        for t, features in sequence:
            for m in features:
                node_counts[(m, t)] += 1
        for (t, current), (t_next, following) in zip(sequence, sequence[1:]):
            share = 1.0 / (n * len(following))
            for m in current:
                for k in following:
                    key = ((m, t), (k, t_next))
                    edge_weights[key] += share
                    edge_counts[key] += 1

    graph.nodes = [
        GraphNode(feature=m, t=t, frequency=count / n, count=count)
        for (m, t), count in sorted(node_counts.items(), key=lambda item: (item[0][1], item[0][0]))
    ]
    graph.edges = [
        GraphEdge(source=source, target=target, weight=edge_weights[(source, target)],
                  count=edge_counts[(source, target)])
        for source, target in sorted(edge_weights, key=lambda key: (key[0][1], key[0][0], key[1][1], key[1][0]))
    ]
    return graph


def rollout_summary(record: TrajectoryRecord, feature_names: Optional[Sequence[str]] = None) -> dict:
    """单个实例: 哪些时间获取了哪些特征，以及终止步"""
    name = _namer(feature_names)
    return {
        "id": record.instance_id,
        "context_mask": list(record.context_mask),
        "acquisitions": [{"t": t, "features": [name(i) for i in features]}
                         for t, features in acquisition_sequence(record)],
        "termination_step": record.termination_step,
        "costs": {"context": record.context_cost, "temporal": record.temporal_cost, "total": record.total_cost},
    }


def timestep_cost_table(records: Sequence[TrajectoryRecord], costs: Optional[CostSpec] = None) -> pd.DataFrame:
    """逐时间步的平均获取特征数与平均时序成本 (缺省单位成本)"""
    grids = np.stack([r.acquired_grid() for r in records])      # (N, T, d)
    weights = costs.c_x if costs is not None else np.ones(grids.shape[2])
    return pd.DataFrame({
        "t": np.arange(1, grids.shape[1] + 1),
        "mean_features": grids.sum(axis=2).mean(axis=0),
        "mean_cost": (grids @ weights).mean(axis=0),
        "fraction_acquiring": grids.any(axis=2).mean(axis=0),
    })


def termination_histogram(records: Sequence[TrajectoryRecord]) -> pd.DataFrame:
    """终止步 0..T 的计数与比例"""
    T = len(records[0].steps)
    steps = pd.Series([r.termination_step if r.termination_step is not None else T for r in records])
    counts = steps.value_counts().reindex(range(T + 1), fill_value=0)
    return pd.DataFrame({
        "termination_step": counts.index.astype(int),
        "count": counts.to_numpy(),
        "fraction": counts.to_numpy() / len(records),
    })


class TrajectoryExportService:
    """轨迹导出服务"""

    def __init__(self, store: Optional[StoreManager] = None):
        self.store = store or StoreManager()

    def export_trajectories(
        self,
        records: Sequence[TrajectoryRecord],
        out_dir,
        feature_names: Optional[Sequence[str]] = None,
        costs: Optional[CostSpec] = None,
    ) -> Dict[str, Path]:
        """
        写出全部导出文件

        Returns:
            文件类型 → 路径
        """
        if not records:
            raise InputError("没有可导出的推理记录")
        out = Path(out_dir)
        graph = build_transition_graph(records)
        paths = {
            "rollouts": out / "rollouts.json",
            "graph": out / "transition_graph.json",
            "dot": out / "transition_graph.dot",
            "costs": out / "timestep_costs.csv",
            "termination": out / "termination_histogram.csv",
        }
        self.store.write_json(paths["rollouts"], [rollout_summary(r, feature_names) for r in records])
        self.store.write_json(paths["graph"], graph.to_json(feature_names))
        self.store.write_text(paths["dot"], graph.to_dot(feature_names))
        self.store.write_table(paths["costs"], timestep_cost_table(records, costs))
        self.store.write_table(paths["termination"], termination_histogram(records))
        logger.info(f"轨迹导出完成: {len(records)} 条记录, 图 {len(graph.nodes)} 个节点 / {len(graph.edges)} 条边")
        return paths
