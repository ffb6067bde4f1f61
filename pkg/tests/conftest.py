"""
测试公共夹具
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目根目录到路径
sys.path.insert(0, str(Path(__file__).parent.parent))

from services.model_service import init_models  # noqa: E402
from storage.models import DatasetManifest, Instance, TrainConfig  # noqa: E402

SMALL_NETS = {"planner_hidden": [8, 6], "predictor_hidden": [6, 5], "time_embedding_dim": 4}


def _manifest(d_s=2, d=2, T=3, C=2, context_costs=None, temporal_costs=None):
    return DatasetManifest(
        d_s=d_s, d=d, T=T, C=C,
        context_costs=context_costs or [1.0] * d_s,
        temporal_costs=temporal_costs or [1.0] * d,
        context_names=[f"s{i}" for i in range(d_s)],
        temporal_names=[f"x{i}" for i in range(d)],
    )


@pytest.fixture
def make_manifest():
    return _manifest


@pytest.fixture
def tiny_manifest():
    return _manifest(context_costs=[1.0, 0.5], temporal_costs=[1.0, 2.0])


@pytest.fixture
def make_instances():
    def factory(manifest, n, seed=0, label=None):
        rng = np.random.default_rng(seed)
        instances = []
        for k in range(n):
            labels = rng.integers(0, manifest.C, size=manifest.T) if label is None \
                else np.full(manifest.T, label)
            instances.append(Instance(
                id=f"i{k:03d}",
                context=rng.normal(size=manifest.d_s),
                temporal=rng.normal(size=(manifest.T, manifest.d)),
                labels=labels,
            ))
        return instances
    return factory


@pytest.fixture
def tiny_instances(tiny_manifest, make_instances):
    return make_instances(tiny_manifest, 8)


@pytest.fixture
def make_models():
    def factory(manifest, seed=0):
        return init_models(manifest, seed, SMALL_NETS["planner_hidden"], SMALL_NETS["predictor_hidden"],
                           SMALL_NETS["time_embedding_dim"])
    return factory


@pytest.fixture
def tiny_models(tiny_manifest, make_models):
    return make_models(tiny_manifest)


@pytest.fixture
def constant_planner():
    """把规划器改成输出常数 logits 的网络"""
    def apply(models, value):
        for p in models.planner.params:
            p.values[...] = 0.0
        models.planner.params[-1].values[...] = value
        return models
    return apply


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        batch_size=4,
        total_batches=4,
        warmup_batches=2,
        K_candidates=8,
        max_pretrain_epochs=3,
        early_stop_patience=2,
        eval_interval=2,
        seed=0,
        **SMALL_NETS,
    )


# ============ 慢速验收测试 ============

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行标记为 slow 的验收测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 需要完整训练的验收测试 (用 --runslow 启用)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
