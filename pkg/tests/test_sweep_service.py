"""
λ 扫描服务测试
"""
import math

import pandas as pd
import pytest

from services.sweep_service import SWEEP_COLUMNS, SweepService, monotonicity_summary, parse_lambdas
from storage.models import SweepRow
from storage.store_manager import StoreManager
from utils.errors import ConfigurationError


def _row(lam, total, error=""):
    return SweepRow(lam=lam, total_cost=total, temporal_cost=total, context_cost=0.0, auroc=None, auprc=None,
                    error=error)


class TestParseLambdas:

    def test_parse(self):
        assert parse_lambdas("1, 0.1,0.01") == [1.0, 0.1, 0.01]

    @pytest.mark.parametrize("text", ["", "a,b", "0.1,-1"])
    def test_invalid(self, text):
        with pytest.raises(ConfigurationError):
            parse_lambdas(text)


class TestMonotonicity:

    def test_decreasing_cost(self):
        rows = [_row(1.0, 0.5), _row(0.1, 2.0), _row(0.01, 5.0)]
        assert monotonicity_summary(rows) == pytest.approx(-1.0)

    def test_failed_rows_ignored(self):
        rows = [_row(1.0, 0.5), _row(0.1, math.nan, error="training: boom")]
        assert monotonicity_summary(rows) is None

    def test_constant_cost(self):
        assert monotonicity_summary([_row(1.0, 2.0), _row(0.5, 2.0)]) is None


class TestSweep:

    def test_rows_descending_and_consistent(self, tiny_manifest, tiny_instances, tiny_cfg, tmp_path):
        service = SweepService(StoreManager(tmp_path))
        rows = service.sweep(tiny_manifest, tiny_instances[:5], tiny_instances[5:6], tiny_instances[6:],
                             [0.001, 1.0, 0.1], tiny_cfg)
        assert [row.lam for row in rows] == [1.0, 0.1, 0.001]
        for row in rows:
            assert row.error == ""
            assert row.total_cost == pytest.approx(row.temporal_cost + row.context_cost)

    def test_single_lambda_csv(self, tiny_manifest, tiny_instances, tiny_cfg, tmp_path):
        service = SweepService(StoreManager(tmp_path))
        rows = service.sweep(tiny_manifest, tiny_instances[:5], tiny_instances[5:6], tiny_instances[6:],
                             [0.5], tiny_cfg)
        service.write_csv("sweep.csv", rows)
        table = pd.read_csv(tmp_path / "sweep.csv")
        assert list(table.columns) == SWEEP_COLUMNS
        assert len(table) == 1
        assert table["lambda"].iloc[0] == 0.5

    def test_training_failure_becomes_row(self, tiny_manifest, tiny_instances, tiny_cfg, tmp_path):
        cfg = tiny_cfg.replace(share_pretrained=False)
        rows = SweepService(StoreManager(tmp_path)).sweep(tiny_manifest, [], [], tiny_instances, [1.0, 0.1], cfg)
        assert len(rows) == 2
        assert all(row.error.startswith("input") and math.isnan(row.total_cost) for row in rows)

    def test_empty_lambda_list(self, tiny_manifest, tiny_instances, tiny_cfg, tmp_path):
        with pytest.raises(ConfigurationError):
            SweepService(StoreManager(tmp_path)).sweep(tiny_manifest, tiny_instances, tiny_instances,
                                                       tiny_instances, [], tiny_cfg)
