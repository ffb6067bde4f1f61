"""
命令行测试: 退出码与完整流程
"""
import json

import numpy as np
import pandas as pd
import pytest

from services.training_service import TrainingService
from storage.store_manager import StoreManager
from ui import cli
from ui.cli import run_app
from utils.errors import TrainingError

TINY_CONFIG = {
    "batch_size": 4,
    "total_batches": 3,
    "warmup_batches": 1,
    "K_candidates": 4,
    "max_pretrain_epochs": 2,
    "early_stop_patience": 1,
    "eval_interval": 2,
    "planner_hidden": [8],
    "predictor_hidden": [8],
    "time_embedding_dim": 4,
}

TINY_SPEC = {"n_instances": 30, "d_s": 2, "d": 2, "T": 3, "informative_context": 1, "informative_temporal": 1}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    (tmp_path / "spec.json").write_text(json.dumps(TINY_SPEC), encoding="utf-8")
    return tmp_path


class TestExitCodes:

    def test_help(self, capsys):
        assert run_app(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_unknown_subcommand(self, capsys):
        assert run_app(["teleport"]) == 1
        assert "error=usage" in capsys.readouterr().err

    def test_missing_required_option(self):
        assert run_app(["infer", "--ckpt", "x.json"]) == 1

    def test_no_subcommand(self):
        assert run_app([]) == 1

    def test_missing_data_file(self, workdir, capsys):
        assert run_app(["pretrain", "--data", "absent.json", "--out", "pre.json"]) == 2
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error=")

    def test_bad_config_key(self, workdir, capsys):
        assert run_app(["gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        (workdir / "bad.json").write_text(json.dumps({"learning_rate": 1}), encoding="utf-8")
        assert run_app(["pretrain", "--data", "data.json", "--config", "bad.json", "--out", "p.json"]) == 2
        assert "error=configuration" in capsys.readouterr().err


class TestPipeline:

    def test_end_to_end(self, workdir, capsys):
        assert run_app(["--seed", "3", "gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        assert "instances=30" in capsys.readouterr().out

        assert run_app(["pretrain", "--data", "data.json", "--config", "cfg.json", "--out", "pre.json"]) == 0
        checkpoint = json.loads((workdir / "pre.json").read_text(encoding="utf-8"))
        assert checkpoint["format"] == "react-checkpoint"
        assert checkpoint["manifest"]["standardization"] is not None

        assert run_app(["train", "--data", "data.json", "--config", "cfg.json", "--pretrained", "pre.json",
                        "--out", "model.json", "--metrics", "metrics.jsonl"]) == 0
        assert len((workdir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()) == 3

        capsys.readouterr()
        assert run_app(["infer", "--ckpt", "model.json", "--data", "data.json", "--out", "records.json"]) == 0
        infer_line = capsys.readouterr().out.strip().splitlines()[-1]
        assert " | " in infer_line
        records = json.loads((workdir / "records.json").read_text(encoding="utf-8"))
        assert len(records["records"]) == 6

        assert run_app(["eval", "--records", "records.json", "--data", "data.json"]) == 0
        assert capsys.readouterr().out.strip().splitlines()[-1] == infer_line

        assert run_app(["infer", "--ckpt", "model.json", "--data", "data.json", "--out", "all.json",
                        "--split", "all", "--mode", "acquire_none"]) == 0
        assert capsys.readouterr().out.strip().splitlines()[-1].startswith("0.000/0.000 | ")

        assert run_app(["sweep", "--data", "data.json", "--lambdas", "0.01,1", "--config", "cfg.json",
                        "--out", "sweep.csv"]) == 0
        table = pd.read_csv(workdir / "sweep.csv")
        assert list(table["lambda"]) == [1.0, 0.01]

        assert run_app(["export-traj", "--records", "records.json", "--out-dir", "traj", "--data", "data.json"]) == 0
        for name in ("rollouts.json", "transition_graph.json", "transition_graph.dot", "timestep_costs.csv",
                     "termination_histogram.csv"):
            assert (workdir / "traj" / name).exists()

    def test_checkpoint_dimension_mismatch(self, workdir, capsys):
        assert run_app(["gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        assert run_app(["pretrain", "--data", "data.json", "--config", "cfg.json", "--out", "pre.json"]) == 0
        (workdir / "wide.json").write_text(json.dumps({**TINY_SPEC, "d": 3}), encoding="utf-8")
        assert run_app(["gen-data", "--spec", "wide.json", "--out", "wide_data.json"]) == 0
        assert run_app(["infer", "--ckpt", "pre.json", "--data", "wide_data.json", "--out", "r.json"]) == 2
        assert "error=checkpoint" in capsys.readouterr().err


class TestMalformedInputs:

    def test_dataset_passed_as_records(self, workdir, capsys):
        assert run_app(["gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        assert run_app(["eval", "--records", "data.json", "--data", "data.json"]) == 2
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error=ingestion reason=")

    def test_synthetic_spec_with_wrong_type(self, workdir, capsys):
        (workdir / "typo.json").write_text(json.dumps({"n_instances": "ten"}), encoding="utf-8")
        assert run_app(["gen-data", "--spec", "typo.json", "--out", "data.json"]) == 2
        assert "error=configuration" in capsys.readouterr().err
        assert not (workdir / "data.json").exists()

    def test_unexpected_exception_is_reported(self, workdir, capsys, monkeypatch):
        def explode(args, store):
            raise KeyError("boom")

        monkeypatch.setitem(cli.COMMANDS, "eval", explode)
        assert run_app(["eval", "--records", "r.json", "--data", "d.json"]) == 3
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error=internal reason=KeyError")


class TestPretrainedSplit:

    def test_conflicting_seed_is_rejected(self, workdir, capsys):
        assert run_app(["gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        assert run_app(["--seed", "1", "pretrain", "--data", "data.json", "--config", "cfg.json",
                        "--out", "pre.json"]) == 0
        assert run_app(["--seed", "2", "train", "--data", "data.json", "--config", "cfg.json",
                        "--pretrained", "pre.json", "--out", "model.json"]) == 2
        assert "error=configuration" in capsys.readouterr().err
        assert not (workdir / "model.json").exists()

    def test_split_settings_inherited(self, workdir):
        assert run_app(["gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        assert run_app(["--seed", "1", "pretrain", "--data", "data.json", "--config", "cfg.json",
                        "--out", "pre.json"]) == 0
        assert run_app(["train", "--data", "data.json", "--config", "cfg.json", "--pretrained", "pre.json",
                        "--out", "model.json"]) == 0
        pre = json.loads((workdir / "pre.json").read_text(encoding="utf-8"))
        model = json.loads((workdir / "model.json").read_text(encoding="utf-8"))
        assert model["config"]["seed"] == pre["config"]["seed"] == 1
        assert model["config"]["split_fractions"] == pre["config"]["split_fractions"]


class TestCsvImport:

    @staticmethod
    def _write_tables(workdir):
        pd.DataFrame({
            "id": ["a", "a", "b", "b", "c"],
            "t": [1, 2, 1, 2, 1],
            "label": [0, 1, 1, 1, 0],
            "x0": [0.1, 0.2, 0.3, 0.4, 0.5],
            "x1": [1.0, 2.0, 3.0, 4.0, 5.0],
        }).to_csv(workdir / "temporal.csv", index=False)
        pd.DataFrame({"id": ["a", "b", "c"], "s0": [7.0, 8.0, 9.0]}).to_csv(workdir / "context.csv", index=False)

    def test_import_and_train_ready(self, workdir, capsys):
        self._write_tables(workdir)
        assert run_app(["import-csv", "--temporal", "temporal.csv", "--context", "context.csv",
                        "--temporal-costs", "1,0.5", "--out", "imported.json"]) == 0
        captured = capsys.readouterr()
        assert captured.out.strip().splitlines()[-1].startswith("instances=2 skipped=1 d_s=1 d=2 T=2 C=2")
        assert "skipped reason=实例 c" in captured.err

        manifest, instances = StoreManager(workdir).load_dataset("imported.json")
        assert [inst.id for inst in instances] == ["a", "b"]
        assert manifest.temporal_costs == [1.0, 0.5]
        assert manifest.context_costs == [1.0]
        np.testing.assert_array_equal(instances[0].labels, [0, 1])

    def test_bad_cost_list(self, workdir, capsys):
        self._write_tables(workdir)
        assert run_app(["import-csv", "--temporal", "temporal.csv", "--context", "context.csv",
                        "--context-costs", "cheap", "--out", "imported.json"]) == 2
        assert "error=configuration" in capsys.readouterr().err

    def test_nothing_importable(self, workdir, capsys):
        pd.DataFrame({"id": ["a"], "t": [2], "label": [0], "x0": [0.1]}).to_csv(workdir / "temporal.csv",
                                                                               index=False)
        pd.DataFrame({"id": ["a"], "s0": [1.0]}).to_csv(workdir / "context.csv", index=False)
        assert run_app(["import-csv", "--temporal", "temporal.csv", "--context", "context.csv",
                        "--out", "imported.json"]) == 2
        assert "error=ingestion" in capsys.readouterr().err
        assert not (workdir / "imported.json").exists()

    def test_template(self, workdir):
        assert run_app(["csv-template", "--out-dir", "templates", "--temporal-features", "3"]) == 0
        columns = list(pd.read_csv(workdir / "templates" / "temporal_template.csv").columns)
        assert columns == ["id", "t", "label", "x0", "x1", "x2"]
        assert (workdir / "templates" / "context_template.csv").exists()


class TestSweepFailures:

    def test_failed_lambda_is_reported(self, workdir, capsys, monkeypatch):
        original = TrainingService.train

        def flaky(self, train, val, manifest, cfg, models=None, metrics_path=None):
            if cfg.lam == 1.0:
                raise TrainingError("损失出现非有限值")
            return original(self, train, val, manifest, cfg, models=models, metrics_path=metrics_path)

        monkeypatch.setattr(TrainingService, "train", flaky)
        assert run_app(["gen-data", "--spec", "spec.json", "--out", "data.json"]) == 0
        capsys.readouterr()
        assert run_app(["sweep", "--data", "data.json", "--lambdas", "0.01,1", "--config", "cfg.json",
                        "--out", "sweep.csv"]) == 0
        captured = capsys.readouterr()
        assert "failed lambda=1.0 reason=training: 损失出现非有限值" in captured.err
        assert "failed=1 failed_lambdas=1.0 " in captured.out.strip().splitlines()[-1]

        table = pd.read_csv(workdir / "sweep.csv")
        assert list(table.columns) == ["lambda", "total_cost", "temporal_cost", "context_cost", "auroc", "auprc"]
        assert table.loc[table["lambda"] == 1.0, "total_cost"].isna().all()
        assert table.loc[table["lambda"] == 0.01, "total_cost"].notna().all()
