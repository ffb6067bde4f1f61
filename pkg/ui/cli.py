"""
命令行界面
gen-data / import-csv / pretrain / train / infer / eval / sweep / export-traj 等子命令
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple

import config
from data.synthetic_generator import SYNTHETIC_PRESETS, generate_synthetic, preset_spec
from services.evaluation_service import AblationMode, ablation_policy, pooled_metrics
from services.inference_service import summarize_records
from services.model_service import ReactModels
from services.sweep_service import SweepService, monotonicity_summary, parse_lambdas
from services.trajectory_export_service import TrajectoryExportService
from services.training_service import TrainingService
from storage.models import DatasetManifest, Instance, SyntheticSpec, TrainConfig
from storage.store_manager import StoreManager
from utils.data_import import DataImporter, prepare_splits
from utils.errors import (
    EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, CheckpointError, ConfigurationError, IngestionError, ReactError,
    exit_code_for,
)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """命令行用法错误"""


class CliParser(argparse.ArgumentParser):
    """用法错误时抛出异常，由 run_app 统一输出并返回退出码 1"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> CliParser:
    parser = CliParser(prog=config.APP_NAME, description="成本感知的纵向特征获取: 训练、推理与评估")
    parser.add_argument("--seed", type=int, default=None, help="全局随机种子 (覆盖配置文件)")
    parser.add_argument("--verbose", action="store_true", help="输出调试日志")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=CliParser)

    p = sub.add_parser("gen-data", help="生成合成数据集")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--spec", help="合成数据参数 JSON 文件")
    source.add_argument("--preset", choices=sorted(SYNTHETIC_PRESETS), help="预设名称")
    p.add_argument("--out", required=True, help="输出数据集 JSON")

    p = sub.add_parser("pretrain", help="预训练预测器")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="平铺 JSON 训练配置")
    p.add_argument("--out", required=True, help="输出检查点")

    p = sub.add_parser("train", help="联合训练策略与预测器")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--pretrained", help="预训练检查点 (缺省时先执行预训练)")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="指标日志 (JSON lines) 输出路径")

    p = sub.add_parser("infer", help="推理并写出轨迹记录")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="输出 records.json")
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.add_argument("--mode", choices=[m.value for m in AblationMode], default=AblationMode.REACT.value)
    p.add_argument("--rate", type=float, help="random_rate 模式的获取率")
    p.add_argument("--interval", type=int, help="fixed_interval 模式的间隔")

    p = sub.add_parser("eval", help="评估轨迹记录")
    p.add_argument("--records", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("sweep", help="λ 扫描")
    p.add_argument("--data", required=True)
    p.add_argument("--lambdas", required=True, help="逗号分隔的 λ 列表")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="输出 CSV")

    p = sub.add_parser("import-csv", help="从长格式 CSV 导入纵向数据集")
    p.add_argument("--temporal", required=True, help="时序表: id, t, label, <时序特征...>")
    p.add_argument("--context", required=True, help="背景表: id, <背景特征...>")
    p.add_argument("--out", required=True, help="输出数据集 JSON")
    p.add_argument("--classes", type=int, help="类别数 C (缺省时取最大标签+1)")
    p.add_argument("--context-costs", help="逗号分隔的背景特征成本 (缺省全为1)")
    p.add_argument("--temporal-costs", help="逗号分隔的时序特征成本 (缺省全为1)")

    p = sub.add_parser("csv-template", help="生成长格式导入模板")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--temporal-features", type=int, default=2)
    p.add_argument("--context-features", type=int, default=2)

    p = sub.add_parser("export-traj", help="导出轨迹、转移图与统计表")
    p.add_argument("--records", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--data", help="数据集 (用于特征名与成本)")
    return parser


# ============ 辅助函数 ============

def _load_config(store: StoreManager, path: Optional[str], seed: Optional[int]) -> TrainConfig:
    cfg, _ = _load_config_with_keys(store, path, seed)
    return cfg


def _load_config_with_keys(store: StoreManager, path: Optional[str], seed: Optional[int]
                           ) -> Tuple[TrainConfig, Set[str]]:
    """读取配置，同时返回用户显式给出的键 (含 --seed)"""
    raw = store.read_json(path) if path else {}
    cfg = TrainConfig.from_json(raw) if path else TrainConfig()
    explicit = set(raw) if isinstance(raw, dict) else set()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
        explicit.add("seed")
    return cfg, explicit


# 决定数据划分的配置项，必须与预训练检查点一致
SPLIT_KEYS = ("seed", "split_fractions")


def _inherit_split(cfg: TrainConfig, pretrained: TrainConfig, explicit: Set[str]) -> TrainConfig:
    """沿用预训练检查点的划分种子与比例，显式给出且不一致时报错"""
    changes = {}
    for key in SPLIT_KEYS:
        ours, theirs = getattr(cfg, key), getattr(pretrained, key)
        if ours == theirs:
            continue
        if key in explicit:
            raise ConfigurationError(
                f"{key}={ours} 与预训练检查点中的 {key}={theirs} 不一致，会使测试集与预训练数据重叠"
            )
        changes[key] = theirs
    if changes:
        logger.info(f"沿用预训练检查点的数据划分设置: {changes}")
        return cfg.replace(**changes)
    return cfg


def _load_splits(store: StoreManager, path: str, cfg: TrainConfig, saved: Optional[DatasetManifest] = None
                 ) -> Tuple[DatasetManifest, List[Instance], List[Instance], List[Instance]]:
    """读取并划分数据集；提供检查点清单时先校验维度，再沿用其中的标准化参数"""
    manifest, instances = store.load_dataset(path)
    standardization = None
    if saved is not None:
        _check_compatible(saved, manifest)
        standardization = saved.standardization
    return prepare_splits(manifest, instances, cfg.split_fractions, cfg.seed, standardization)


def _parse_costs(text: Optional[str], option: str) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"{option} 必须为逗号分隔的数字: {text}")


def _check_compatible(saved: DatasetManifest, data: DatasetManifest):
    if (saved.d_s, saved.d, saved.T, saved.C) != (data.d_s, data.d, data.T, data.C):
        raise CheckpointError(
            f"检查点维度 (d_s={saved.d_s}, d={saved.d}, T={saved.T}, C={saved.C}) 与数据集不一致"
        )


# ============ 子命令 ============

def cmd_gen_data(args, store: StoreManager) -> int:
    seed = args.seed if args.seed is not None else config.DEFAULT_SEED
    if args.preset:
        spec = preset_spec(args.preset, seed)
    else:
        data = store.read_json(args.spec)
        if args.seed is not None:
            data = {**data, "seed": args.seed}
        spec = SyntheticSpec.from_json(data)
    manifest, instances = generate_synthetic(spec)
    store.save_dataset(args.out, manifest, instances)
    print(f"instances={len(instances)} d_s={manifest.d_s} d={manifest.d} T={manifest.T} C={manifest.C}")
    return EXIT_OK


def cmd_pretrain(args, store: StoreManager) -> int:
    cfg = _load_config(store, args.config, args.seed)
    manifest, train, val, _ = _load_splits(store, args.data, cfg)
    models, result = TrainingService(store).pretrain(train, val, manifest, cfg)
    store.save_checkpoint(args.out, models, manifest, cfg,
                          extra={"stage": "pretrain", "best_epoch": result.best_epoch,
                                 "best_val_loss": result.best_val_loss})
    print(f"best_epoch={result.best_epoch} val_loss={result.best_val_loss:.4f}")
    return EXIT_OK


def cmd_train(args, store: StoreManager) -> int:
    cfg, explicit = _load_config_with_keys(store, args.config, args.seed)
    models: Optional[ReactModels] = None
    saved_manifest: Optional[DatasetManifest] = None
    if args.pretrained:
        models, saved_manifest, pretrained_cfg = store.load_checkpoint(args.pretrained)
        cfg = _inherit_split(cfg, pretrained_cfg, explicit)
    manifest, train, val, _ = _load_splits(store, args.data, cfg, saved_manifest)
    result = TrainingService(store).train(train, val, manifest, cfg, models=models, metrics_path=args.metrics)
    store.save_checkpoint(args.out, result.models, manifest, cfg, extra={"stage": "train"})
    last = result.log[-1] if result.log else {}
    print(f"iterations={len(result.log)} loss={last.get('loss')} val_auroc={last.get('val_auroc')}")
    return EXIT_OK


def cmd_infer(args, store: StoreManager) -> int:
    models, saved_manifest, cfg = store.load_checkpoint(args.ckpt)
    # 划分沿用检查点中的种子；--seed 只影响随机基线
    policy_seed = args.seed if args.seed is not None else cfg.seed
    manifest, train, val, test = _load_splits(store, args.data, cfg, saved_manifest)
    instances = test if args.split == "test" else [*train, *val, *test]
    result = ablation_policy(AblationMode(args.mode), models, instances, manifest.cost_spec(),
                             rate=args.rate, interval=args.interval, seed=policy_seed)
    store.save_records(args.out, result.records, result.summary)
    print(result.summary.format_line(result.auroc, result.auprc))
    return EXIT_OK


def cmd_eval(args, store: StoreManager) -> int:
    records = store.load_records(args.records)
    _, instances = store.load_dataset(args.data)
    roc, pr = pooled_metrics(records, instances)
    print(summarize_records(records).format_line(roc, pr))
    return EXIT_OK


def cmd_sweep(args, store: StoreManager) -> int:
    cfg = _load_config(store, args.config, args.seed)
    lambdas = parse_lambdas(args.lambdas)
    manifest, train, val, test = _load_splits(store, args.data, cfg)
    service = SweepService(store)
    rows = service.sweep(manifest, train, val, test, lambdas, cfg)
    service.write_csv(args.out, rows)
    correlation = monotonicity_summary(rows)
    failed = [row for row in rows if row.error]
    # CSV 列固定，失败原因只在这里输出
    for row in failed:
        print(f"failed lambda={row.lam} reason={' '.join(row.error.split())}", file=sys.stderr)
    failed_lambdas = ",".join(str(row.lam) for row in failed) or "none"
    print(f"rows={len(rows)} failed={len(failed)} failed_lambdas={failed_lambdas} "
          f"spearman_lambda_cost={correlation}")
    return EXIT_OK


def cmd_export_traj(args, store: StoreManager) -> int:
    records = store.load_records(args.records)
    names, costs = None, None
    if args.data:
        manifest, _ = store.load_dataset(args.data)
        names, costs = manifest.temporal_names, manifest.cost_spec()
    paths = TrajectoryExportService(store).export_trajectories(records, args.out_dir, names, costs)
    print(" ".join(f"{kind}={path}" for kind, path in paths.items()))
    return EXIT_OK


def cmd_import_csv(args, store: StoreManager) -> int:
    importer = DataImporter()
    manifest, instances, errors = importer.import_long_csv(
        str(store.resolve(args.temporal)), str(store.resolve(args.context)),
        n_classes=args.classes,
        context_costs=_parse_costs(args.context_costs, "--context-costs"),
        temporal_costs=_parse_costs(args.temporal_costs, "--temporal-costs"),
    )
    for message in errors:
        print(f"skipped reason={message}", file=sys.stderr)
    if not instances:
        raise IngestionError("没有可导入的有效实例")
    store.save_dataset(args.out, manifest, instances)
    print(f"instances={len(instances)} skipped={len(errors)} d_s={manifest.d_s} d={manifest.d} "
          f"T={manifest.T} C={manifest.C}")
    return EXIT_OK


def cmd_csv_template(args, store: StoreManager) -> int:
    temporal_path, context_path = DataImporter().generate_import_template(
        str(store.resolve(args.out_dir)), args.temporal_features, args.context_features)
    print(f"temporal={temporal_path} context={context_path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-traj": cmd_export_traj,
    "import-csv": cmd_import_csv,
    "csv-template": cmd_csv_template,
}


def _fail(kind: str, message: str):
    reason = " ".join(str(message).split())
    print(f"error={kind} reason={reason}", file=sys.stderr)


def run_app(argv: Optional[Sequence[str]] = None) -> int:
    """运行命令行应用，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        _fail("usage", e)
        return EXIT_USAGE
    except SystemExit as e:
        # --help 正常退出
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        _fail("usage", "缺少子命令")
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    store = StoreManager(Path.cwd())
    try:
        return COMMANDS[args.command](args, store)
    except ReactError as e:
        logger.debug("命令执行失败", exc_info=True)
        _fail(e.kind, e)
        return exit_code_for(e)
    except (OSError, ValueError) as e:
        logger.error(f"命令执行失败: {e}", exc_info=args.verbose)
        _fail("io" if isinstance(e, OSError) else "value", e)
        return exit_code_for(e)
    except ArithmeticError as e:
        _fail("numerical", e)
        return exit_code_for(e)
    except Exception as e:
        logger.error(f"未预期的错误: {e!r}", exc_info=True)
        _fail("internal", f"{type(e).__name__}: {e}")
        return EXIT_NUMERICAL
