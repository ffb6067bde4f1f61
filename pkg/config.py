"""
纵向主动特征获取系统 (REACT) - 配置文件
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()

# 项目根目录
BASE_DIR = Path(__file__).parent

# 输出目录 (数据集、检查点、轨迹记录)
OUTPUT_DIR = Path(os.getenv("REACT_OUTPUT_DIR", str(BASE_DIR / "outputs")))

# 日志级别
LOG_LEVEL = os.getenv("REACT_LOG_LEVEL", "INFO")

# 全局默认随机种子
DEFAULT_SEED = int(os.getenv("REACT_SEED", "0"))

# 应用配置
APP_NAME = "react"
APP_VERSION = "1.0.0"

# 数据划分比例 (训练/验证/测试)
DEFAULT_SPLIT_FRACTIONS = (0.64, 0.16, 0.20)

# ============ 训练配置默认值 ============
DEFAULT_TRAIN_CONFIG = {
    "lam": 0.001,                 # 成本系数 λ
    "tau": 1.0,                   # Gumbel-Sigmoid 温度
    "batch_size": 64,
    "total_batches": 1000,
    "warmup_batches": 50,         # 前50批使用离线参考计划
    "K_candidates": 1000,         # 每个实例的候选计划数
    "lr_pretrain": 0.001,
    "lr_policy": 0.001,
    "lr_predictor_joint": 0.0001,
    "dropout_rate": 0.4,
    "seed": DEFAULT_SEED,
    "early_stop_patience": 10,
    "max_pretrain_epochs": 100,
    "eval_interval": 50,
    "planner_hidden": [512, 256, 128],
    "predictor_hidden": [64, 64, 64],
    "time_embedding_dim": 64,
    "split_fractions": list(DEFAULT_SPLIT_FRACTIONS),
    "share_pretrained": True,
}

# ============ 成本预设 ============
# ADNI 形状: 7个背景描述符各0.3, 4个影像生物标志物
ADNI_CONTEXT_COST = 0.3
ADNI_TEMPORAL_COSTS = [1.0, 1.0, 0.5, 0.5]

# 行为数据集: 所有特征成本均为1
UNIT_FEATURE_COST = 1.0

# 合成数据类别阈值校准的试点样本数
PILOT_SAMPLE_SIZE = 10000
