"""
异常定义
统一的错误类型，以及命令行退出码映射
"""


class ReactError(Exception):
    """所有业务错误的基类"""

    kind = "error"


class ConfigurationError(ReactError, ValueError):
    """配置错误: 维度不匹配、非法超参数等"""

    kind = "configuration"


class InputError(ReactError, ValueError):
    """输入错误: 标签越界、时间步越界、形状不一致"""

    kind = "input"


class IngestionError(InputError):
    """数据导入错误，消息中包含实例ID与字段名"""

    kind = "ingestion"

    def __init__(self, message: str, instance_id: str = "", field: str = "", line: int = 0):
        self.instance_id = instance_id
        self.field = field
        self.line = line
        location = []
        if line:
            location.append(f"line {line}")
        if instance_id:
            location.append(f"instance {instance_id}")
        if field:
            location.append(f"field {field}")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")


class TrainingError(ReactError, RuntimeError):
    """训练错误: 损失非有限值等"""

    kind = "training"


class CheckpointError(ReactError, RuntimeError):
    """检查点错误: 参数缺失或含NaN"""

    kind = "checkpoint"


class OracleError(ReactError, ArithmeticError):
    """梯度校验等测试预言机中的数值错误"""

    kind = "oracle"


# 退出码: 0 成功, 1 用法错误, 2 数据错误, 3 训练/数值错误
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def exit_code_for(error: BaseException) -> int:
    """将异常映射为命令行退出码"""
    if isinstance(error, (TrainingError, OracleError)):
        return EXIT_NUMERICAL
    if isinstance(error, (ReactError, OSError, ValueError)):
        return EXIT_DATA
    return EXIT_NUMERICAL
