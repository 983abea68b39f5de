"""日志系统初始化

- 控制台: stderr, 彩色
- 错误日志: {log.dir}/error.log (ERROR 及以上)
- 通用日志: {log.dir}/app.log (非 debug 模式)
- 模块日志: {log.dir}/{module}.log, 见 MODULE_LOG_FILES

使用方法:
    from app.core.logger import get_module_logger

    log = get_module_logger("sampler")
    log.warning("chord empty, step rejected")

    # 带重复实验编号, 位置列显示为 harness#12
    log.bind(replicate=12).warning("lasso did not converge")

并行重复实验的子进程只写控制台, 由 ``init_worker_logger`` 作为进程池
initializer 安装; 文件 sink 只属于主进程。
"""

import logging
import os
import sys
from collections.abc import Callable
from typing import Any

from loguru import logger as _logger

from app.core.config import get_settings

# 每个 service 一个日志文件
MODULE_LOG_FILES = ("sampler", "umpu", "saturated", "lasso", "discrete", "harness", "cli")

# numpy/scipy 的 RuntimeWarning 经 warnings 模块进入 "py.warnings"
WARNINGS_SOURCE = "[py.warnings]"

THIRD_PARTY_LEVELS = {
    "py.warnings": "WARNING",
    "concurrent.futures": "WARNING",
    "numpy": "WARNING",
    "scipy": "WARNING",
}


def _process_tag() -> str:
    # 主进程与进程池子进程共用格式, 用 PID 后三位区分
    return f"P{os.getpid() % 1000:03d}"


class InterceptHandler(logging.Handler):
    """标准 logging 转发到 loguru"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level: str | int = _logger.level(record.levelname).name
        except ValueError:
            level = record.levelno
        name = record.name or "unknown"
        if name.split(".")[0] in {n.split(".")[0] for n in THIRD_PARTY_LEVELS}:
            source = f"[{name}]"
        else:
            source = f"{os.path.basename(record.pathname)}:{record.funcName}:{record.lineno}"
        _logger.bind(source=source).opt(exception=record.exc_info).log(level, record.getMessage())


def _location(record: dict[str, Any]) -> str:
    extra = record["extra"]
    if "source" in extra:
        return extra["source"]
    module = extra.get("module")
    if module is None:
        return f"{record['name']}:{record['function']}:{record['line']}"
    if "replicate" in extra:
        return f"{module}#{extra['replicate']}"
    return f"{module}:{record['function']}"


def _format(colour: bool) -> Callable[[dict[str, Any]], str]:
    def render(record: dict[str, Any]) -> str:
        where = _location(record).replace("{", "{{").replace("}", "}}").replace("<", r"\<")
        if colour:
            return (
                "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
                f"<yellow>[{_process_tag()}]</yellow> | <cyan>{where}</cyan> | <level>{{message}}</level>\n"
            )
        return f"{{time:YYYY-MM-DD HH:mm:ss}} | {{level: <8}} | [{_process_tag()}] | {where} | {{message}}\n"

    return render


def _module_filter(module_name: str) -> Callable[[dict[str, Any]], bool]:
    def _filter(record: dict[str, Any]) -> bool:
        extra = record["extra"]
        if extra.get("module") == module_name:
            return True
        # 数值告警归入 umpu 日志
        return module_name == "umpu" and extra.get("source") == WARNINGS_SOURCE

    return _filter


def _add_console(level: str, diagnose: bool) -> None:
    _logger.add(sys.stderr, format=_format(True), level=level, colorize=True, backtrace=True, diagnose=diagnose)


def _intercept_stdlib() -> None:
    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)
    logging.captureWarnings(True)
    for name, level in THIRD_PARTY_LEVELS.items():
        std = logging.getLogger(name)
        std.setLevel(level)
        std.handlers = [InterceptHandler()]
        std.propagate = False


def init_logger(log_dir: str | None = None) -> None:
    """初始化主进程日志"""
    settings = get_settings()
    log_dir = settings.log.dir if log_dir is None else log_dir
    _logger.remove()
    _add_console(settings.log.level, settings.debug)

    rolling = {
        "format": _format(False),
        "rotation": settings.log.rotation,
        "retention": settings.log.retention,
        "compression": "zip",
        "backtrace": True,
    }
    _logger.add(f"{log_dir}/error.log", level="ERROR", diagnose=True, **rolling)
    if not settings.debug:
        _logger.add(f"{log_dir}/app.log", level=settings.log.level, diagnose=False, **rolling)
        for module_name in MODULE_LOG_FILES:
            _logger.add(
                f"{log_dir}/{module_name}.log",
                level=settings.log.level,
                filter=_module_filter(module_name),
                diagnose=False,
                **rolling,
            )

    _intercept_stdlib()
    _logger.info(f"Logger initialized (env={settings.env}, seed={settings.seed}, dir={log_dir})")


def init_worker_logger() -> None:
    """进程池子进程: 只保留控制台输出"""
    settings = get_settings()
    _logger.remove()
    _add_console(settings.log.level, False)
    _intercept_stdlib()


def get_module_logger(module_name: str):
    """模块 logger; 模块在 MODULE_LOG_FILES 中时另写 {log.dir}/{module}.log"""
    return _logger.bind(module=module_name)


logger = _logger
