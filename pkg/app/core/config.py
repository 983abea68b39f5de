"""Application settings loaded from YAML configuration files."""

import os
from functools import lru_cache
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.core.exceptions import InvalidConfigurationError

SEED_ENV_VAR = "SELEKTOR_SEED"
CONFIG_DIR_ENV_VAR = "SELEKTOR_CONFIG_DIR"


class LogSettings(BaseModel):
    """日志配置。"""

    level: str = Field(default="INFO", description="日志级别(DEBUG/INFO/WARNING/ERROR/CRITICAL), 可选, 默认INFO")
    rotation: str = Field(default="10 MB", description="日志轮转大小, 可选, 默认10 MB")
    retention: str = Field(default="7 days", description="日志保留时间, 可选, 默认7 days")
    dir: str = Field(default="logs", description="日志目录, 相对当前工作目录, 可选, 默认logs")


class SamplerSettings(BaseModel):
    """约束高斯采样器配置。"""

    burn_in: int = Field(default=1000, ge=0, description="hit-and-run 预烧步数")
    thin: int = Field(default=5, ge=1, description="抽稀间隔")
    n_samples: int = Field(default=2000, ge=1, description="保留样本数")
    rejection_pilot: int = Field(default=20000, ge=100, description="拒绝采样试探批大小")
    rejection_min_acceptance: float = Field(default=1e-4, gt=0, lt=1, description="拒绝采样最低接受率, 低于此值改用 hit-and-run")
    rejection_batch: int = Field(default=10000, ge=1, description="拒绝采样每批抽样数")
    max_start_attempts: int = Field(default=8, ge=1, description="寻找可行初始点的最大尝试次数")
    slack_tol: float = Field(default=1e-9, ge=0, description="区域成员判定的数值容差")


class UMPUSettings(BaseModel):
    """Monte Carlo UMPU 检验配置。"""

    ess_warning: float = Field(default=50.0, gt=0, description="有效样本量告警阈值")
    cutoff_tol: float = Field(default=1e-8, gt=0, description="截断点位置的二分容差")
    theta_tol: float = Field(default=1e-6, gt=0, description="置信区间端点的二分容差")
    reference_points: int = Field(default=9, ge=1, description="初始参考 θ 网格点数")
    reference_spacing: float = Field(default=1.0, gt=0, description="参考点间距(单位: 倾斜标准差的倒数)")
    samples_per_reference: int = Field(default=2000, ge=10, description="每个参考 θ 的样本数")
    max_grid_expansions: int = Field(default=8, ge=0, description="区间端点未括住时向外扩展的最大次数")
    newton_steps: int = Field(default=12, ge=0, description="矩匹配 Newton 迭代次数")
    pool_max_iter: int = Field(default=500, ge=1, description="合并样本归一化常数的最大迭代次数")
    pool_tol: float = Field(default=1e-10, gt=0, description="合并样本归一化常数收敛容差")


class SaturatedSettings(BaseModel):
    """饱和模型截断高斯推断配置。"""

    bracket_halfwidth: float = Field(default=20.0, gt=0, description="求根区间半宽(单位 σ‖η‖)")
    bracket_widen_factor: float = Field(default=50.0, gt=1, description="求根失败后区间放大倍数")
    mills_switch: float = Field(default=8.0, gt=0, description="切换到 Mills 比渐近展开的阈值")


class LassoSettings(BaseModel):
    """Lasso 配置。"""

    tol: float = Field(default=1e-10, gt=0, description="KKT 残差收敛容差")
    max_iter: int = Field(default=10000, ge=1, description="坐标下降最大轮数")
    lambda_mc_draws: int = Field(default=2000, ge=1, description="λ 蒙特卡罗抽样次数")
    max_sign_patterns_active: int = Field(default=12, ge=1, description="不条件于符号时允许的最大活跃变量数")


class ScanSettings(BaseModel):
    """扫描统计量检验配置。"""

    n_mc: int = Field(default=2000, ge=1, description="条件采样次数")
    min_acceptance: float = Field(default=1e-4, gt=0, lt=1, description="条件采样最低接受率")


class ExperimentSettings(BaseModel):
    """模拟实验配置。"""

    replicates: int = Field(default=1000, ge=1, description="默认重复次数")
    threads: int = Field(default=1, ge=1, description="并行进程数上限")


class Settings(BaseModel):
    """应用配置。"""

    model_config = ConfigDict(extra="forbid")

    env: str = Field(default="dev", description="当前环境(dev/test/prod), 可选, 默认dev")
    app_name: str = Field(default="Selektor", description="应用名称, 可选, 默认Selektor")
    debug: bool = Field(default=False, description="调试模式, 可选, 默认False")
    seed: int = Field(default=20150101, ge=0, description="全局随机种子, 环境变量 SELEKTOR_SEED 优先")

    log: LogSettings = Field(default_factory=LogSettings, description="日志配置")
    sampler: SamplerSettings = Field(default_factory=SamplerSettings, description="采样器配置")
    umpu: UMPUSettings = Field(default_factory=UMPUSettings, description="UMPU 检验配置")
    saturated: SaturatedSettings = Field(default_factory=SaturatedSettings, description="饱和模型配置")
    lasso: LassoSettings = Field(default_factory=LassoSettings, description="Lasso 配置")
    scan: ScanSettings = Field(default_factory=ScanSettings, description="扫描检验配置")
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings, description="模拟实验配置")


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """override 优先, 嵌套 dict 逐层合并"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(merged.get(key), dict) and isinstance(value, dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_dir() -> Path:
    """Directory holding base.config.yml; SELEKTOR_CONFIG_DIR overrides the repository root."""
    override = os.getenv(CONFIG_DIR_ENV_VAR)
    return Path(override) if override else Path(__file__).resolve().parents[2]


def _read_yaml(path: Path) -> dict[str, Any]:
    if not path.exists():
        return {}
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise InvalidConfigurationError(f"{path} must hold a mapping at the top level")
    return data


def load_config_data(env: str) -> dict[str, Any]:
    """base.config.yml + {env}.config.yml, then SELEKTOR_SEED."""
    root = config_dir()
    merged = _deep_merge(_read_yaml(root / "base.config.yml"), _read_yaml(root / f"{env}.config.yml"))
    merged["env"] = env
    seed = os.getenv(SEED_ENV_VAR)
    if seed:
        try:
            merged["seed"] = int(seed)
        except ValueError as e:
            raise InvalidConfigurationError(f"{SEED_ENV_VAR}={seed!r} is not an integer") from e
    return merged


@lru_cache
def get_settings() -> Settings:
    """Settings for APP_ENV (default dev), cached until ``reload_settings``."""
    env = os.getenv("APP_ENV", "dev")
    try:
        return Settings(**load_config_data(env))
    except ValidationError as e:
        raise InvalidConfigurationError(f"invalid configuration for env {env!r}: {e}") from e


def reload_settings(env: str | None = None) -> Settings:
    """Drop the cache and reload, switching APP_ENV when ``env`` is given."""
    if env is not None:
        os.environ["APP_ENV"] = env
    get_settings.cache_clear()
    return get_settings()
