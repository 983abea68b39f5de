"""Simulation configs, metric tables and lasso inference reports."""

import math
from typing import Any, Literal

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.outcomes import TestOutcome

# 指标表的列顺序(CSV 输出固定)
METRIC_COLUMNS = (
    "label",
    "mode",
    "n1",
    "replicates",
    "failures",
    "screened",
    "p_screen",
    "p_screen_se",
    "E_V",
    "E_V_se",
    "E_RminusV",
    "E_RminusV_se",
    "FDR",
    "FDR_se",
    "power",
    "power_se",
    "level",
    "level_se",
)

CURVE_COLUMNS = ("label", "mode", "n1", "p_screen", "power", "screen_times_power")


class CarvingConfig(BaseModel):
    """Data-splitting / data-carving simulation settings."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(default=100, ge=2, description="样本量")
    p: int = Field(default=200, ge=1, description="变量数")
    rho: float = Field(default=0.3, ge=0.0, lt=1.0, description="等相关系数")
    sparsity: int = Field(default=7, ge=0, description="非零系数个数")
    signal: float = Field(default=7.0, description="非零系数取值")
    sigma: float = Field(default=1.0, gt=0.0, description="噪声标准差(已知)")
    n1: int = Field(default=100, ge=1, description="选择阶段样本量")
    mode: Literal["split", "carve"] = Field(default="carve", description="split 或 carve")
    error_dist: Literal["gaussian", "student_t"] = Field(default="gaussian", description="误差分布")
    df: float = Field(default=5.0, gt=0.0, description="student_t 自由度, df > 2 时缩放到单位方差")
    replicates: int | None = Field(default=None, ge=1, description="重复次数, 默认取 experiment.replicates")
    seed: int | None = Field(default=None, ge=0, description="随机种子, 默认取全局种子")
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0, description="检验水平")
    condition_on_signs: bool = Field(default=True, description="是否条件于 lasso 符号")
    lambda_value: float | None = Field(default=None, gt=0.0, description="固定 λ, 默认用 lambda_mc")
    burn_in: int = Field(default=500, ge=0, description="每个检验的链预烧步数")
    thin: int = Field(default=2, ge=1, description="每个检验的链抽稀间隔")
    n_samples: int = Field(default=1000, ge=1, description="每个检验的链样本数")

    @model_validator(mode="after")
    def _check_sizes(self) -> "CarvingConfig":
        if self.n1 > self.n:
            raise ValueError(f"n1={self.n1} exceeds n={self.n}")
        if self.sparsity > self.p:
            raise ValueError(f"sparsity {self.sparsity} exceeds p={self.p}")
        return self

    @property
    def label(self) -> str:
        return f"{self.mode.capitalize()}_{self.n1}"


class ReplicateResult(BaseModel):
    """Outcome of one simulated dataset."""

    index: int
    failed: bool = False
    error: str | None = None
    selected: list[int] = Field(default_factory=list)
    true_selected: int = 0
    noise_selected: int = 0
    screened: bool = False
    true_tests: int = 0
    true_rejections: int = 0
    null_tests: int = 0
    null_rejections: int = 0


class MetricsRow(BaseModel):
    """Aggregated metrics of one configuration; rates with Monte Carlo standard errors.

    Power and level are pooled over screened replicates and are NaN when no
    test of that kind ran.
    """

    model_config = ConfigDict(ser_json_inf_nan="strings")

    label: str
    mode: str
    n1: int
    replicates: int
    failures: int
    screened: int
    p_screen: float
    p_screen_se: float
    E_V: float
    E_V_se: float
    E_RminusV: float
    E_RminusV_se: float
    FDR: float
    FDR_se: float
    power: float
    power_se: float
    level: float
    level_se: float

    @property
    def E_R(self) -> float:
        return self.E_V + self.E_RminusV


class MetricsTable(BaseModel):
    """Rows of metrics, one per configuration."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    rows: list[MetricsRow] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records = [row.model_dump() for row in self.rows]
        return pd.DataFrame.from_records(records, columns=list(METRIC_COLUMNS))

    def curve_frame(self) -> pd.DataFrame:
        """Screening probability against power, and their product."""
        frame = self.to_frame()
        frame["screen_times_power"] = frame["p_screen"] * frame["power"]
        return frame.loc[:, list(CURVE_COLUMNS)]

    def row(self, label: str) -> MetricsRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)


class AggregateConfig(BaseModel):
    """Discipline-wide, FCR and FWER simulation settings."""

    model_config = ConfigDict(frozen=True)

    groups: int = Field(default=100_000, ge=1, description="效应(研究组)数量")
    per_experiment: int = Field(default=10, ge=2, description="fcr/fwer 每次实验的均值个数")
    threshold: float = Field(default=1.0, ge=0.0, description="选择阈值 |Y| > threshold")
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0, description="检验水平")
    test: Literal["selective", "nominal", "trivial"] = Field(default="selective", description="使用的检验")
    null_fraction: float = Field(default=1.0, ge=0.0, le=1.0, description="真原假设比例")
    signal: float = Field(default=3.0, description="非零效应取值")
    seed: int | None = Field(default=None, ge=0, description="随机种子")


class AggregateReport(BaseModel):
    """Long-run error ratio with its binomial standard error."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    kind: str
    test: str
    alpha: float
    ratio: float
    se: float
    numerator: float
    denominator: float
    extra: dict[str, Any] = Field(default_factory=dict)


class VariableInference(BaseModel):
    """Selective test for one active lasso variable."""

    variable: int
    sign: int
    outcome: TestOutcome | None = None
    error: str | None = None


class LassoInferenceReport(BaseModel):
    """Post-lasso inference; an empty model means no question was selected."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    lam: float
    active: list[int]
    signs: list[int]
    condition_on_signs: bool
    kkt_residual: float
    results: list[VariableInference] = Field(default_factory=list)

    @property
    def no_question_selected(self) -> bool:
        return not self.active

    def report(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "active": self.active,
            "signs": self.signs,
            "condition_on_signs": self.condition_on_signs,
            "kkt_residual": self.kkt_residual,
            "no_question_selected": self.no_question_selected,
            "variables": [
                {
                    "variable": r.variable,
                    "sign": r.sign,
                    **(r.outcome.report() if r.outcome is not None else {"error": r.error}),
                }
                for r in self.results
            ],
        }


def rate_se(successes: float, trials: float) -> tuple[float, float]:
    """Binomial proportion and its standard error; NaN when there are no trials."""
    if trials <= 0:
        return math.nan, math.nan
    rate = successes / trials
    return rate, math.sqrt(max(rate * (1.0 - rate), 0.0) / trials)
