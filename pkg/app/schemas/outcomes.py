"""Test outcomes and randomized cutoffs."""

import math
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator


class RandomizedCutoff(BaseModel):
    """A cutoff in the dictionary order on (z, u).

    ``gamma`` is the probability of rejecting when the statistic lands exactly
    on ``c``. For a lower cutoff the boundary rejects when ``u < gamma``; for an
    upper cutoff when ``u > 1 - gamma``.
    """

    model_config = ConfigDict(frozen=True)

    c: float
    gamma: float = Field(ge=0.0, le=1.0)


class Diagnostics(BaseModel):
    """Numerical diagnostics attached to every outcome."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    ess: float | None = Field(default=None, description="有效样本量 (在原假设 θ 处)")
    k1_residual: float | None = Field(default=None, description="水平方程残差 |K1|")
    k2_residual: float | None = Field(default=None, description="无偏方程残差 |K2|")
    seed: int | None = Field(default=None, description="本次检验使用的随机种子")
    flags: list[str] = Field(default_factory=list, description="非致命告警标记")
    extra: dict[str, Any] = Field(default_factory=dict, description="其他诊断信息")

    def flag(self, name: str) -> None:
        if name not in self.flags:
            self.flags.append(name)


class TestOutcome(BaseModel):
    """p-value, decision, interval and diagnostics of one selective test.

    ``p_value`` is the equal-tailed p-value for two-sided procedures and the
    one-sided p-value for ``one_sided`` methods. ``reject`` is the decision of
    ``method``: the randomized UMPU rule for ``umpu``, ``p_value <= alpha``
    otherwise.
    """

    __test__ = False

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="strings")

    method: str
    p_value: float = Field(ge=0.0, le=1.0)
    reject: bool
    alpha: float = Field(gt=0.0, lt=1.0)
    aux_uniform: float | None = Field(default=None, ge=0.0, le=1.0)
    ci_lo: float | None = None
    ci_hi: float | None = None
    cutoffs: tuple[RandomizedCutoff, RandomizedCutoff] | None = None
    diagnostics: Diagnostics = Field(default_factory=Diagnostics)

    @model_validator(mode="after")
    def _check_interval(self) -> "TestOutcome":
        if (self.ci_lo is None) != (self.ci_hi is None):
            raise ValueError("ci_lo and ci_hi must be given together")
        if self.ci_lo is not None and self.ci_lo > self.ci_hi:
            raise ValueError(f"ci_lo {self.ci_lo} exceeds ci_hi {self.ci_hi}")
        return self

    @property
    def interval(self) -> tuple[float, float]:
        if self.ci_lo is None:
            return (-math.inf, math.inf)
        return (self.ci_lo, self.ci_hi)

    def report(self) -> dict[str, Any]:
        """Flat JSON-ready report used by the command line."""
        lo, hi = self.interval
        diagnostics = self.diagnostics
        return {
            "p_value": self.p_value,
            "ci": [_json_float(lo), _json_float(hi)],
            "decision": "reject" if self.reject else "accept",
            "alpha": self.alpha,
            "method": self.method,
            "diagnostics": {
                "ess": diagnostics.ess,
                "k1_residual": diagnostics.k1_residual,
                "k2_residual": diagnostics.k2_residual,
                "seed": diagnostics.seed,
                "flags": list(diagnostics.flags),
            },
        }


def _json_float(value: float) -> float | str:
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return value
