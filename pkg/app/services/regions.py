"""Selection regions: unions of polytopes {y : A y ≤ b}, and 1-D slices through them."""

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import DegenerateDirectionError, InvalidConfigurationError, NotInRegionError


@dataclass(frozen=True)
class IntervalUnion:
    """Sorted, pairwise disjoint union of intervals (lo, hi) with lo < hi."""

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        cleaned = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in cleaned:
            if math.isnan(lo) or math.isnan(hi) or not lo < hi:
                raise InvalidConfigurationError(f"invalid interval ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(cleaned, cleaned[1:], strict=False):
            if lo <= hi:
                raise InvalidConfigurationError("intervals must be sorted and disjoint")
        object.__setattr__(self, "intervals", cleaned)

    @classmethod
    def merge(cls, pieces: Iterable[tuple[float, float] | None]) -> "IntervalUnion":
        """Union of arbitrary pieces; empty or missing pieces are dropped."""
        valid = sorted(piece for piece in pieces if piece is not None and piece[0] < piece[1])
        merged: list[list[float]] = []
        for lo, hi in valid:
            if merged and lo <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        return cls(tuple((lo, hi) for lo, hi in merged))

    @classmethod
    def real_line(cls) -> "IntervalUnion":
        return cls(((-math.inf, math.inf),))

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    @property
    def lower(self) -> float:
        return self.intervals[0][0]

    @property
    def upper(self) -> float:
        return self.intervals[-1][1]

    def contains(self, x: float) -> bool:
        return any(lo <= x <= hi for lo, hi in self.intervals)

    def intersect(self, lo: float, hi: float) -> "IntervalUnion":
        return IntervalUnion.merge((max(a, lo), min(b, hi)) for a, b in self.intervals)

    def affine(self, offset: float, scale: float) -> "IntervalUnion":
        """Image under t ↦ offset + scale·t (scale > 0)."""
        if not scale > 0:
            raise InvalidConfigurationError("scale must be positive")
        return IntervalUnion(tuple((offset + scale * lo, offset + scale * hi) for lo, hi in self.intervals))

    def total_length(self) -> float:
        return float(sum(hi - lo for lo, hi in self.intervals))

    def to_list(self) -> list[list[float]]:
        return [[lo, hi] for lo, hi in self.intervals]


def _segment(a_dot_d: np.ndarray, slack: np.ndarray) -> tuple[float, float] | None:
    """{t : t·(A d) ≤ slack} as a single interval, or None when empty."""
    lo, hi = -math.inf, math.inf
    pos = a_dot_d > 0
    neg = a_dot_d < 0
    flat = ~(pos | neg)
    if np.any(slack[flat] < 0):
        return None
    if np.any(pos):
        hi = float(np.min(slack[pos] / a_dot_d[pos]))
    if np.any(neg):
        lo = float(np.max(slack[neg] / a_dot_d[neg]))
    if not lo < hi:
        return None
    return lo, hi


@dataclass(frozen=True)
class Polytope:
    """{y : A y ≤ b}; an empty constraint matrix means the whole space."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float).ravel()
        if A.ndim == 1:
            A = A.reshape(0, A.size) if A.size == 0 else A.reshape(1, -1)
        if A.ndim != 2 or A.shape[0] != b.size:
            raise InvalidConfigurationError(
                f"constraint matrix {A.shape} does not match offset vector {b.shape}"
            )
        if np.any(np.isnan(A)) or np.any(np.isnan(b)):
            raise InvalidConfigurationError("polytope contains NaN entries")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def whole_space(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return int(self.A.shape[1])

    @property
    def n_constraints(self) -> int:
        return int(self.A.shape[0])

    def slack(self, y: np.ndarray) -> np.ndarray:
        return self.b - self.A @ y

    def contains(self, y: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(self.slack(y) >= -tol))

    def chord(self, x: np.ndarray, direction: np.ndarray, tol: float = 0.0) -> tuple[float, float] | None:
        """{t : x + t·direction ∈ polytope}; slack within ``tol`` of zero counts as tight."""
        slack = self.slack(x)
        if slack.size and slack.min() >= -tol:
            slack = np.maximum(slack, 0.0)
        return _segment(self.A @ direction, slack)


@dataclass(frozen=True)
class SelectionRegion:
    """Union of polytopes in n-space; membership is the OR over parts."""

    parts: tuple[Polytope, ...]

    def __post_init__(self) -> None:
        parts = tuple(self.parts)
        if not parts:
            raise InvalidConfigurationError("a selection region needs at least one polytope")
        dims = {p.dim for p in parts}
        if len(dims) != 1:
            raise InvalidConfigurationError(f"polytopes live in different dimensions {sorted(dims)}")
        object.__setattr__(self, "parts", parts)

    @classmethod
    def whole_space(cls, dim: int) -> "SelectionRegion":
        return cls((Polytope.whole_space(dim),))

    @classmethod
    def from_polytopes(cls, polytopes: Sequence[tuple[Any, Any]]) -> "SelectionRegion":
        return cls(tuple(Polytope(A, b) for A, b in polytopes))

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "SelectionRegion":
        """{"polytopes": [{"A": [[...]], "b": [...]}, ...]}"""
        try:
            polytopes = data["polytopes"]
            return cls(tuple(Polytope(np.asarray(p["A"], dtype=float), p["b"]) for p in polytopes))
        except (KeyError, TypeError) as e:
            raise InvalidConfigurationError(f"malformed region description: {e}") from e

    def to_json(self) -> dict[str, Any]:
        return {"polytopes": [{"A": p.A.tolist(), "b": p.b.tolist()} for p in self.parts]}

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    def contains(self, y: np.ndarray, tol: float | None = None) -> bool:
        tol = get_settings().sampler.slack_tol if tol is None else tol
        y = np.asarray(y, dtype=float)
        return any(p.contains(y, tol) for p in self.parts)

    def contains_many(self, Y: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Row-wise membership of an (N, n) array."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        inside = np.zeros(Y.shape[0], dtype=bool)
        for p in self.parts:
            if p.n_constraints == 0:
                return np.ones(Y.shape[0], dtype=bool)
            inside |= np.all(Y @ p.A.T <= p.b + tol, axis=1)
        return inside

    def chord(self, x: np.ndarray, direction: np.ndarray, tol: float | None = None) -> IntervalUnion:
        """{t : x + t·direction ∈ region} as a union of segments."""
        tol = get_settings().sampler.slack_tol if tol is None else tol
        return IntervalUnion.merge(p.chord(x, direction, tol) for p in self.parts)

    def ray_intervals(self, direction: np.ndarray, radius: float = 1.0) -> IntervalUnion:
        """{r ∈ [0, radius] : r·direction ∈ region}."""
        return IntervalUnion.merge(
            _segment(p.A @ direction, p.b) for p in self.parts
        ).intersect(0.0, radius)

    def shift(self, delta: np.ndarray) -> "SelectionRegion":
        """{y + delta : y ∈ region}."""
        delta = np.asarray(delta, dtype=float)
        return SelectionRegion(tuple(Polytope(p.A, p.b + p.A @ delta) for p in self.parts))

    def pullback(self, offset: np.ndarray, basis: np.ndarray) -> "SelectionRegion":
        """{v : offset + basis·v ∈ region}, a region in the coordinates of ``basis``."""
        offset = np.asarray(offset, dtype=float)
        basis = np.asarray(basis, dtype=float)
        return SelectionRegion(tuple(Polytope(p.A @ basis, p.b - p.A @ offset) for p in self.parts))

    def embed(self, dim: int, start: int = 0) -> "SelectionRegion":
        """Lift to ``dim``-space acting on coordinates start..start+self.dim; the rest are free."""
        if start < 0 or start + self.dim > dim:
            raise InvalidConfigurationError(f"cannot embed a {self.dim}-dim region into {dim} dims at {start}")
        parts = []
        for p in self.parts:
            A = np.zeros((p.n_constraints, dim))
            A[:, start:start + self.dim] = p.A
            parts.append(Polytope(A, p.b))
        return SelectionRegion(tuple(parts))


def truncation_set(y: np.ndarray, eta: np.ndarray, region: SelectionRegion) -> IntervalUnion:
    """Values of ηᵀ(y + tη) over the points y + tη inside the region.

    For one polytope this is [V⁻(y), V⁺(y)] from the row-wise ratios
    (b − Ay)_i / (Aη)_i; unions merge the per-polytope intervals.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    norm_sq = float(eta @ eta)
    if norm_sq == 0.0:
        raise DegenerateDirectionError("test direction eta has zero length")
    if not region.contains(y):
        raise NotInRegionError("observed y lies outside the selection region")
    segments = region.chord(y, eta)
    return segments.affine(float(eta @ y), norm_sq)
