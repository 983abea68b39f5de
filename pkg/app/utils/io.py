"""CSV, region and result files."""

import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app.core.exceptions import InvalidConfigurationError
from app.services.regions import SelectionRegion


def _has_header(path: Path) -> bool:
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
    for cell in first.split(","):
        try:
            float(cell)
        except ValueError:
            return True
    return False


def read_matrix(path: str | Path) -> np.ndarray:
    """Numeric CSV, one observation per row; the first row may be a header."""
    path = Path(path)
    if not path.exists():
        raise InvalidConfigurationError(f"file not found: {path}")
    frame = pd.read_csv(path, header=0 if _has_header(path) else None)
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise InvalidConfigurationError(f"{path} contains non-numeric cells") from e
    if values.size == 0:
        raise InvalidConfigurationError(f"{path} is empty")
    return values


def read_vector(path: str | Path) -> np.ndarray:
    values = read_matrix(path)
    if values.ndim == 2 and min(values.shape) != 1:
        raise InvalidConfigurationError(f"response file must hold one column, got shape {values.shape}")
    return values.ravel()


def read_region(path: str | Path) -> SelectionRegion:
    """{"polytopes": [{"A": [[...]], "b": [...]}, ...]}"""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidConfigurationError(f"cannot read region file {path}: {e}") from e
    return SelectionRegion.from_json(data)


def write_region(region: SelectionRegion, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(region.to_json(), f)


def read_model(path: str | Path, model: type[BaseModel]) -> BaseModel:
    """Validate a JSON config file against ``model``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidConfigurationError(f"cannot read config file {path}: {e}") from e
    try:
        return model.model_validate_json(text)
    except ValidationError as e:
        raise InvalidConfigurationError(f"invalid config in {path}: {e}") from e


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        if math.isnan(value):
            return None
        return "Infinity" if value > 0 else "-Infinity"
    return value


def dump_json(payload: dict[str, Any]) -> str:
    return json.dumps(_jsonable(payload), ensure_ascii=False, indent=2)


def write_output(text: str, path: str | Path | None) -> None:
    """Write to ``path``, or stdout when it is None."""
    if path is None:
        print(text)
        return
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_table(frame: pd.DataFrame, path: str | Path | None) -> None:
    write_output(frame.to_csv(index=False).rstrip("\n"), path)
