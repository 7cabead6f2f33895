"""Small input-validation helpers shared by the model modules."""

from __future__ import annotations

import math

import numpy as np

from rbess.exceptions import DomainError


def check_soc(q) -> float:
    q = float(q)
    if not (0.0 <= q <= 1.0):
        raise DomainError(f"state of charge must lie in [0, 1], got {q}")
    return q


def check_positive(value, name: str, strict: bool = True) -> float:
    value = float(value)
    ok = value > 0 if strict else value >= 0
    if not ok or math.isnan(value):
        rel = ">" if strict else ">="
        raise DomainError(f"{name} must be {rel} 0, got {value}")
    return value


def check_vector(values, n: int | None = None, name: str = "values") -> np.ndarray:
    """1-D finite float array, optionally of length ``n``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DomainError(f"{name} must have length {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def check_table(soc, volts) -> tuple[np.ndarray, np.ndarray]:
    x = check_vector(soc, name="soc")
    y = check_vector(volts, n=x.shape[0], name="volts")
    if x.shape[0] < 2:
        raise DomainError("an OCV table needs at least two rows")
    if np.any(np.diff(x) <= 0):
        raise DomainError("soc column must be strictly increasing")
    if x[0] < 0 or x[-1] > 1:
        raise DomainError("soc column must lie within [0, 1]")
    return x, y
