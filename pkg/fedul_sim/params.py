import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fedul_sim._errors import DimensionError


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, immutable vector of model parameters or parameter updates.

    Values are held as a read-only float64 array. Construct through
    `ParamVector.of(...)` or `ParamVector.zeros(dim)` rather than directly.
    """

    values: np.ndarray
    """Read-only float64 array of length `dim`."""

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("ParamVector entries must be finite.")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def of(cls, values: Iterable[float] | np.ndarray) -> "ParamVector":
        if not isinstance(values, np.ndarray):
            values = np.fromiter(values, dtype=np.float64)
        return cls(values)

    @classmethod
    def zeros(cls, dim: int) -> "ParamVector":
        return cls(np.zeros(dim, dtype=np.float64))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __len__(self) -> int:
        return self.dim

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.dim == other.dim and bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        head = ", ".join(f"{v:.6g}" for v in self.values[:4])
        more = ", ..." if self.dim > 4 else ""
        return f"ParamVector(dim={self.dim}, [{head}{more}])"

    def tolist(self) -> list[float]:
        return [float(v) for v in self.values]


def _check_dims(a: ParamVector, b: ParamVector) -> None:
    if a.dim != b.dim:
        raise DimensionError(f"Dimension mismatch: {a.dim} != {b.dim}.")


def vec_add(a: ParamVector, b: ParamVector) -> ParamVector:
    """Elementwise sum of two vectors of equal dimension."""
    _check_dims(a, b)
    return ParamVector(a.values + b.values)


def vec_sub(a: ParamVector, b: ParamVector) -> ParamVector:
    """Elementwise difference `a - b`."""
    _check_dims(a, b)
    return ParamVector(a.values - b.values)


def vec_scale(a: ParamVector, c: float) -> ParamVector:
    """Multiply every entry of `a` by the finite scalar `c`."""
    if not math.isfinite(c):
        raise FloatingPointError(f"Scale factor must be finite, got {c}.")
    return ParamVector(a.values * c)


def vec_norm(a: ParamVector) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(a.values))


def vec_sum(vectors: Sequence[ParamVector], dim: int) -> ParamVector:
    """Sum in the given order; returns the zero vector of `dim` for an empty list."""
    acc = np.zeros(dim, dtype=np.float64)
    for v in vectors:
        if v.dim != dim:
            raise DimensionError(f"Dimension mismatch: {v.dim} != {dim}.")
        acc += v.values
    return ParamVector(acc)


def quantize_f32(a: ParamVector) -> ParamVector:
    """Round every entry to the nearest float32, the precision updates are stored at."""
    return ParamVector(a.values.astype(np.float32).astype(np.float64))
