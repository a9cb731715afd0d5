"""Dense float64 matrix/vector helpers and seeded random initialization.

Everything runs in 64-bit floats on numpy arrays. Matrix means a 2-D
array, Vector a 1-D array. Randomness goes through ``new_rng`` so the
whole library is reproducible from a single integer seed.
"""

from __future__ import annotations

import math

import numpy as np

Matrix = np.ndarray  # 2-D float64
Vector = np.ndarray  # 1-D float64

# smallest positive subnormal double; used as an underflow floor
_TINY = np.nextafter(0.0, 1.0)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def new_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives identical draws."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(data) -> Matrix:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got shape {m.shape}")
    return m


def as_vector(data) -> Vector:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected 1-D vector, got shape {v.shape}")
    return v


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    """Uniform Xavier/Glorot init on [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dims, got ({rows}, {cols})")
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def softmax(scores: Vector) -> Vector:
    """Max-subtracted softmax; output sums to 1 and never overflows."""
    s = as_vector(scores)
    if s.size == 0:
        raise ShapeError("softmax of empty vector")
    e = np.exp(s - np.max(s))
    return e / e.sum()


def stable_sigmoid(x: float) -> float:
    """Sigmoid that neither overflows nor underflows to exactly 0 or 1.

    exp(x) underflows for x below about -745; the result is floored at
    the smallest positive subnormal so the output stays in (0, 1).
    """
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x) if x > -745 else 0.0
    p = z / (1.0 + z)
    return p if p > 0.0 else float(_TINY)


def tanh(x: float) -> float:
    return math.tanh(x)


def relu(x: float) -> float:
    return x if x > 0.0 else 0.0
