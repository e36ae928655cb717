"""Dense tensor kernels used throughout the engine.

Tensors are plain numpy arrays: parameters and activations are stored as
float32, while every similarity-style reduction (Pearson, cosine, z-score)
accumulates and returns float64 so that downstream linear-combination
identities hold to 1e-9. All kernels are deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

# Below this, a row/matrix is treated as constant (dead unit) rather than
# divided by its vanishing scale.
DEGENERATE_STD = 1e-12


def tensor(data, dtype=np.float32) -> np.ndarray:
    """Materialize data as a contiguous array of the requested dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def _require_2d(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ContractError(f"{name} must be rank-2, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors."""
    a = _require_2d("a", a)
    b = _require_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def pearson_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation matrix, shape [x.rows, y.rows].

    Rows with (near-)zero variance correlate 0 with everything, including
    themselves, so dead units never dominate a matching problem.
    """
    x = _require_2d("x", x)
    y = _require_2d("y", y)
    if x.shape[1] != y.shape[1]:
        raise ContractError(f"sample counts differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[1] < 2:
        raise ContractError("pearson_rows needs at least 2 samples per row")

    xc = x.astype(np.float64) - x.mean(axis=1, dtype=np.float64, keepdims=True)
    yc = y.astype(np.float64) - y.mean(axis=1, dtype=np.float64, keepdims=True)
    xn = np.sqrt(np.einsum("ij,ij->i", xc, xc))
    yn = np.sqrt(np.einsum("ij,ij->i", yc, yc))
    x_dead = xn < DEGENERATE_STD
    y_dead = yn < DEGENERATE_STD
    xn = np.where(x_dead, 1.0, xn)
    yn = np.where(y_dead, 1.0, yn)

    out = (xc @ yc.T) / np.outer(xn, yn)
    out[x_dead, :] = 0.0
    out[:, y_dead] = 0.0
    return np.clip(out, -1.0, 1.0)


def cosine_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity matrix; zero-norm rows map to 0."""
    x = _require_2d("x", x)
    y = _require_2d("y", y)
    if x.shape[1] != y.shape[1]:
        raise ContractError(f"column counts differ: {x.shape[1]} vs {y.shape[1]}")

    x64 = x.astype(np.float64)
    y64 = y.astype(np.float64)
    xn = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    yn = np.sqrt(np.einsum("ij,ij->i", y64, y64))
    x_dead = xn < DEGENERATE_STD
    y_dead = yn < DEGENERATE_STD
    xn = np.where(x_dead, 1.0, xn)
    yn = np.where(y_dead, 1.0, yn)

    out = (x64 @ y64.T) / np.outer(xn, yn)
    out[x_dead, :] = 0.0
    out[:, y_dead] = 0.0
    return np.clip(out, -1.0, 1.0)


def zscore(m: np.ndarray) -> np.ndarray:
    """Standardize a matrix by its global mean and population std.

    Degenerate (near-constant) inputs return all zeros instead of NaN.
    """
    m = _require_2d("m", m)
    if m.size == 0:
        raise ContractError("zscore of an empty matrix")
    m64 = m.astype(np.float64)
    mu = m64.mean(dtype=np.float64)
    sd = m64.std(dtype=np.float64)
    if sd < DEGENERATE_STD:
        return np.zeros_like(m64)
    return (m64 - mu) / sd


def symmetric_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues descending, eigenvectors as columns). Input must be
    square and symmetric within 1e-8; it is symmetrized before factoring so
    the result is exactly self-adjoint.
    """
    m = _require_2d("m", m)
    if m.shape[0] != m.shape[1]:
        raise ContractError(f"matrix must be square, got {m.shape}")
    m64 = m.astype(np.float64)
    if m.size and np.max(np.abs(m64 - m64.T)) > 1e-8:
        raise ContractError("matrix is not symmetric within 1e-8")
    sym = 0.5 * (m64 + m64.T)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]
