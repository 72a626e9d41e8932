"""Representational similarity metrics.

Each metric accepts numpy arrays, :class:`ActivationMatrix` or :class:`Tensor`
inputs of shape (examples, features). The ``*_t`` variants return a scalar
Tensor and are differentiable with respect to any input that requires grad;
the plain variants return a float.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import DegenerateInputError, DimensionError, IngestionError
from .tensor import Tensor, no_grad

Matrix = Union[np.ndarray, "ActivationMatrix", Tensor]


@dataclass(frozen=True)
class ActivationMatrix:
    """Activations of ``n`` examples over ``p`` features."""

    values: np.ndarray
    centered: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"activation matrix must be 2-d, got shape {v.shape}")
        if v.shape[0] < 2:
            raise DegenerateInputError(f"need at least 2 examples, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise DegenerateInputError("activation matrix contains NaN or Inf")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def _as_tensor(x: Matrix) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    elif isinstance(x, ActivationMatrix):
        t = Tensor(x.values)
    else:
        t = Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim != 2:
        raise DimensionError(f"expected (examples, features), got shape {t.shape}")
    return t


def _check_rows(x: Tensor, y: Tensor) -> None:
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateInputError(f"need at least 2 examples, got {x.shape[0]}")


def center_columns(x: Matrix) -> Union[np.ndarray, ActivationMatrix]:
    """Subtract each column's mean. Returns the same kind it was given."""
    if isinstance(x, ActivationMatrix):
        if x.centered:
            return x
        v = x.values
        return ActivationMatrix(v - v.mean(axis=0, keepdims=True), centered=True)
    v = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise DimensionError(f"need a 2-d matrix with at least 2 rows, got shape {v.shape}")
    return v - v.mean(axis=0, keepdims=True)


def _center_t(x: Tensor) -> Tensor:
    return x - x.mean(axis=0, keepdims=True)


# -- linear CKA --------------------------------------------------------------------


def linear_cka_t(x: Matrix, y: Matrix) -> Tensor:
    """Linear CKA on column-centered inputs, as a differentiable scalar.

    Uses ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) when the feature counts are
    small, or the equivalent example-space Gram form <XX^T, YY^T> otherwise,
    whichever needs fewer multiply-adds.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_rows(x, y)
    n, px, py = x.shape[0], x.shape[1], y.shape[1]
    xc, yc = _center_t(x), _center_t(y)
    if n * n * (px + py) <= n * (px * py + px * px + py * py):
        k = xc @ xc.T
        l = yc @ yc.T
        cross = (k * l).sum()
        kk = (k * k).sum()
        ll = (l * l).sum()
    else:
        yx = yc.T @ xc
        xx = xc.T @ xc
        yy = yc.T @ yc
        cross = (yx * yx).sum()
        kk = (xx * xx).sum()
        ll = (yy * yy).sum()
    if kk.item() == 0.0 or ll.item() == 0.0:
        raise DegenerateInputError("linear CKA undefined for a zero-variance input")
    return cross / (kk.sqrt() * ll.sqrt())


def linear_cka(x: Matrix, y: Matrix) -> float:
    with no_grad():
        return linear_cka_t(x, y).item()


def linear_cka_eigen(x: Matrix, y: Matrix) -> float:
    """Linear CKA from the eigendecompositions of the centered Gram matrices.

    sum_ij lx_i ly_j <ux_i, uy_j>^2 / (sqrt(sum lx^2) sqrt(sum ly^2)).
    Slow; kept as a reference for the Gram-form implementation.
    """
    xv = center_columns(_as_tensor(x).data)
    yv = center_columns(_as_tensor(y).data)
    if xv.shape[0] != yv.shape[0]:
        raise DimensionError(f"example counts differ: {xv.shape[0]} vs {yv.shape[0]}")
    lx, ux = np.linalg.eigh(xv @ xv.T)
    ly, uy = np.linalg.eigh(yv @ yv.T)
    num = float(lx @ (ux.T @ uy) ** 2 @ ly)
    den = np.sqrt(np.sum(lx ** 2)) * np.sqrt(np.sum(ly ** 2))
    if den == 0.0:
        raise DegenerateInputError("linear CKA undefined for a zero-variance input")
    return num / den


# -- kernel CKA --------------------------------------------------------------------


def _sq_dists_t(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=1, keepdims=True)
    return sq + sq.T - 2.0 * (x @ x.T)


def median_pairwise_distance(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(x.shape[0], k=1)
    return float(np.median(np.sqrt(d2[iu])))


def rbf_gram_t(x: Tensor, bandwidth_multiplier: float = 1.0) -> Tensor:
    """RBF Gram matrix with sigma = multiplier * median pairwise distance.

    Sigma is computed from the current values and treated as a constant.
    """
    med = median_pairwise_distance(x.data)
    if med == 0.0:
        raise DegenerateInputError("kernel CKA undefined: median pairwise distance is zero")
    sigma = bandwidth_multiplier * med
    return (_sq_dists_t(x) * (-0.5 / sigma ** 2)).exp()


def _double_center_t(k: Tensor) -> Tensor:
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def kernel_cka_t(x: Matrix, y: Matrix, bandwidth_multiplier: float = 1.0) -> Tensor:
    """HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with RBF kernels."""
    x, y = _as_tensor(x), _as_tensor(y)
    _check_rows(x, y)
    kc = _double_center_t(rbf_gram_t(x, bandwidth_multiplier))
    lc = _double_center_t(rbf_gram_t(y, bandwidth_multiplier))
    cross = (kc * lc).sum()
    kk = (kc * kc).sum()
    ll = (lc * lc).sum()
    if kk.item() <= 0.0 or ll.item() <= 0.0:
        raise DegenerateInputError("kernel CKA undefined: centered Gram matrix vanishes")
    return cross / (kk.sqrt() * ll.sqrt())


def kernel_cka(x: Matrix, y: Matrix, bandwidth_multiplier: float = 1.0) -> float:
    with no_grad():
        return kernel_cka_t(x, y, bandwidth_multiplier).item()


# -- elementwise metrics -----------------------------------------------------------


def _check_same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"shapes differ: {x.shape} vs {y.shape}")


def frobenius_sq_distance_t(x: Matrix, y: Matrix) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_same_shape(x, y)
    d = x - y
    return (d * d).sum()


def frobenius_sq_distance(x: Matrix, y: Matrix) -> float:
    with no_grad():
        return frobenius_sq_distance_t(x, y).item()


def cosine_vectorized_t(x: Matrix, y: Matrix) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_same_shape(x, y)
    xx = (x * x).sum()
    yy = (y * y).sum()
    if xx.item() == 0.0 or yy.item() == 0.0:
        raise DegenerateInputError("cosine similarity undefined for a zero matrix")
    return (x * y).sum() / (xx.sqrt() * yy.sqrt())


def cosine_vectorized(x: Matrix, y: Matrix) -> float:
    with no_grad():
        return cosine_vectorized_t(x, y).item()


METRICS = {
    "linear_cka": linear_cka,
    "kernel_cka": kernel_cka,
    "frobenius": frobenius_sq_distance,
    "cosine": cosine_vectorized,
}


def all_metrics(x: Matrix, y: Matrix, bandwidth_multiplier: Optional[float] = None) -> dict:
    """Every metric for one pair; elementwise metrics are skipped on shape mismatch."""
    out = {
        "linear_cka": linear_cka(x, y),
        "kernel_cka": kernel_cka(x, y, bandwidth_multiplier or 1.0),
    }
    xs, ys = _as_tensor(x).shape, _as_tensor(y).shape
    if xs == ys:
        out["frobenius"] = frobenius_sq_distance(x, y)
        out["cosine"] = cosine_vectorized(x, y)
    return out


# -- activation dumps ----------------------------------------------------------------
# Layout: n and p as little-endian u32, then n*p little-endian f64 in row-major order.

_DUMP_HEADER = struct.Struct("<II")


def write_activation_dump(x: np.ndarray, path: Union[str, Path]) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"activation dump must be 2-d, got shape {x.shape}")
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(*x.shape))
        f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_activation_dump(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise IngestionError(f"{path}: {len(raw)} bytes, shorter than the {_DUMP_HEADER.size}-byte header")
    n, p = _DUMP_HEADER.unpack_from(raw)
    expected = _DUMP_HEADER.size + 8 * n * p
    if len(raw) != expected:
        raise IngestionError(
            f"{path}: header says {n}x{p}, expected {expected} bytes, got {len(raw)} "
            f"(payload starts at byte offset {_DUMP_HEADER.size})"
        )
    return np.frombuffer(raw, dtype="<f8", offset=_DUMP_HEADER.size).reshape(n, p).astype(np.float64)
