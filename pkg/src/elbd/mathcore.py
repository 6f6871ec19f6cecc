"""Dense linear algebra and counter-based random streams.

Arrays are plain ``numpy.ndarray`` objects in float64. The helpers here add
the shape and singularity checks the rest of the package relies on.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return a


def mat_mul(a, b) -> np.ndarray:
    a, b = _as_f64(a), _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"mat_mul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _check_finite(a @ b, "mat_mul")


def tril_solve(L, b) -> np.ndarray:
    """Solve ``L x = b`` for lower-triangular ``L``."""
    L, b = _as_f64(L), _as_f64(b)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"L must be square, got {L.shape}")
    if b.shape[0] != L.shape[0]:
        raise ShapeError(f"rhs has {b.shape[0]} rows, L has {L.shape[0]}")
    if np.any(np.diag(L) == 0.0):
        raise SingularMatrixError("lower-triangular factor has a zero on its diagonal")
    return _check_finite(solve_triangular(L, b, lower=True), "tril_solve")


def spd_inverse(L) -> np.ndarray:
    """Return ``(L L^T)^{-1}`` from a Cholesky factor with positive diagonal.

    Two triangular solves; no general-purpose inversion.
    """
    L = _as_f64(L)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"L must be square, got {L.shape}")
    if np.any(np.diag(L) <= 0.0):
        raise SingularMatrixError("Cholesky factor needs a strictly positive diagonal")
    eye = np.eye(L.shape[0])
    linv = solve_triangular(L, eye, lower=True)
    prec = solve_triangular(L.T, linv, lower=False)
    # symmetrize away round-off
    return _check_finite(0.5 * (prec + prec.T), "spd_inverse")


def chol_logdet(L) -> float:
    """log det(L L^T) = 2 sum log diag(L)."""
    d = np.diagonal(_as_f64(L), axis1=-2, axis2=-1)
    return 2.0 * np.sum(np.log(d), axis=-1)


def _key_part(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode())


@dataclass(frozen=True)
class Rng:
    """An immutable handle on a counter-based random stream.

    The stream is a Philox generator keyed by ``(seed, path)``. Sampling from
    the same handle twice gives the same values; use :meth:`split` to derive
    independent child streams (one per data item, epoch, batch ...).
    """

    seed: int
    path: tuple = ()

    def split(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_part(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        key = ss.generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)


def box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Map two arrays of uniforms (u1 in (0, 1]) to 2*len standard normals."""
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * u1.size)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out


def sample_standard_normal(rng: Rng, shape) -> np.ndarray:
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    m = (n + 1) // 2
    u = rng.uniform(2 * m)
    # 1 - U keeps the log argument away from zero
    z = box_muller(1.0 - u[:m], u[m:])
    return z[:n].reshape(shape)


def sample_rows(rng: Rng, items, shape) -> np.ndarray:
    """Stack one normal draw of ``shape`` per item, each from ``rng.split(item)``.

    Results for an item do not depend on which other items share the batch.
    """
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    return np.stack([sample_standard_normal(rng.split(int(k)), shape) for k in items])
