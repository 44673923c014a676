"""Deflation-based principal directions of an output point cloud.

Directions are extracted one at a time: projected gradient ascent on the
uncentered second-moment objective J(a) = (1/t) sum_j (a^T z_j)^2 over the
unit sphere (a damped power iteration), then removal of the found
component from every vector before the next round. Products are
matrix-free against the t stored vectors; the n x n moment matrix is never
formed. No mean subtraction anywhere: downstream algebra projects raw
logit vectors through A, so the basis must describe second moments about
the origin, not the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ProjectionBasis",
    "deflate",
    "reduce",
    "lift",
    "save_basis",
    "load_basis",
]

_INIT_FALLBACK_NORM = 1e-14
_TINY = 1e-300


class BasisFormatError(ValueError):
    """Raised for malformed basis files."""


@dataclass(frozen=True)
class ProjectionBasis:
    """Orthonormal principal directions stored as columns of ``matrix``.

    ``rayleigh[k]`` is the objective attained by column k against the
    stage-k (pre-deflation) second-moment operator; ``iterations`` and
    ``converged`` record the ascent's termination per direction.
    """

    matrix: np.ndarray  # (n, N)
    rayleigh: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_components(self) -> int:
        return self.matrix.shape[1]


def deflate(
    train_vectors: np.ndarray,
    num_components: int,
    step_size: float = 10.0,
    max_iters: int = 10_000,
    tol: float = 1e-10,
) -> ProjectionBasis:
    """Extract the top ``num_components`` principal directions.

    Parameters
    ----------
    train_vectors : (t, n) array
        Point cloud; consumed read-only (an internal copy is deflated).
    num_components : int
        N, with 1 <= N <= min(n, t).
    step_size : float
        Gradient step relative to the current objective value; any
        positive value converges (the ascent map shares eigenvectors with
        the moment operator), larger is closer to pure power iteration.
    max_iters : int
        Per-direction cap; non-convergence is flagged, not raised.
    tol : float
        Stop when the relative objective improvement falls below this.
    """
    Z = np.array(train_vectors, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError("train_vectors must be a non-empty (t, n) array")
    if not np.all(np.isfinite(Z)):
        raise ValueError("train_vectors must be finite")
    t, n = Z.shape
    if not (1 <= num_components <= min(n, t)):
        raise ValueError(
            f"num_components must lie in [1, min(n, t)] = [1, {min(n, t)}], "
            f"got {num_components}"
        )

    cols = []
    rayleigh = np.empty(num_components)
    iterations = np.zeros(num_components, dtype=np.int64)
    converged = np.zeros(num_components, dtype=bool)

    for index in range(num_components):
        a = _initial_direction(Z, cols, n)
        j_prev = _objective(Z, a, t)
        for it in range(1, max_iters + 1):
            grad = 2.0 * (Z.T @ (Z @ a)) / t
            a = a + step_size * grad / max(2.0 * j_prev, _TINY)
            a /= np.linalg.norm(a)
            j_cur = _objective(Z, a, t)
            if j_cur - j_prev <= tol * max(j_prev, _TINY):
                j_prev = max(j_cur, j_prev)
                converged[index] = True
                iterations[index] = it
                break
            j_prev = j_cur
        else:
            iterations[index] = max_iters
        # re-orthogonalize against earlier directions; this only moves a by
        # float dust but keeps the pairwise-orthogonality contract unconditional
        for prev in cols:
            a = a - (prev @ a) * prev
        a /= np.linalg.norm(a)
        # sign convention: largest-magnitude entry positive, comparable runs
        if a[np.argmax(np.abs(a))] < 0:
            a = -a
        rayleigh[index] = _objective(Z, a, t)
        cols.append(a)
        Z -= np.outer(Z @ a, a)

    return ProjectionBasis(
        matrix=np.stack(cols, axis=1),
        rayleigh=rayleigh,
        iterations=iterations,
        converged=converged,
    )


def _objective(Z: np.ndarray, a: np.ndarray, t: int) -> float:
    w = Z @ a
    return float(w @ w) / t


def _initial_direction(Z: np.ndarray, cols, n: int) -> np.ndarray:
    """Deterministic start: normalized vector sum of the stage's cloud,
    which already lies orthogonal to every extracted direction. Falls back
    to the first Cartesian direction with a nonzero residual against the
    extracted ones when the sum degenerates."""
    a = Z.sum(axis=0)
    norm = np.linalg.norm(a)
    if norm >= _INIT_FALLBACK_NORM:
        return a / norm
    for k in range(n):
        a = np.zeros(n)
        a[k] = 1.0
        for prev in cols:
            a = a - (prev @ a) * prev
        norm = np.linalg.norm(a)
        if norm >= 1e-8:
            return a / norm
    raise ValueError("could not construct an initial direction")


def reduce(basis: ProjectionBasis, y: np.ndarray) -> np.ndarray:
    """A^T y: reduced coordinates; accepts (n,) or (k, n)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != basis.input_dim:
        raise ValueError(
            f"last dim {y.shape[-1]} != basis input dim {basis.input_dim}"
        )
    return y @ basis.matrix


def lift(basis: ProjectionBasis, v: np.ndarray) -> np.ndarray:
    """A v: back to the ambient space; accepts (N,) or (k, N)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != basis.num_components:
        raise ValueError(
            f"last dim {v.shape[-1]} != num components {basis.num_components}"
        )
    return v @ basis.matrix.T


# Basis container: ASCII header "PCA v1 <n> <N>", then the N columns one
# after another (column-major), little-endian float64.


def save_basis(basis: ProjectionBasis, path) -> None:
    n, N = basis.matrix.shape
    with open(path, "wb") as fh:
        fh.write(f"PCA v1 {n} {N}\n".encode("ascii"))
        fh.write(np.asfortranarray(basis.matrix, dtype="<f8").tobytes(order="F"))
        fh.write(np.ascontiguousarray(basis.rayleigh, dtype="<f8").tobytes())


def load_basis(path) -> ProjectionBasis:
    with open(path, "rb") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 4 or parts[0] != b"PCA" or parts[1] != b"v1":
            raise BasisFormatError(f"malformed basis header in {path}")
        try:
            n, N = int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise BasisFormatError(f"malformed basis header in {path}") from exc
        payload = fh.read()
    if len(payload) != (n * N + N) * 8:
        raise BasisFormatError(f"truncated basis payload in {path}")
    matrix = np.frombuffer(payload, dtype="<f8", count=n * N).reshape((n, N), order="F")
    rayleigh = np.frombuffer(payload, dtype="<f8", count=N, offset=n * N * 8)
    return ProjectionBasis(
        matrix=matrix.copy(),
        rayleigh=rayleigh.copy(),
        iterations=np.zeros(N, dtype=np.int64),
        converged=np.ones(N, dtype=bool),
    )
