#  Licensed under the Apache License, Version 2.0 (the "License"); you may
#  not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
# 	http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing,
#  software distributed under the License is distributed on an
#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
#  KIND, either express or implied.  See the License for the
#  specific language governing permissions and limitations
#  under the License.

"""Dependency-free decompositions used to initialize delta modules."""

import logging
import warnings
from typing import Any, List, NamedTuple, Tuple

import numpy as np

from ._exceptions import ConvergenceWarning, ShapeError
from ._tensor import Array, Tensor

_logger = logging.getLogger("layer_delta.linalg")

#: Off-diagonal tolerance of a Jacobi sweep, relative to the column norms
JACOBI_TOLERANCE = 1e-12
#: Sweep cap of the Jacobi iteration
JACOBI_MAX_SWEEPS = 60


class SVDResult(NamedTuple):
    #: M×r left singular vectors
    U: Array
    #: r singular values, non-increasing
    S: Array
    #: N×r right singular vectors
    V: Array


class QRResult(NamedTuple):
    #: M×k matrix with orthonormal columns
    Q: Array
    #: k×N upper-triangular matrix with a non-negative diagonal
    R: Array


def _as_matrix(w: Any) -> Array:
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {tuple(data.shape)}")
    if not np.all(np.isfinite(data)):
        raise ValueError("Matrix contains non-finite values")
    return np.array(data, dtype=np.float64)


def _complete_columns(basis: Array, missing: List[int]) -> None:
    """Replaces the columns listed in ``missing`` by unit vectors orthogonal
    to every other column, in place.
    """
    m = basis.shape[0]
    done = [j for j in range(basis.shape[1]) if j not in missing]
    candidates = iter(range(m))
    for j in missing:
        for i in candidates:
            v = np.zeros(m)
            v[i] = 1.0
            for _ in range(2):
                for c in done:
                    v -= (basis[:, c] @ v) * basis[:, c]
            norm = np.linalg.norm(v)
            if norm > 0.5:
                basis[:, j] = v / norm
                done.append(j)
                break


def _jacobi_svd(a: Array) -> Tuple[Array, Array, Array]:
    """Full SVD of a tall matrix (rows >= columns) by one-sided Jacobi."""
    m, n = a.shape
    v = np.eye(n)
    sweep = 0
    converged = n < 2
    while not converged and sweep < JACOBI_MAX_SWEEPS:
        sweep += 1
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if gamma == 0.0 or abs(gamma) <= JACOBI_TOLERANCE * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        converged = not rotated

    if converged:
        _logger.debug("Jacobi SVD of %dx%d converged after %d sweeps", m, n, sweep)
    else:
        _logger.warning(
            "Jacobi SVD of %dx%d didn't converge after %d sweeps", m, n, sweep
        )
        warnings.warn(
            f"Jacobi SVD didn't converge after {JACOBI_MAX_SWEEPS} sweeps",
            category=ConvergenceWarning,
            stacklevel=3,
        )

    sigma = np.linalg.norm(a, axis=0)
    order = sorted(range(n), key=lambda j: (-sigma[j], j))
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros((m, n))
    cutoff = (sigma[0] if n else 0.0) * max(m, n) * np.finfo(np.float64).eps
    missing = []
    for j in range(n):
        if sigma[j] > cutoff and sigma[j] > 0.0:
            u[:, j] = a[:, j] / sigma[j]
        else:
            missing.append(j)
    if missing:
        _complete_columns(u, missing)
    return u, sigma, v


def truncated_svd(w: Any, rank: int) -> SVDResult:
    """Best rank-``rank`` factorization ``W ≈ U·diag(S)·Vᵀ`` of an M×N matrix.

    Singular values are non-negative and sorted in non-increasing order,
    ties keep the column order the Jacobi iteration produced. Left vectors
    of zero singular values are completed to an orthonormal set.
    """
    data = _as_matrix(w)
    m, n = data.shape
    k = min(m, n)
    if not isinstance(rank, (int, np.integer)) or not (1 <= rank <= k):
        raise ShapeError(f"Rank must be between 1 and {k} for shape {(m, n)}, got {rank}")

    if m >= n:
        u, s, v = _jacobi_svd(data)
    else:
        v, s, u = _jacobi_svd(data.T.copy())
    return SVDResult(U=u[:, :rank].copy(), S=s[:rank].copy(), V=v[:, :rank].copy())


def qr_decompose(w: Any) -> QRResult:
    """Thin Householder QR ``W = Q·R`` with ``k = min(M, N)``.

    The diagonal of ``R`` is made non-negative by flipping the sign of
    matching ``Q`` columns, so the identity decomposes into ``Q = R = I``.
    """
    r = _as_matrix(w)
    m, n = r.shape
    k = min(m, n)
    q = np.eye(m)
    for j in range(k):
        x = r[j:, j]
        if not np.any(x[1:]):
            continue
        norm_x = np.linalg.norm(x)
        alpha = -norm_x if x[0] >= 0 else norm_x
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        r[j:, :] -= 2.0 * np.outer(v, v @ r[j:, :])
        q[:, j:] -= 2.0 * np.outer(q[:, j:] @ v, v)

    q = q[:, :k]
    r = np.triu(r[:k, :])
    negative = np.diag(r) < 0
    r[negative, :] *= -1.0
    q[:, negative] *= -1.0
    return QRResult(Q=q, R=r)
