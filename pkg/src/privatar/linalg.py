"""Dense linear algebra used by calibration and the PCA codec.

The symmetric eigensolver is a cyclic Jacobi method with round-robin
(tournament) pair ordering: each round applies n/2 disjoint rotations at
once, so a full sweep costs n-1 vectorised rounds instead of n(n-1)/2
scalar rotations.
"""

import struct
from dataclasses import dataclass

import numpy as np

from ._container import FormatError, Reader, check_header, header
from .rng import RngStream

MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending; ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * self.eigenvalues) @ U.T


def covariance(samples, unbiased: bool = False) -> np.ndarray:
    """Sample covariance of row vectors.

    Uses the maximum-likelihood denominator ``n`` by default; pass
    ``unbiased=True`` for ``n - 1``.
    """
    try:
        X = np.asarray(samples, dtype=np.float64)
    except ValueError as exc:
        raise ValueError("samples must all have the same dimension") from exc
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("samples must all have the same dimension")
    n = X.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least 2 samples")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (n - 1 if unbiased else n)
    return 0.5 * (C + C.T)


def _tournament(n: int):
    """Round-robin schedule: n-1 rounds, each an (n/2, 2) array of disjoint pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append(np.stack([np.minimum(p, q), np.maximum(p, q)], axis=1))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def sym_eig(M, tol: float = 1e-12, max_sweeps: int = MAX_SWEEPS,
            backend: str = "jacobi") -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix by Jacobi rotations.

    Iterates until the off-diagonal Frobenius norm drops below
    ``tol * ||M||_F``. ``backend="lapack"`` routes to ``numpy.linalg.eigh``
    instead, which is much faster for d in the hundreds; output conventions
    are identical.

    Raises:
        ValueError: if ``M`` is not square or not symmetric within 1e-9.
        ConvergenceError: if ``max_sweeps`` sweeps do not converge.
    """
    A = np.array(M, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("sym_eig needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    n = A.shape[0]
    scale = max(1.0, float(np.max(np.abs(A)))) if n else 1.0
    if n and np.max(np.abs(A - A.T)) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    if backend == "lapack":
        w, U = np.linalg.eigh(A)
        return EigenDecomposition(w[::-1].copy(), np.ascontiguousarray(U[:, ::-1]), 0)
    if backend != "jacobi":
        raise ValueError(f"unknown eigensolver backend {backend!r}")
    if n <= 1:
        return EigenDecomposition(A.diagonal().copy(), np.eye(n), 0)

    # pad to even size with an isolated zero row/col
    m = n + (n % 2)
    if m != n:
        A = np.pad(A, ((0, 1), (0, 1)))
    Vt = np.eye(m)
    threshold = tol * np.linalg.norm(A)
    rounds = _tournament(m)
    R = np.empty((m // 2, 2, 2))

    sweeps = 0
    while True:
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= threshold:
            break
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")
        sweeps += 1
        for pq in rounds:
            p, q = pq[:, 0], pq[:, 1]
            apq = A[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            diag = np.diagonal(A)
            theta = np.where(active, (diag[q] - diag[p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            R[:, 0, 0] = c
            R[:, 0, 1] = -s
            R[:, 1, 0] = s
            R[:, 1, 1] = c
            # A' = P^T A P = P^T (P^T A)^T for symmetric A, so rows only
            A[pq] = R @ A[pq]
            A = np.ascontiguousarray(A.T)
            A[pq] = R @ A[pq]
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vt[pq] = R @ Vt[pq]

    V = Vt.T
    # the padding index has zero couplings, is never rotated, and drops out here
    evals = np.diag(A)[:n].copy()
    evecs = V[:n, :n]
    order = np.argsort(-evals, kind="stable")
    return EigenDecomposition(evals[order], np.ascontiguousarray(evecs[:, order]), sweeps)


def clamp_nonnegative(eigenvalues: np.ndarray) -> np.ndarray:
    """Zero out small negative eigenvalues produced by round-off."""
    return np.maximum(np.asarray(eigenvalues, dtype=np.float64), 0.0)


def sample_anisotropic_gaussian(U, sigma, rng: RngStream, size=None) -> np.ndarray:
    """Draw ``e = U diag(sqrt(sigma)) z`` with ``z`` standard normal.

    With ``size=N`` returns an ``(N, d)`` batch; row draws are identical to
    ``N`` sequential single draws from the same stream.
    """
    U = np.asarray(U, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("noise variances must be non-negative")
    d = sigma.shape[0]
    if U.shape != (d, d):
        raise ValueError(f"basis shape {U.shape} does not match sigma length {d}")
    root = np.sqrt(sigma)
    if size is None:
        z = rng.standard_normal(d)
        return U @ (root * z)
    z = rng.standard_normal((size, d))
    return (z * root) @ U.T


# -- PMAT container ---------------------------------------------------------

PMAT_MAGIC = b"PMAT"


def matrix_to_bytes(M) -> bytes:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("PMAT stores 2-D matrices only")
    rows, cols = M.shape
    return header(PMAT_MAGIC) + struct.pack("<II", rows, cols) + M.astype("<f8").tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    r = Reader(buf, check_header(buf, PMAT_MAGIC))
    rows, cols = r.unpack("<II")
    data = r.array("<f8", rows * cols)
    r.done()
    if not np.all(np.isfinite(data)):
        raise FormatError("PMAT payload has non-finite entries")
    return data.reshape(rows, cols).astype(np.float64)
