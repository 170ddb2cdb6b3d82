"""Linear (PCA) encoder/decoder for one reconstruction path.

The encoder maps a flattened stack of component planes to a ``d``-dim
latent code ``W (x - mu)``; the decoder maps back with ``W.T z + mu``.
Rows of ``W`` are the leading eigenvectors of the corpus covariance.
"""

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._container import FormatError, Reader, check_header, hash64, header
from .linalg import covariance, sym_eig

DEFAULT_LATENT_DIM = 256
PUBLISHED_BASELINE_LOSS = 0.072
PATHS = ("local", "offloaded")
_DENSE_EIG_LIMIT = 512


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    frame_id: int = 0
    path: str = "offloaded"

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent code has non-finite values")


@dataclass(frozen=True, eq=False)
class Codec:
    path: str
    mean: np.ndarray
    basis: np.ndarray
    variances: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}")
        if self.basis.ndim != 2 or self.basis.shape[1] != self.mean.shape[0]:
            raise ValueError("basis must be d x n with n = len(mean)")
        if self.basis.shape[0] > self.basis.shape[1]:
            raise ValueError("latent dim exceeds input dim")

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[0]

    @cached_property
    def content_hash(self) -> int:
        return hash64(_codec_body(self))


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, None]


def _complete_basis(rows: np.ndarray, n: int, d: int) -> np.ndarray:
    """Extend orthonormal rows to ``d`` rows with an orthonormal complement."""
    k = rows.shape[0]
    if k >= d:
        return rows[:d]
    # deterministic complement: project out the span from axis vectors
    extra = []
    basis = list(rows)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        for b in basis:
            e -= (b @ e) * b
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            e /= norm
            for b in basis:
                e -= (b @ e) * b
            e /= np.linalg.norm(e)
            basis.append(e)
            extra.append(e)
            if k + len(extra) == d:
                break
    return np.vstack([rows] + extra)


def train_codec(corpus, d: int = DEFAULT_LATENT_DIM, path: str = "offloaded",
                backend: str = "lapack") -> Codec:
    """Fit a PCA codec to row vectors ``corpus`` (shape ``(N, n)``).

    For ``n`` up to 512 the covariance is eigendecomposed directly with
    :func:`sym_eig` (``backend`` picks Jacobi or LAPACK); larger inputs use a
    thin SVD of the centred data, which yields the same eigenvectors.
    """
    X = np.asarray(corpus, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("corpus must be a 2-D array of row vectors")
    N, n = X.shape
    if N < 2:
        raise ValueError("codec training needs at least 2 samples")
    if not 1 <= d <= n:
        raise ValueError(f"latent dim {d} must be in [1, {n}]")
    mu = X.mean(axis=0)
    if n <= _DENSE_EIG_LIMIT:
        eig = sym_eig(covariance(X), backend=backend)
        rows = eig.eigenvectors[:, :d].T
        variances = np.maximum(eig.eigenvalues[:d], 0.0)
    else:
        Xc = X - mu
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        lam = s ** 2 / N
        rows = _complete_basis(vt, n, d)
        variances = np.concatenate([lam, np.zeros(max(0, d - lam.shape[0]))])[:d]
    return Codec(path, mu, np.ascontiguousarray(_fix_signs(rows)), variances)


def encode(codec: Codec, x, frame_id: int = 0) -> LatentCode:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != codec.input_dim:
        raise ValueError(f"input length {x.shape[0]} != codec input dim {codec.input_dim}")
    return LatentCode(codec.basis @ (x - codec.mean), frame_id, codec.path)


def decode(codec: Codec, z) -> np.ndarray:
    values = z.values if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    if values.shape != (codec.latent_dim,):
        raise ValueError(f"latent length {values.shape} != codec latent dim {codec.latent_dim}")
    return codec.basis.T @ values + codec.mean


def encode_batch(codec: Codec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return (X - codec.mean) @ codec.basis.T


def decode_batch(codec: Codec, Z) -> np.ndarray:
    return np.asarray(Z, dtype=np.float64) @ codec.basis + codec.mean


def mse(a, b) -> float:
    """Mean squared error over all tensor elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def normalized_loss(value: float, baseline: float = PUBLISHED_BASELINE_LOSS) -> float:
    return value / baseline


# -- PCDC container ---------------------------------------------------------

PCDC_MAGIC = b"PCDC"


def _codec_body(codec: Codec) -> bytes:
    return (header(PCDC_MAGIC)
            + struct.pack("<BII", PATHS.index(codec.path), codec.input_dim, codec.latent_dim)
            + codec.mean.astype("<f8").tobytes()
            + codec.basis.astype("<f8").tobytes())


def codec_to_bytes(codec: Codec) -> bytes:
    return _codec_body(codec) + struct.pack("<Q", codec.content_hash)


def codec_from_bytes(buf: bytes) -> Codec:
    r = Reader(buf, check_header(buf, PCDC_MAGIC))
    tag, n, d = r.unpack("<BII")
    if tag >= len(PATHS):
        raise FormatError(f"bad path tag {tag}")
    mu = r.array("<f8", n).astype(np.float64)
    W = r.array("<f8", d * n).astype(np.float64).reshape(d, n)
    stored = r.unpack("<Q")
    r.done()
    codec = Codec(PATHS[tag], mu, W)
    if codec.content_hash != stored:
        raise FormatError("PCDC content hash mismatch")
    return codec


def save_codec(path, codec: Codec):
    with open(path, "wb") as fh:
        fh.write(codec_to_bytes(codec))


def load_codec(path) -> Codec:
    with open(path, "rb") as fh:
        return codec_from_bytes(fh.read())
