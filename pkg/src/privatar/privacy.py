"""Noise calibration for the offloaded latent code.

The attacker's posterior success rate (PSR) is bounded through the binary
KL divergence between the posterior and prior failure rates:

    d ln(d / d0) + (1 - d) ln((1 - d) / (1 - d0)) <= v

where ``v`` is the mutual-information budget in nats. Given a budget,
:func:`calibrate_damp` picks per-eigendirection Gaussian noise variances
``sigma_i = sqrt(lam_i) * sum_j sqrt(lam_j) / (2 v)`` aligned with the
latent covariance, which minimises total noise power under the surrogate
constraint ``sum_i lam_i / (2 sigma_i) <= v``.
"""

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._container import Reader, check_header, hash64, header
from .codec import LatentCode
from .linalg import EigenDecomposition, covariance, sample_anisotropic_gaussian, sym_eig
from .rng import RngStream

MI_PRESETS = (4.0, 3.0, 1.0, 0.1, 0.01)
BISECTION_TOL = 1e-9
BISECTION_MAX_ITER = 200


class StaleCalibrationWarning(UserWarning):
    pass


# -- PSR <-> MI bound -------------------------------------------------------

def _xlogy_ratio(x: float, y: float) -> float:
    return 0.0 if x == 0.0 else x * math.log(x / y)


def kl_bound(fail: float, prior_fail: float) -> float:
    """Binary KL ``D(fail || prior_fail)``, the left side of the PSR bound."""
    return _xlogy_ratio(fail, prior_fail) + _xlogy_ratio(1.0 - fail, 1.0 - prior_fail)


def psr_from_mi(v: float, prior_success: float, tol: float = BISECTION_TOL) -> float:
    """Largest posterior success rate compatible with an MI budget of ``v`` nats."""
    if not 0.0 < prior_success < 1.0:
        raise ValueError("prior success rate must lie in (0, 1)")
    if v < 0 or math.isnan(v):
        raise ValueError("mutual information budget must be non-negative")
    prior_fail = 1.0 - prior_success
    if v >= kl_bound(0.0, prior_fail):
        return 1.0
    # kl_bound is decreasing on (0, prior_fail]; find the smallest fail with kl <= v
    lo, hi = 0.0, prior_fail
    for _ in range(BISECTION_MAX_ITER):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if kl_bound(mid, prior_fail) <= v:
            hi = mid
        else:
            lo = mid
    return min(1.0, 1.0 - hi)


def mi_from_psr(target_psr: float, prior_success: float) -> float:
    """MI budget (nats) that certifies a posterior success rate of ``target_psr``."""
    if not 0.0 < prior_success < 1.0:
        raise ValueError("prior success rate must lie in (0, 1)")
    if not prior_success <= target_psr < 1.0:
        raise ValueError("target PSR must lie in [prior, 1); below the prior the bound is vacuous")
    return kl_bound(1.0 - target_psr, 1.0 - prior_success)


# -- calibrations -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseCalibration:
    basis: np.ndarray
    sigma: np.ndarray
    v: float
    source_cov_hash: int = 0
    kind: str = "damp"
    degenerate: bool = False
    trace: float = field(init=False)

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(sigma < 0):
            raise ValueError("noise variances must be non-negative")
        d = sigma.shape[0]
        if self.basis.shape != (d, d):
            raise ValueError("basis must be d x d")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "trace", float(np.sum(sigma)))

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def content_hash(self) -> int:
        return hash64(calibration_to_bytes(self))

    def covariance(self) -> np.ndarray:
        return (self.basis * self.sigma) @ self.basis.T

    @classmethod
    def zero(cls, d: int) -> "NoiseCalibration":
        return cls(np.eye(d), np.zeros(d), math.inf, 0, kind="none")


def covariance_hash(cov) -> int:
    return hash64(np.ascontiguousarray(cov, dtype="<f8").tobytes())


def _spectrum(source, samples: bool, backend: str, floor: float):
    if isinstance(source, EigenDecomposition):
        eig = source
        cov_hash = covariance_hash(eig.reconstruct())
    else:
        cov = covariance(source) if samples else np.asarray(source, dtype=np.float64)
        eig = sym_eig(cov, backend=backend)
        cov_hash = covariance_hash(cov)
    lam = np.maximum(eig.eigenvalues, 0.0)
    if floor > 0:
        lam = np.maximum(lam, floor)
    return eig.eigenvectors, lam, cov_hash


def _check_budget(v):
    if not v > 0:
        raise ValueError("MI budget v must be positive (v=0 needs infinite noise)")


def calibrate_damp(source, v: float, *, samples: bool = False, floor: float = 0.0,
                   backend: str = "jacobi") -> NoiseCalibration:
    """Distribution-aware minimal noise for budget ``v``.

    Args:
        source: latent covariance (d x d), a precomputed
            :class:`EigenDecomposition`, or latent samples ``(N, d)`` when
            ``samples=True``.
        v: mutual-information budget in nats.
        floor: optional lower bound applied to eigenvalues before calibration.
        backend: eigensolver backend passed to :func:`sym_eig`.
    """
    _check_budget(v)
    U, lam, cov_hash = _spectrum(source, samples, backend, floor)
    root = np.sqrt(lam)
    total = root.sum()
    degenerate = total == 0.0
    if degenerate:
        warnings.warn("zero latent covariance; DAMP returns zero noise", RuntimeWarning)
    sigma = root * total / (2.0 * v)
    return NoiseCalibration(U, sigma, float(v), cov_hash, "damp", degenerate)


def calibrate_isotropic_mi(source, v: float, *, samples: bool = False, floor: float = 0.0,
                           backend: str = "jacobi") -> NoiseCalibration:
    """Equal-variance noise meeting the same surrogate MI constraint as DAMP.

    Every direction gets ``sum(lam) / (2 v)``; only the trace of the
    covariance is needed, so no eigendecomposition is done unless ``floor``
    is set.
    """
    _check_budget(v)
    if isinstance(source, EigenDecomposition) or floor > 0:
        _, lam, cov_hash = _spectrum(source, samples, backend, floor)
        total, d = lam.sum(), lam.shape[0]
    else:
        cov = covariance(source) if samples else np.asarray(source, dtype=np.float64)
        total, d = max(float(np.trace(cov)), 0.0), cov.shape[0]
        cov_hash = covariance_hash(cov)
    degenerate = total == 0.0
    sigma = np.full(d, total / (2.0 * v))
    return NoiseCalibration(np.eye(d), sigma, float(v), cov_hash, "isotropic", degenerate)


def gaussian_mechanism_std(l2_sensitivity: float, epsilon: float, delta: float) -> float:
    """Per-coordinate std of the classic (epsilon, delta) Gaussian mechanism."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if l2_sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    return l2_sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def calibrate_dp_gaussian(l2_sensitivity: float, epsilon: float, delta: float,
                          dim: int) -> NoiseCalibration:
    std = gaussian_mechanism_std(l2_sensitivity, epsilon, delta)
    return NoiseCalibration(np.eye(dim), np.full(dim, std * std), math.nan, 0, "dp")


def trace_ratio(source, v: float, **kwargs) -> float:
    """Isotropic-to-DAMP noise power ratio ``E||e_iso||^2 / E||e_damp||^2``."""
    damp = calibrate_damp(source, v, **kwargs)
    iso = calibrate_isotropic_mi(source, v, **kwargs)
    return iso.trace / damp.trace if damp.trace > 0 else 1.0


def add_noise(z: LatentCode, cal: NoiseCalibration, rng: RngStream,
              tracker: "DistributionTracker" = None) -> LatentCode:
    """Release ``O = z + e`` with ``e ~ N(0, U diag(sigma) U^T)``."""
    if z.values.shape != (cal.dim,):
        raise ValueError(f"latent dim {z.values.shape[0]} != calibration dim {cal.dim}")
    if tracker is not None and tracker.calibrated_hash not in (0, cal.source_cov_hash):
        warnings.warn("calibration does not match the tracker's current distribution",
                      StaleCalibrationWarning)
    e = sample_anisotropic_gaussian(cal.basis, cal.sigma, rng)
    return LatentCode(z.values + e, z.frame_id, z.path)


# -- online distribution tracking ------------------------------------------

@dataclass
class DistributionTracker:
    """Exponentially weighted latent mean/covariance with drift detection.

    The first ``warmup`` samples are weighted equally (plain running
    average), after which the weight settles at ``1 - beta``. Updates
    return True when a (re)calibration is due: once at the end of warm-up,
    then whenever the trace moves by more than ``tau`` relative to the
    trace at the last signal.
    """

    dim: int
    beta: float = 0.99
    tau: float = 0.05
    warmup: int = 100
    mean: np.ndarray = None
    cov: np.ndarray = None
    samples_seen: int = 0
    reference_trace: float = math.nan
    calibrated_hash: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.cov is None:
            self.cov = np.zeros((self.dim, self.dim))

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))

    def update(self, z) -> bool:
        x = z.values if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"latent dim {x.shape} != tracker dim {self.dim}")
        if not np.all(np.isfinite(x)):
            raise ValueError("tracker rejects non-finite latents")
        self.samples_seen += 1
        w = max(1.0 - self.beta, 1.0 / self.samples_seen)
        diff = x - self.mean
        self.mean = self.mean + w * diff
        self.cov = (1.0 - w) * (self.cov + w * np.outer(diff, diff))
        self.cov = 0.5 * (self.cov + self.cov.T)

        if self.samples_seen < self.warmup:
            return False
        tr = self.trace
        if self.samples_seen == self.warmup or not self.reference_trace > 0:
            self.reference_trace = tr
            return True
        if abs(tr - self.reference_trace) / self.reference_trace > self.tau:
            self.reference_trace = tr
            return True
        return False

    def snapshot(self):
        """Copies of (mean, covariance) for readers."""
        return self.mean.copy(), self.cov.copy()

    def calibrate(self, v: float, backend: str = "jacobi") -> NoiseCalibration:
        _, cov = self.snapshot()
        cal = calibrate_damp(cov, v, backend=backend)
        self.calibrated_hash = cal.source_cov_hash
        return cal


def tracker_update(tracker: DistributionTracker, z):
    """Functional wrapper: returns ``(tracker, recalibrate_signal)``."""
    signal = tracker.update(z)
    return tracker, signal


# -- PCAL container / CSV export -------------------------------------------

PCAL_MAGIC = b"PCAL"


def calibration_to_bytes(cal: NoiseCalibration) -> bytes:
    return (header(PCAL_MAGIC)
            + struct.pack("<dIQ", cal.v, cal.dim, cal.source_cov_hash)
            + cal.sigma.astype("<f8").tobytes()
            + cal.basis.astype("<f8").tobytes())


def calibration_from_bytes(buf: bytes, kind: str = "damp") -> NoiseCalibration:
    r = Reader(buf, check_header(buf, PCAL_MAGIC))
    v, d, src = r.unpack("<dIQ")
    sigma = r.array("<f8", d).astype(np.float64)
    U = r.array("<f8", d * d).astype(np.float64).reshape(d, d)
    r.done()
    return NoiseCalibration(U, sigma, v, src, kind)


def save_calibration(path, cal: NoiseCalibration):
    with open(path, "wb") as fh:
        fh.write(calibration_to_bytes(cal))


def load_calibration(path) -> NoiseCalibration:
    with open(path, "rb") as fh:
        return calibration_from_bytes(fh.read())


BOUND_CSV_HEADER = ("v", "t_psr", "damp_trace", "iso_trace", "ratio")


def bound_rows(source, vs=MI_PRESETS, prior_success: float = 1 / 65, backend: str = "jacobi"):
    """(v, t-PSR, DAMP trace, isotropic trace, ratio) for each budget."""
    eig = source if isinstance(source, EigenDecomposition) else sym_eig(source, backend=backend)
    rows = []
    for v in vs:
        damp = calibrate_damp(eig, v)
        iso = calibrate_isotropic_mi(eig, v)
        ratio = iso.trace / damp.trace if damp.trace > 0 else 1.0
        rows.append((v, psr_from_mi(v, prior_success), damp.trace, iso.trace, ratio))
    return rows


def write_bound_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUND_CSV_HEADER)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])
