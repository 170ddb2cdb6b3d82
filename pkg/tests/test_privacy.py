import math
import warnings

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from privatar.codec import LatentCode
from privatar.linalg import sym_eig
from privatar.privacy import (BOUND_CSV_HEADER, MI_PRESETS, DistributionTracker, NoiseCalibration,
                              StaleCalibrationWarning, add_noise, bound_rows, calibrate_damp,
                              calibrate_dp_gaussian, calibrate_isotropic_mi,
                              calibration_from_bytes, calibration_to_bytes, gaussian_mechanism_std,
                              kl_bound, load_calibration, mi_from_psr, psr_from_mi,
                              save_calibration, trace_ratio, tracker_update, write_bound_csv)
from privatar.rng import RngStream

PRIOR = 1 / 65
# 30-digit root-finding on the binary-KL bound (mpmath), frozen
ORACLE_PSR = {4: 0.980846011646, 3: 0.827997200467, 1: 0.398387824068,
              0.1: 0.0967534355457, 0.01: 0.035761034922}


def _scipy_psr(v, prior):
    q = 1 - prior
    f = lambda d: kl_bound(d, q) - v
    if f(1e-300) <= 0:
        return 1.0
    return 1 - scipy.optimize.brentq(f, 1e-300, q, xtol=1e-14)


@pytest.mark.parametrize("v", MI_PRESETS)
def test_psr_matches_frozen_oracle(v):
    assert abs(psr_from_mi(v, PRIOR) - ORACLE_PSR[v]) < 2e-9


@pytest.mark.parametrize("prior", [0.5, 0.1, 1 / 143, 1e-3])
@pytest.mark.parametrize("v", [0.001, 0.05, 0.7, 2.5])
def test_psr_matches_scipy(prior, v):
    assert abs(psr_from_mi(v, prior) - _scipy_psr(v, prior)) < 2e-9


def test_psr_edges():
    assert psr_from_mi(0.0, PRIOR) == pytest.approx(PRIOR, abs=1e-9)
    # once v reaches -ln(prior) certainty is allowed
    assert psr_from_mi(-math.log(PRIOR), PRIOR) == pytest.approx(1.0, abs=2e-9)
    assert psr_from_mi(50.0, PRIOR) == 1.0
    for bad in (-0.1, math.nan):
        with pytest.raises(ValueError):
            psr_from_mi(bad, PRIOR)
    with pytest.raises(ValueError):
        psr_from_mi(1.0, 0.0)


def test_mi_from_psr_inverse():
    assert mi_from_psr(0.827, PRIOR) == pytest.approx(2.99428914612, abs=1e-9)
    for v in MI_PRESETS:
        assert mi_from_psr(psr_from_mi(v, PRIOR), PRIOR) == pytest.approx(v, rel=1e-6)
    with pytest.raises(ValueError):
        mi_from_psr(0.001, PRIOR)
    with pytest.raises(ValueError):
        mi_from_psr(1.0, PRIOR)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_psr_monotone(a, b):
    lo, hi = sorted((a, b))
    assert psr_from_mi(lo, PRIOR) <= psr_from_mi(hi, PRIOR) + 1e-9


def test_damp_hand_case():
    cal = calibrate_damp(np.diag([4.0, 1.0]), 1.0)
    assert np.array_equal(cal.sigma, [3.0, 1.5])
    assert cal.trace == 4.5 and cal.kind == "damp"


def test_damp_closed_form_and_constraint(rng):
    A = rng.standard_normal((10, 10))
    cov = A @ A.T
    v = 0.3
    cal = calibrate_damp(cov, v)
    lam = np.linalg.eigvalsh(cov)[::-1]
    assert np.allclose(cal.sigma, np.sqrt(lam) * np.sqrt(lam).sum() / (2 * v), rtol=1e-9)
    # the surrogate MI constraint is met with equality
    assert np.isclose(np.sum(lam / (2 * cal.sigma)), v, rtol=1e-9)
    # noise covariance is diagonal in the eigenbasis of cov
    assert np.allclose(cal.covariance(), cal.covariance().T)
    assert np.allclose(cal.basis.T @ cov @ cal.basis, np.diag(lam), atol=1e-9)


def test_damp_minimises_trace_among_feasible(rng):
    lam = np.array([9.0, 4.0, 1.0, 0.25])
    v = 0.5
    best = calibrate_damp(np.diag(lam), v).trace
    for _ in range(200):
        w = rng.random(4) + 0.05
        # scale any positive allocation until the constraint is tight
        s = w * np.sum(lam / (2 * w)) / v
        assert s.sum() >= best - 1e-9


def test_isotropic_and_ratio():
    lam = np.array([4.0, 1.0])
    iso = calibrate_isotropic_mi(np.diag(lam), 1.0)
    assert np.array_equal(iso.sigma, [2.5, 2.5]) and iso.kind == "isotropic"
    assert trace_ratio(np.diag(lam), 1.0) == pytest.approx(5.0 / 4.5)
    assert trace_ratio(np.eye(5) * 3.0, 0.2) == pytest.approx(1.0)


def test_zero_and_floor():
    with pytest.warns(RuntimeWarning):
        cal = calibrate_damp(np.zeros((3, 3)), 1.0)
    assert cal.degenerate and cal.trace == 0.0
    cal = calibrate_damp(np.diag([4.0, 0.0]), 1.0)
    assert cal.sigma[1] == 0.0
    floored = calibrate_damp(np.diag([4.0, 0.0]), 1.0, floor=1.0)
    assert np.allclose(floored.sigma, [3.0, 1.5])
    with pytest.raises(ValueError):
        calibrate_damp(np.eye(2), 0.0)


def test_samples_and_eig_sources_agree(rng):
    Z = rng.standard_normal((300, 6)) * np.arange(1, 7)
    a = calibrate_damp(Z, 0.1, samples=True)
    b = calibrate_damp(sym_eig(np.cov(Z, rowvar=False, bias=True)), 0.1)
    assert np.allclose(a.sigma, b.sigma, rtol=1e-9)


def test_gaussian_mechanism():
    # sqrt(2 ln(1.25 / 1e-5)) from a 30-digit evaluation
    assert gaussian_mechanism_std(1.0, 1.0, 1e-5) == pytest.approx(4.84480526261, abs=1e-10)
    assert gaussian_mechanism_std(2.0, 0.5, 1e-5) == pytest.approx(4 * 4.84480526261)
    cal = calibrate_dp_gaussian(1.0, 1.0, 1e-5, 4)
    assert np.allclose(cal.sigma, 4.84480526261 ** 2) and cal.kind == "dp"
    with pytest.raises(ValueError):
        gaussian_mechanism_std(1.0, 0.0, 1e-5)
    with pytest.raises(ValueError):
        gaussian_mechanism_std(1.0, 1.0, 1.0)


def test_add_noise_statistics():
    cov = np.array([[4.0, 1.0], [1.0, 1.0]])
    cal = calibrate_damp(cov, 0.5)
    z = LatentCode(np.array([1.0, -2.0]), 7)
    rng = RngStream(3)
    draws = np.array([add_noise(z, cal, rng.child(str(i))).values for i in range(20000)])
    assert np.allclose(draws.mean(axis=0), z.values, atol=0.1)
    assert np.allclose(np.cov(draws, rowvar=False), cal.covariance(), rtol=0.05, atol=0.05)
    out = add_noise(z, cal, RngStream(1))
    assert out.frame_id == 7
    assert np.array_equal(out.values, add_noise(z, cal, RngStream(1)).values)
    with pytest.raises(ValueError):
        add_noise(LatentCode(np.zeros(3)), cal, RngStream(1))


def test_zero_calibration_is_identity():
    z = LatentCode(np.array([0.5, 1.5, -2.0]))
    assert np.array_equal(add_noise(z, NoiseCalibration.zero(3), RngStream(0)).values, z.values)


def test_tracker_warmup_matches_batch_statistics(rng):
    X = rng.standard_normal((60, 4))
    tr = DistributionTracker(4, warmup=100)
    signals = [tr.update(x) for x in X]
    assert not any(signals)
    assert np.allclose(tr.mean, X.mean(axis=0), atol=1e-12)
    assert np.allclose(tr.cov, np.cov(X, rowvar=False, bias=True), atol=1e-12)


def test_tracker_signals_on_warmup_and_drift(rng):
    tr = DistributionTracker(3, warmup=20, tau=0.05)
    signals = [tr.update(x) for x in rng.standard_normal((20, 3))]
    assert signals[-1] and not any(signals[:-1])
    # scale the stream up: drift must be flagged soon
    drift = [tracker_update(tr, 3.0 * x)[1] for x in rng.standard_normal((200, 3))]
    assert any(drift)
    with pytest.raises(ValueError):
        tr.update(np.array([np.inf, 0.0, 0.0]))


def test_stale_calibration_warning(rng):
    tr = DistributionTracker(2, warmup=5)
    for x in rng.standard_normal((5, 2)):
        tr.update(x)
    cal = tr.calibrate(0.1)
    other = calibrate_damp(np.diag([2.0, 1.0]), 0.1)
    z = LatentCode(np.zeros(2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        add_noise(z, cal, RngStream(0), tracker=tr)
    with pytest.warns(StaleCalibrationWarning):
        add_noise(z, other, RngStream(0), tracker=tr)


def test_pcal_roundtrip(tmp_path):
    cal = calibrate_damp(np.diag([4.0, 1.0, 0.5]), 0.1)
    save_calibration(tmp_path / "c.pcal", cal)
    back = load_calibration(tmp_path / "c.pcal")
    assert np.array_equal(back.sigma, cal.sigma) and np.array_equal(back.basis, cal.basis)
    assert back.v == 0.1 and back.source_cov_hash == cal.source_cov_hash
    assert back.content_hash == cal.content_hash != 0
    with pytest.raises(ValueError):
        calibration_from_bytes(calibration_to_bytes(cal)[:-8])


def test_bound_csv(tmp_path):
    rows = bound_rows(np.diag([4.0, 1.0]), vs=(1.0,))
    assert rows[0][:3] == (1.0, pytest.approx(ORACLE_PSR[1]), 4.5)
    write_bound_csv(tmp_path / "b.csv", rows)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == ",".join(BOUND_CSV_HEADER) == "v,t_psr,damp_trace,iso_trace,ratio"
