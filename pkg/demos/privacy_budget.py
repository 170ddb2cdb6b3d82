"""Map MI budgets to attacker success bounds, then compare noise shapes.

Run:  python3 demos/privacy_budget.py
"""
import numpy as np

from privatar import calibrate_damp, calibrate_isotropic_mi, mi_from_psr, psr_from_mi
from privatar.experiments import power_law_spectrum

PRIOR = 1 / 65

print("MI budget v -> posterior success-rate bound (65 equally likely classes)")
for v in (4.0, 3.0, 1.0, 0.1, 0.01):
    print(f"  v={v:<5}  PSR <= {psr_from_mi(v, PRIOR):.4f}")
print(f"  inverse: PSR 0.827 needs v = {mi_from_psr(0.827, PRIOR):.4f}")

# an anisotropic latent spectrum: a few strong directions and a long tail
lam = power_law_spectrum(d=256, condition=1e4, seed=0)
cov = np.diag(lam)
print("\nnoise power (trace of the noise covariance) at equal MI budget")
for v in (1.0, 0.1):
    damp = calibrate_damp(cov, v)
    iso = calibrate_isotropic_mi(cov, v)
    print(f"  v={v:<4}  isotropic {iso.trace:12.4g}   DAMP {damp.trace:12.4g}   "
          f"ratio {iso.trace / damp.trace:.2f}x")
