"""Frequency-partitioned avatar texture offloading with distribution-aware noise.

Submodules: ``linalg`` and ``rng`` (numerical core), ``frequency`` (block
DCT and partition plans), ``codec`` (PCA latent codecs), ``privacy`` (MI
bounds and noise calibration), ``attack`` (adversaries and e-PSR),
``perfmodel`` (throughput/energy model), ``pipeline`` and ``net`` (in-process
and networked reconstruction), ``corpus`` (synthetic data), ``cli``.
"""

from .corpus import CorpusSpec, dataset_mean, generate
from .frequency import PartitionPlan, block_dct, block_idct, energy_rank, make_plan, merge, split
from .linalg import covariance, sym_eig
from .pipeline import OffloadSystem, reconstruct, train_system
from .privacy import (add_noise, calibrate_damp, calibrate_isotropic_mi, mi_from_psr,
                      psr_from_mi)
from .rng import RngStream

__version__ = "0.1.0"
