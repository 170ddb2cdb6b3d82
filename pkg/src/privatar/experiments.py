"""Seeded experiment drivers shared by the CLI, demos and acceptance tests."""

import math
from dataclasses import dataclass

import numpy as np

from .attack import build_reference_bank, empirical_attack_batch, evaluate_psr, train_mlp
from .codec import LatentCode, decode_batch, normalized_loss, PUBLISHED_BASELINE_LOSS
from .corpus import Corpus, dataset_mean
from .frequency import PartitionPlan
from .linalg import covariance, sym_eig
from .pipeline import (OffloadSystem, offload_latents, reconstruction_loss, train_system)
from .privacy import (NoiseCalibration, add_noise, calibrate_damp, calibrate_isotropic_mi,
                      psr_from_mi)
from .rng import RngStream


@dataclass
class AttackResult:
    reports: dict
    system: OffloadSystem
    calibration: NoiseCalibration
    trials: int

    @property
    def combined(self):
        return self.reports["combined"]


def _noisy(Z_rows, cal: NoiseCalibration, rng: RngStream, tag: str) -> np.ndarray:
    out = np.empty_like(Z_rows)
    for i, z in enumerate(Z_rows):
        obs = add_noise(LatentCode(z, i), cal, rng.child(f"{tag}-{i}"))
        out[i] = obs.values
    # observations cross the wire as float32
    return out.astype(np.float32).astype(np.float64)


def run_attack(corpus: Corpus, plan: PartitionPlan, v=None, *, seed: int = 0,
               trials: int = 2000, train_per_class: int = 2, attackers=("empirical", "nn"),
               system: OffloadSystem = None, calibration: NoiseCalibration = None,
               mlp_epochs: int = 10, eig_backend: str = "jacobi") -> AttackResult:
    """Mount the empirical and/or NN attacker against the offloaded path.

    ``v=None`` means no noise. Trials draw frames uniformly (seeded) from
    the corpus, each with a fresh noise draw.
    """
    rng = RngStream(seed, b"attack")
    textures = corpus.textures
    labels = corpus.labels
    classes = int(labels.max()) + 1
    if system is None:
        system = train_system(textures, dataset_mean(corpus), plan)
    Z = offload_latents(system, textures)
    if calibration is None:
        calibration = (NoiseCalibration.zero(Z.shape[1]) if v is None
                       else calibrate_damp(covariance(Z), v, backend=eig_backend))

    idx = rng.child("trial-frames").integers(len(corpus), size=trials)
    observed = _noisy(Z[idx], calibration, rng, "trial")
    truth = labels[idx]
    guesses = {}

    if "empirical" in attackers:
        bank = build_reference_bank(corpus, plan, system.mean, rng.child("bank"))
        planes = decode_batch(system.offload_codec, observed).astype(np.float32)
        guesses["empirical"] = empirical_attack_batch(planes, bank)

    if "nn" in attackers:
        pick_rng = rng.child("nn-train")
        train_idx = []
        for label in range(classes):
            members = np.flatnonzero(labels == label)
            take = min(train_per_class, members.shape[0])
            train_idx.extend(members[pick_rng.permutation(members.shape[0])[:take]])
        train_idx = np.array(train_idx)
        train_obs = _noisy(Z[train_idx], calibration, rng, "nn-train")
        model = train_mlp(train_obs, labels[train_idx], classes=classes, epochs=mlp_epochs,
                          seed=seed)
        guesses["nn"] = model.predict(observed)

    return AttackResult(evaluate_psr(guesses, truth), system, calibration, trials)


SWEEP_HEADER = ("m", "v", "t_psr", "normalized_loss", "damp_trace", "iso_trace", "noise_ratio",
                "e_psr_empirical", "e_psr_nn", "users", "joules")


def sweep_cells(corpus: Corpus, ranking, ms, vs, *, seed: int = 0, trials: int = 500,
                loss_frames: int = 65, prior_success: float = None, perf=None,
                baseline_loss: float = PUBLISHED_BASELINE_LOSS, eig_backend: str = "jacobi"):
    """Yield one sweep row per (m, v); ``v=None`` is the no-noise reference.

    ``perf`` is an optional callable ``m -> (users, joules)``.
    """
    from .frequency import make_plan

    textures = corpus.textures
    mean = dataset_mean(corpus)
    classes = int(corpus.labels.max()) + 1
    prior = prior_success if prior_success is not None else 1.0 / classes
    loss_idx = RngStream(seed, b"sweep-loss").permutation(len(corpus))[:loss_frames]
    for m in ms:
        plan = make_plan(ranking, m, keep_base_local=True)
        system = train_system(textures, mean, plan)
        eig = sym_eig(covariance(offload_latents(system, textures)), backend=eig_backend)
        users, joules = perf(m) if perf else (math.nan, math.nan)
        for v in vs:
            if v is None:
                cal = NoiseCalibration.zero(eig.eigenvalues.shape[0])
                t_psr, damp_tr, iso_tr, ratio = 1.0, 0.0, 0.0, math.nan
            else:
                cal = calibrate_damp(eig, v)
                iso = calibrate_isotropic_mi(eig, v)
                t_psr = psr_from_mi(v, prior)
                damp_tr, iso_tr = cal.trace, iso.trace
                ratio = iso_tr / damp_tr if damp_tr > 0 else 1.0
            noisy = system.with_calibration(cal)
            cell_rng = RngStream(seed, f"sweep-{m}-{v}".encode())
            loss = reconstruction_loss(noisy, textures[loss_idx], cell_rng)
            res = run_attack(corpus, plan, system=system, calibration=cal, seed=seed,
                             trials=trials)
            yield (m, "none" if v is None else v, t_psr, normalized_loss(loss, baseline_loss),
                   damp_tr, iso_tr, ratio, res.reports["empirical"].e_psr,
                   res.reports["nn"].e_psr, users, joules)


def power_law_spectrum(d: int = 256, condition: float = 1e4, jitter: float = 0.1,
                       seed: int = 0) -> np.ndarray:
    """Seeded descending spectrum ``lam_i ~ i^-alpha`` (i = 1..d) with log-normal jitter.

    ``alpha = ln(condition) / ln(d)`` so the clean curve spans exactly
    ``condition``; after jitter the log-spectrum is re-pinned so that
    ``max / min == condition``. A stand-in for a latent covariance whose
    energy decays as a power law over PCA rank.
    """
    if d < 2 or condition < 1:
        raise ValueError("need d >= 2 and condition >= 1")
    rng = RngStream(seed, b"spectrum")
    alpha = np.log(condition) / np.log(d)
    logs = -alpha * np.log(np.arange(1, d + 1)) + jitter * rng.standard_normal(d)
    logs = np.sort(logs)[::-1]
    if logs[0] > logs[-1]:
        logs = (logs - logs[0]) / (logs[-1] - logs[0]) * -np.log(condition)
    return np.exp(logs)
