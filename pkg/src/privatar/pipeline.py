"""End-to-end reconstruction: decompose, encode both paths, noise, decode, merge.

The offloaded latent crosses the trust boundary as float32, exactly as it
does on the wire, so the in-process pipeline and the networked simulator
produce bit-identical textures.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .codec import (Codec, decode, encode, encode_batch, load_codec, mse, save_codec,
                    train_codec)
from .frequency import (ComponentSet, PartitionPlan, block_dct, block_idct, load_texture, merge,
                        save_texture, split)
from .linalg import covariance, sym_eig
from .privacy import NoiseCalibration, add_noise, calibrate_damp
from .rng import RngStream


@dataclass
class OffloadSystem:
    """Everything the trusted client needs to reconstruct a frame."""

    plan: PartitionPlan
    mean: np.ndarray
    local_codec: Codec
    offload_codec: Codec
    calibration: NoiseCalibration = None

    @property
    def height(self) -> int:
        return self.mean.shape[0]

    @property
    def width(self) -> int:
        return self.mean.shape[1]

    def with_calibration(self, cal: NoiseCalibration) -> "OffloadSystem":
        return OffloadSystem(self.plan, self.mean, self.local_codec, self.offload_codec, cal)


def path_vectors(textures, mean, plan: PartitionPlan):
    """Flattened (local, offloaded) component stacks for each texture."""
    local, off = [], []
    for tex in textures:
        loc, offl = split(block_dct(tex, mean, plan.B), plan)
        local.append(loc.flatten())
        off.append(offl.flatten())
    return np.array(local, dtype=np.float64), np.array(off, dtype=np.float64)


def train_system(textures, mean, plan: PartitionPlan, latent_dim: int = 256,
                 backend: str = "lapack") -> OffloadSystem:
    """Train one PCA codec per path; latent dim is capped by the path input size."""
    local_x, off_x = path_vectors(textures, mean, plan)
    local_codec = None
    if plan.local_ids:
        local_codec = train_codec(local_x, min(latent_dim, local_x.shape[1]), "local", backend)
    off_codec = train_codec(off_x, min(latent_dim, off_x.shape[1]), "offloaded", backend)
    return OffloadSystem(plan, mean, local_codec, off_codec)


def offload_latents(system: OffloadSystem, textures) -> np.ndarray:
    """Clean offloaded latent codes, shape (N, d)."""
    _, off_x = path_vectors(textures, system.mean, system.plan)
    return encode_batch(system.offload_codec, off_x)


def profile_calibration(system: OffloadSystem, textures, v: float,
                        backend: str = "jacobi") -> NoiseCalibration:
    """DAMP calibration from the offloaded latent distribution of ``textures``."""
    Z = offload_latents(system, textures)
    return calibrate_damp(covariance(Z), v, backend=backend)


def host_decode(codec: Codec, latent_f32: np.ndarray, plan: PartitionPlan,
                height: int, width: int) -> np.ndarray:
    """Untrusted-host step: float32 latent in, float32 offloaded planes out."""
    vec = decode(codec, np.asarray(latent_f32, dtype=np.float32).astype(np.float64))
    shape = (len(plan.offloaded_ids), height // plan.B, width // plan.B, 3)
    return vec.astype(np.float32).reshape(shape)


def frame_stream(rng: RngStream, frame_id: int) -> RngStream:
    return rng.child(f"frame-{frame_id}")


def client_encode(system: OffloadSystem, tex, frame_id: int, rng: RngStream):
    """Trusted side, before offloading.

    Returns ``(local ComponentSet, local latent, noisy offloaded latent as
    float32)``. The local latent never leaves the client.
    """
    comps = block_dct(tex, system.mean, system.plan.B)
    local, off = split(comps, system.plan)
    z_local = encode(system.local_codec, local.flatten(), frame_id) if local.ids else None
    z_off = encode(system.offload_codec, off.flatten(), frame_id)
    cal = system.calibration or NoiseCalibration.zero(z_off.values.shape[0])
    observed = add_noise(z_off, cal, frame_stream(rng, frame_id))
    return local, z_local, observed.values.astype(np.float32)


def client_finish(system: OffloadSystem, z_local, returned_planes) -> np.ndarray:
    """Decode the local path, merge with returned planes, inverse transform."""
    plan = system.plan
    shape = (len(plan.local_ids), system.height // plan.B, system.width // plan.B, 3)
    if plan.local_ids:
        local_planes = decode(system.local_codec, z_local).astype(np.float32).reshape(shape)
    else:
        local_planes = np.zeros(shape, dtype=np.float32)
    local = ComponentSet(plan.B, plan.local_ids, local_planes, system.height, system.width)
    off = ComponentSet(plan.B, plan.offloaded_ids, np.asarray(returned_planes, dtype=np.float32),
                       system.height, system.width)
    return block_idct(merge(local, off, plan), system.mean)


def reconstruct(system: OffloadSystem, tex, frame_id: int, rng: RngStream,
                transport=None) -> np.ndarray:
    """Reconstruct one frame; ``transport(latent_f32, frame_id)`` returns planes.

    With no transport the offloaded decoder runs in-process.
    """
    _, z_local, observed = client_encode(system, tex, frame_id, rng)
    if transport is None:
        planes = host_decode(system.offload_codec, observed, system.plan,
                             system.height, system.width)
    else:
        planes = transport(observed, frame_id)
    return client_finish(system, z_local, planes)


def reconstruction_loss(system: OffloadSystem, textures, rng: RngStream) -> float:
    """Mean per-element MSE of reconstructed vs. ground-truth textures."""
    errs = [mse(reconstruct(system, tex, i, rng), tex) for i, tex in enumerate(textures)]
    return float(np.mean(errs))


def eig_of_latents(system: OffloadSystem, textures, backend: str = "jacobi"):
    return sym_eig(covariance(offload_latents(system, textures)), backend=backend)


# -- on-disk system: plan.json + mean.ptex + one PCDC per path --------------

PLAN_FILE = "plan.json"


def save_system(out_dir, system: OffloadSystem):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, PLAN_FILE), "w") as fh:
        json.dump(system.plan.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_texture(os.path.join(out_dir, "mean.ptex"), system.mean)
    if system.local_codec is not None:
        save_codec(os.path.join(out_dir, "local.pcdc"), system.local_codec)
    save_codec(os.path.join(out_dir, "offloaded.pcdc"), system.offload_codec)


def load_system(plan_path) -> OffloadSystem:
    """Load a system from its plan file; codecs and mean sit next to it."""
    if os.path.isdir(plan_path):
        plan_path = os.path.join(plan_path, PLAN_FILE)
    base = os.path.dirname(os.path.abspath(plan_path))
    with open(plan_path) as fh:
        plan = PartitionPlan.from_dict(json.load(fh))
    local = None
    if plan.local_ids:
        local = load_codec(os.path.join(base, "local.pcdc"))
    return OffloadSystem(plan, load_texture(os.path.join(base, "mean.ptex")), local,
                         load_codec(os.path.join(base, "offloaded.pcdc")))
