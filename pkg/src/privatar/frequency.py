"""Block-DCT frequency decomposition of textures and the local/offload split.

A texture is an ``(H, W, 3)`` float32 array. Subtracting the dataset mean
texture and taking an orthonormal 2-D DCT-II of every ``B x B`` block gives
``B**2`` frequency planes; plane ``k = u*B + v`` collects coefficient
``(u, v)`` of every block, so each plane has shape ``(H/B, W/B, 3)``.
"""

import struct
from dataclasses import dataclass

import numpy as np

from ._container import FormatError, Reader, check_header, header

SUPPORTED_BLOCKS = (2, 4, 8)
DEFAULT_BLOCK = 4


def dct_matrix(B: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C[u, i]``; ``C @ C.T == I``."""
    i = np.arange(B)
    u = i[:, None]
    C = np.cos(np.pi * (2 * i[None, :] + 1) * u / (2 * B))
    scale = np.full((B, 1), np.sqrt(2.0 / B))
    scale[0] = np.sqrt(1.0 / B)
    return scale * C


def zigzag_order(B: int) -> list:
    """Component ids in JPEG zig-zag order (display only; storage is row-major)."""
    cells = sorted(((u, v) for u in range(B) for v in range(B)),
                   key=lambda uv: (uv[0] + uv[1], uv[1] if (uv[0] + uv[1]) % 2 == 0 else uv[0]))
    return [u * B + v for u, v in cells]


def check_texture(tex, name: str = "texture") -> np.ndarray:
    tex = np.asarray(tex)
    if tex.ndim != 3 or tex.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {tex.shape}")
    return tex


@dataclass
class ComponentSet:
    """Frequency planes for the component ids in ``ids``.

    A full set holds all ``B**2`` ids in order; a partial set (one side of a
    partition) holds a sorted subset.
    """

    B: int
    ids: tuple
    planes: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.ids = tuple(int(k) for k in self.ids)
        expected = (len(self.ids), self.height // self.B, self.width // self.B, 3)
        if self.planes.shape != expected:
            raise ValueError(f"planes shape {self.planes.shape} != expected {expected}")
        if list(self.ids) != sorted(set(self.ids)):
            raise ValueError("component ids must be sorted and unique")
        if self.ids and (self.ids[0] < 0 or self.ids[-1] >= self.B ** 2):
            raise ValueError("component id out of range")

    @property
    def is_full(self) -> bool:
        return self.ids == tuple(range(self.B ** 2))

    @property
    def plane_shape(self) -> tuple:
        return (self.height // self.B, self.width // self.B, 3)

    def plane(self, k: int) -> np.ndarray:
        return self.planes[self.ids.index(k)]

    def select(self, ids) -> "ComponentSet":
        ids = tuple(sorted(ids))
        index = [self.ids.index(k) for k in ids]
        return ComponentSet(self.B, ids, self.planes[index], self.height, self.width)

    def flatten(self) -> np.ndarray:
        """Flattened plane stack (id-ordered), the input vector of a path codec."""
        return self.planes.reshape(-1)

    @classmethod
    def from_flat(cls, vec, B, ids, height, width) -> "ComponentSet":
        ids = tuple(ids)
        shape = (len(ids), height // B, width // B, 3)
        planes = np.asarray(vec, dtype=np.float32).reshape(shape)
        return cls(B, ids, planes, height, width)


def block_dct(tex, mean, B: int = DEFAULT_BLOCK) -> ComponentSet:
    """Decompose ``tex - mean`` into ``B**2`` orthonormal block-DCT planes."""
    tex = check_texture(tex)
    mean = check_texture(mean, "mean")
    if tex.shape != mean.shape:
        raise ValueError(f"texture {tex.shape} and mean {mean.shape} differ in shape")
    if B not in SUPPORTED_BLOCKS:
        raise ValueError(f"block size must be one of {SUPPORTED_BLOCKS}")
    H, W, _ = tex.shape
    if H % B or W % B:
        raise ValueError(f"texture {H}x{W} not divisible by block size {B}")
    C = dct_matrix(B)
    X = (tex.astype(np.float64) - mean.astype(np.float64)).reshape(H // B, B, W // B, B, 3)
    coeff = np.einsum("ui,aibjc,vj->uvabc", C, X, C, optimize=True)
    planes = coeff.reshape(B * B, H // B, W // B, 3).astype(np.float32)
    return ComponentSet(B, tuple(range(B * B)), planes, H, W)


def block_idct(comps: ComponentSet, mean) -> np.ndarray:
    """Inverse of :func:`block_dct`; ``comps`` must be a full set."""
    if not comps.is_full:
        raise ValueError("block_idct needs all B**2 components; merge partial sets first")
    mean = check_texture(mean, "mean")
    B, H, W = comps.B, comps.height, comps.width
    if mean.shape != (H, W, 3):
        raise ValueError(f"mean shape {mean.shape} does not match components {H}x{W}")
    C = dct_matrix(B)
    coeff = comps.planes.astype(np.float64).reshape(B, B, H // B, W // B, 3)
    X = np.einsum("ui,uvabc,vj->aibjc", C, coeff, C, optimize=True)
    return (X.reshape(H, W, 3) + mean.astype(np.float64)).astype(np.float32)


@dataclass
class EnergyRanking:
    statistic: np.ndarray
    order: tuple
    corpus_size: int
    mode: str = "variance"

    @property
    def B(self) -> int:
        return int(round(np.sqrt(len(self.statistic))))

    def share(self) -> np.ndarray:
        total = self.statistic.sum()
        return self.statistic / total if total > 0 else np.zeros_like(self.statistic)


def energy_rank(corpus, mode: str = "variance") -> EnergyRanking:
    """Rank components by how much they vary across a corpus.

    ``mode="variance"`` uses the mean over the corpus of
    ``||plane_k - mean_plane_k||^2``; ``mode="raw"`` uses the mean of
    ``||plane_k||^2``. The ordering is ascending, ties broken by lower id.
    """
    corpus = list(corpus)
    if len(corpus) < 2:
        raise ValueError("energy_rank needs at least 2 corpus items")
    first = corpus[0]
    for cs in corpus:
        if not cs.is_full or cs.B != first.B or cs.planes.shape != first.planes.shape:
            raise ValueError("corpus component sets must share block size and dimensions")
    stack = np.stack([cs.planes for cs in corpus]).astype(np.float64)
    if mode == "variance":
        stack = stack - stack.mean(axis=0)
    elif mode != "raw":
        raise ValueError(f"unknown energy mode {mode!r}")
    stat = np.mean(np.sum(stack.reshape(stack.shape[0], stack.shape[1], -1) ** 2, axis=2), axis=0)
    order = tuple(int(k) for k in np.argsort(stat, kind="stable"))
    return EnergyRanking(stat, order, len(corpus), mode)


@dataclass(frozen=True)
class PartitionPlan:
    B: int
    offloaded_ids: tuple
    local_ids: tuple
    keep_base_local: bool = True

    def __post_init__(self):
        object.__setattr__(self, "offloaded_ids", tuple(sorted(int(k) for k in self.offloaded_ids)))
        object.__setattr__(self, "local_ids", tuple(sorted(int(k) for k in self.local_ids)))
        n = self.B * self.B
        both = set(self.offloaded_ids) | set(self.local_ids)
        if both != set(range(n)) or len(self.offloaded_ids) + len(self.local_ids) != n:
            raise ValueError("offloaded and local ids must partition 0..B^2-1")
        if self.keep_base_local and 0 in self.offloaded_ids:
            raise ValueError("base component 0 must stay local")
        if self.offloaded_ids and self.local_ids and not 2 <= self.m <= n - 2:
            raise ValueError(f"m={self.m} outside [2, {n - 2}] with both paths active")

    @property
    def m(self) -> int:
        return len(self.offloaded_ids)

    @classmethod
    def full_offload(cls, B: int) -> "PartitionPlan":
        return cls(B, tuple(range(B * B)), (), keep_base_local=False)

    def to_dict(self) -> dict:
        return {"B": self.B, "offloaded_ids": list(self.offloaded_ids),
                "local_ids": list(self.local_ids), "keep_base_local": self.keep_base_local}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(int(d["B"]), tuple(d["offloaded_ids"]), tuple(d["local_ids"]),
                   bool(d.get("keep_base_local", True)))


def make_plan(ranking: EnergyRanking, m: int, keep_base_local: bool = True) -> PartitionPlan:
    """Offload the ``m`` lowest-statistic components (never id 0 if kept local)."""
    B = ranking.B
    n = B * B
    if not 2 <= m <= n - 2:
        raise ValueError(f"m={m} outside [2, {n - 2}]")
    candidates = [k for k in ranking.order if not (keep_base_local and k == 0)]
    if m > len(candidates):
        raise ValueError("not enough offloadable components")
    offloaded = sorted(candidates[:m])
    local = sorted(set(range(n)) - set(offloaded))
    return PartitionPlan(B, tuple(offloaded), tuple(local), keep_base_local)


def split(comps: ComponentSet, plan: PartitionPlan):
    """Return ``(local, offloaded)`` partial sets for a full component set."""
    if comps.B != plan.B:
        raise ValueError("plan and components disagree on block size")
    return comps.select(plan.local_ids), comps.select(plan.offloaded_ids)


def merge(local: ComponentSet, offloaded: ComponentSet, plan: PartitionPlan) -> ComponentSet:
    """Recombine the two paths into a full component set, plane by plane."""
    if local.ids != plan.local_ids or offloaded.ids != plan.offloaded_ids:
        raise ValueError("partial component sets do not cover the plan exactly")
    if (local.B, local.height, local.width) != (offloaded.B, offloaded.height, offloaded.width):
        raise ValueError("partial component sets disagree on geometry")
    n = plan.B * plan.B
    planes = np.empty((n,) + local.plane_shape, dtype=np.float32)
    if local.ids:
        planes[list(local.ids)] = local.planes
    if offloaded.ids:
        planes[list(offloaded.ids)] = offloaded.planes
    return ComponentSet(plan.B, tuple(range(n)), planes, local.height, local.width)


# -- PTEX container ---------------------------------------------------------

PTEX_MAGIC = b"PTEX"


def texture_to_bytes(tex) -> bytes:
    tex = check_texture(tex)
    H, W, C = tex.shape
    return header(PTEX_MAGIC) + struct.pack("<III", H, W, C) + np.asarray(tex, dtype="<f4").tobytes()


def texture_from_bytes(buf: bytes) -> np.ndarray:
    r = Reader(buf, check_header(buf, PTEX_MAGIC))
    H, W, C = r.unpack("<III")
    if C != 3:
        raise FormatError(f"PTEX with {C} channels; only 3 supported")
    data = r.array("<f4", H * W * C)
    r.done()
    return data.reshape(H, W, C).astype(np.float32)


def save_texture(path, tex):
    with open(path, "wb") as fh:
        fh.write(texture_to_bytes(tex))


def load_texture(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return texture_from_bytes(fh.read())
