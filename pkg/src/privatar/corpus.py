"""Seeded synthetic expression corpus and texture file I/O.

Each class ("expression") gets a mean texture built from 8x8 block-DCT
coefficients of magnitude ``amplitude * (1 + u + v) ** -alpha`` with
random signs; frames are the class mean plus clipped Gaussian jitter.
A larger ``alpha`` concentrates energy in the base (DC) component.
"""

import configparser
import csv
import os
import re
from dataclasses import asdict, dataclass, fields

import numpy as np

from .frequency import ComponentSet, block_idct, load_texture, save_texture
from .rng import RngStream

GENERATOR_BLOCK = 8


@dataclass(frozen=True)
class CorpusSpec:
    height: int = 64
    width: int = 64
    classes: int = 65
    frames_per_class: int = 8
    alpha: float = 2.0
    jitter_sigma: float = 0.02
    amplitude: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.height % GENERATOR_BLOCK or self.width % GENERATOR_BLOCK:
            raise ValueError(f"corpus dims must be divisible by {GENERATOR_BLOCK}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("corpus dims must be positive")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.frames_per_class < 1:
            raise ValueError("need at least 1 frame per class")
        if self.alpha < 0 or self.jitter_sigma < 0:
            raise ValueError("alpha and jitter_sigma must be non-negative")

    @classmethod
    def from_file(cls, path) -> "CorpusSpec":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        section = cp["corpus"] if cp.has_section("corpus") else cp[cp.default_section]
        kwargs = {}
        for f in fields(cls):
            if f.name in section:
                kwargs[f.name] = f.type(section[f.name]) if callable(f.type) else section[f.name]
        return cls(**kwargs)


@dataclass(frozen=True)
class LabeledFrame:
    texture: np.ndarray
    label: int
    frame_id: int


@dataclass
class Corpus:
    spec: CorpusSpec
    frames: list

    def __len__(self):
        return len(self.frames)

    @property
    def textures(self) -> np.ndarray:
        return np.stack([f.texture for f in self.frames])

    @property
    def labels(self) -> np.ndarray:
        return np.array([f.label for f in self.frames])

    def by_label(self) -> dict:
        out = {}
        for f in self.frames:
            out.setdefault(f.label, []).append(f)
        return out


def _class_mean(spec: CorpusSpec, rng: RngStream) -> np.ndarray:
    B = GENERATOR_BLOCK
    u = np.arange(B)
    envelope = spec.amplitude * (1.0 + u[:, None] + u[None, :]) ** (-spec.alpha)
    hb, wb = spec.height // B, spec.width // B
    signs = np.where(rng.random((B * B, hb, wb, 3)) < 0.5, -1.0, 1.0)
    planes = (envelope.reshape(-1)[:, None, None, None] * signs).astype(np.float32)
    comps = ComponentSet(B, tuple(range(B * B)), planes, spec.height, spec.width)
    base = np.full((spec.height, spec.width, 3), 0.5, dtype=np.float32)
    return np.clip(block_idct(comps, base), 0.0, 1.0)


def generate(spec: CorpusSpec = CorpusSpec()) -> Corpus:
    """Build the corpus; identical specs give byte-identical textures."""
    root = RngStream(spec.seed, b"corpus")
    frames = []
    fid = 0
    for label in range(spec.classes):
        mean = _class_mean(spec, root.child(f"class-{label}"))
        jitter_rng = root.child(f"jitter-{label}")
        for _ in range(spec.frames_per_class):
            tex = mean
            if spec.jitter_sigma > 0:
                noise = jitter_rng.normal(0.0, spec.jitter_sigma, mean.shape)
                tex = np.clip(mean + noise, 0.0, 1.0)
            frames.append(LabeledFrame(np.asarray(tex, dtype=np.float32), label, fid))
            fid += 1
    return Corpus(spec, frames)


def dataset_mean(frames) -> np.ndarray:
    """Per-pixel mean texture of a corpus (or any sequence of textures/frames)."""
    items = frames.frames if isinstance(frames, Corpus) else list(frames)
    if not items:
        raise ValueError("dataset_mean of an empty corpus")
    stack = np.stack([f.texture if isinstance(f, LabeledFrame) else np.asarray(f) for f in items])
    return stack.astype(np.float64).mean(axis=0).astype(np.float32)


# -- manifest: PTEX files plus a CSV index ---------------------------------

INDEX_HEADER = ("frame_id", "label", "path")


def write_corpus(corpus: Corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for f in corpus.frames:
        name = f"frame_{f.frame_id:06d}.ptex"
        save_texture(os.path.join(out_dir, name), f.texture)
        rows.append((f.frame_id, f.label, name))
    with open(os.path.join(out_dir, "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_HEADER)
        w.writerows(rows)
    spec = configparser.ConfigParser()
    spec["corpus"] = {k: str(v) for k, v in asdict(corpus.spec).items()}
    with open(os.path.join(out_dir, "spec.ini"), "w") as fh:
        spec.write(fh)


def read_corpus(in_dir) -> Corpus:
    spec_path = os.path.join(in_dir, "spec.ini")
    spec = CorpusSpec.from_file(spec_path) if os.path.exists(spec_path) else None
    frames = []
    with open(os.path.join(in_dir, "index.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            tex = load_texture(os.path.join(in_dir, row["path"]))
            frames.append(LabeledFrame(tex, int(row["label"]), int(row["frame_id"])))
    if spec is None:
        h, w, _ = frames[0].texture.shape
        spec = CorpusSpec(height=h, width=w, classes=max(f.label for f in frames) + 1)
    return Corpus(spec, frames)


# -- binary PPM (P6) --------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _ppm_header(data: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PPM_TOKEN.match(data, pos)
        if not m:
            raise ValueError("malformed PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM header") from exc
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise ValueError("malformed PPM header")
    return width, height, maxval, pos + 1


def ppm_to_texture(data: bytes) -> np.ndarray:
    width, height, maxval, offset = _ppm_header(data)
    if not 0 < maxval <= 255:
        raise ValueError(f"unsupported PPM maxval {maxval}; only 8-bit files are read")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=offset) \
        if len(data) - offset >= width * height * 3 else None
    if raster is None:
        raise ValueError("truncated PPM raster")
    return (raster.reshape(height, width, 3).astype(np.float32) / np.float32(maxval))


def texture_to_ppm(tex) -> bytes:
    tex = np.asarray(tex)
    if tex.ndim != 3 or tex.shape[2] != 3:
        raise ValueError("texture must be (H, W, 3)")
    h, w, _ = tex.shape
    raster = np.round(np.clip(tex.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + raster.tobytes()


def import_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return ppm_to_texture(fh.read())


def export_ppm(tex, path):
    with open(path, "wb") as fh:
        fh.write(texture_to_ppm(tex))
