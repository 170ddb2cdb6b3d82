"""Expression-identification adversaries and the empirical PSR harness.

Two attackers observe the offloaded path:

* the empirical attacker compares decoded (noisy) offloaded planes with one
  reference frame per expression and guesses the nearest;
* the NN attacker is a small fully connected classifier applied directly to
  the noisy offloaded latent code.
"""

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._container import Reader, check_header, header
from .frequency import ComponentSet, PartitionPlan, block_dct
from .rng import RngStream

DEFAULT_CLASSES = 65
WILSON_Z = 1.959963984540054


# -- empirical attacker -----------------------------------------------------

@dataclass
class ReferenceBank:
    plan: PartitionPlan
    labels: tuple
    references: np.ndarray  # (K, m, h, w, 3)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("exactly one reference per label")
        if self.references.shape[:2] != (len(self.labels), self.plan.m):
            raise ValueError("reference stack does not match labels/plan")

    @property
    def flat(self) -> np.ndarray:
        return self.references.reshape(len(self.labels), -1).astype(np.float64)


def build_reference_bank(corpus, plan: PartitionPlan, mean, rng: RngStream) -> ReferenceBank:
    """Pick one seeded-random frame per label and keep its offloaded planes."""
    frames = corpus.frames if hasattr(corpus, "frames") else list(corpus)
    groups = {}
    for f in frames:
        groups.setdefault(f.label, []).append(f)
    if not groups:
        raise ValueError("empty corpus")
    labels = tuple(sorted(groups))
    refs = []
    for label in labels:
        members = groups[label]
        if not members:
            raise ValueError(f"label {label} has no frames")
        pick = members[int(rng.integers(len(members)))] if len(members) > 1 else members[0]
        comps = block_dct(pick.texture, mean, plan.B)
        refs.append(comps.select(plan.offloaded_ids).planes)
    return ReferenceBank(plan, labels, np.stack(refs))


def _as_flat_queries(queries, bank: ReferenceBank) -> np.ndarray:
    """Accept a ComponentSet, one plane stack, a batch of stacks, or flat rows."""
    if isinstance(queries, ComponentSet):
        if queries.ids != bank.plan.offloaded_ids:
            raise ValueError("query components do not match the bank's offloaded ids")
        queries = queries.planes
    q = np.asarray(queries, dtype=np.float64)
    ref_shape = bank.references.shape[1:]
    width = int(np.prod(ref_shape))
    if q.shape == ref_shape:
        return q.reshape(1, width)
    if q.shape[1:] == ref_shape or (q.ndim == 2 and q.shape[1] == width):
        return q.reshape(q.shape[0], width)
    raise ValueError(f"query shape {q.shape} does not match reference planes {ref_shape}")


def reference_distances(queries, bank: ReferenceBank) -> np.ndarray:
    """Squared L2 distance of each query to each reference, shape (N, K)."""
    q = _as_flat_queries(queries, bank)
    refs = bank.flat
    d = (np.sum(q * q, axis=1)[:, None] - 2.0 * q @ refs.T + np.sum(refs * refs, axis=1)[None, :])
    return np.maximum(d, 0.0)


def empirical_attack(query, bank: ReferenceBank) -> int:
    """Guess the label whose reference is nearest; ties go to the lower label."""
    q = _as_flat_queries(query, bank)
    if q.shape[0] != 1:
        raise ValueError("empirical_attack takes a single query; use empirical_attack_batch")
    d = np.sum((bank.flat - q) ** 2, axis=1)
    return int(bank.labels[int(np.argmin(d))])


def empirical_attack_batch(queries, bank: ReferenceBank) -> np.ndarray:
    d = reference_distances(queries, bank)
    return np.asarray(bank.labels)[np.argmin(d, axis=1)]


# -- NN attacker ------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


@dataclass
class MlpAttacker:
    """Fully connected classifier; ReLU on hidden layers, softmax output.

    Inputs are standardised with the training-set mean/scale before the
    first layer.
    """

    dims: tuple
    weights: list
    biases: list
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None
    hyperparams: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match dims")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ValueError(f"layer {i} shape mismatch")
        if self.input_mean is None:
            self.input_mean = np.zeros(self.dims[0])
        if self.input_scale is None:
            self.input_scale = np.ones(self.dims[0])

    @classmethod
    def init(cls, dims, rng: RngStream) -> "MlpAttacker":
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(dims), weights, biases)

    @property
    def classes(self) -> int:
        return self.dims[-1]

    def _prep(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dims[0]:
            raise ValueError(f"input dim {X.shape[1]} != attacker input dim {self.dims[0]}")
        return (X - self.input_mean) / self.input_scale

    def forward(self, X, cache: bool = False):
        a = self._prep(X)
        acts = [a]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = np.maximum(z, 0.0) if i < len(self.weights) - 1 else z
            acts.append(a)
        probs = softmax(a)
        return (probs, acts) if cache else probs

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.forward(X), axis=1)

    def loss(self, X, y) -> float:
        return cross_entropy(self.forward(X), np.asarray(y))

    def gradients(self, X, y):
        """Mean cross-entropy gradients ``(dW list, db list)`` by backprop."""
        y = np.asarray(y)
        probs, acts = self.forward(X, cache=True)
        n = y.shape[0]
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        dWs, dbs = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            dWs[i] = acts[i].T @ delta
            dbs[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return dWs, dbs

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def train_mlp(X, y, classes: int = DEFAULT_CLASSES, hidden=(128,), lr: float = 0.01,
              epochs: int = 10, batch: int = 16, seed: int = 0,
              standardize: bool = True) -> MlpAttacker:
    """Minibatch SGD on softmax cross-entropy; deterministic under ``seed``.

    ``history`` records the full-training-set loss before training and
    after every epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("X must be (N, d) with one label per row")
    if y.min() < 0 or y.max() >= classes:
        raise ValueError("label out of range")
    rng = RngStream(seed, b"mlp")
    model = MlpAttacker.init((X.shape[1],) + tuple(hidden) + (classes,), rng.child("init"))
    if standardize:
        model.input_mean = X.mean(axis=0)
        scale = X.std(axis=0)
        model.input_scale = np.where(scale > 0, scale, 1.0)
    model.hyperparams = {"lr": lr, "epochs": epochs, "batch": batch, "seed": seed,
                         "hidden": list(hidden), "classes": classes}
    model.history = [model.loss(X, y)]
    order_rng = rng.child("order")
    for _ in range(epochs):
        order = order_rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch):
            idx = order[start:start + batch]
            dWs, dbs = model.gradients(X[idx], y[idx])
            for W, b, dW, db in zip(model.weights, model.biases, dWs, dbs):
                W -= lr * dW
                b -= lr * db
        model.history.append(model.loss(X, y))
    return model


def grad_check(model: MlpAttacker, x, label: int, h: float = 1e-5, floor: float = 1e-7) -> float:
    """Max relative error of backprop vs central differences over all parameters.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    exactly-zero gradients (dead ReLUs) from dividing by zero.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.array([label])
    dWs, dbs = model.gradients(X, y)
    analytic = [g for pair in zip(dWs, dbs) for g in pair]
    worst = 0.0
    for param, grad in zip(model.params(), analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.shape[0]):
            old = flat[j]
            flat[j] = old + h
            up = model.loss(X, y)
            flat[j] = old - h
            down = model.loss(X, y)
            flat[j] = old
            num = (up - down) / (2.0 * h)
            err = abs(num - gflat[j]) / max(abs(num), abs(gflat[j]), floor)
            worst = max(worst, err)
    return worst


# -- PSR evaluation ---------------------------------------------------------

def wilson_interval(correct: int, trials: int, z: float = WILSON_Z):
    if trials <= 0:
        raise ValueError("need at least one trial")
    p = correct / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass(frozen=True)
class AttackReport:
    attacker: str
    trials: int
    correct: int

    @property
    def e_psr(self) -> float:
        return self.correct / self.trials

    @property
    def ci(self):
        return wilson_interval(self.correct, self.trials)

    def contains(self, rate: float) -> bool:
        lo, hi = self.ci
        return lo <= rate <= hi

    def row(self) -> dict:
        lo, hi = self.ci
        return {"attacker": self.attacker, "trials": self.trials, "correct": self.correct,
                "e_psr": self.e_psr, "ci_lo": lo, "ci_hi": hi}


def evaluate_psr(guesses: dict, labels) -> dict:
    """Score each attacker's guesses; ``"combined"`` is the best attacker.

    Args:
        guesses: attacker name -> sequence of predicted labels.
        labels: true labels, same length as each guess sequence.
    """
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("empty observation stream")
    reports = {}
    for name, g in guesses.items():
        g = np.asarray(g)
        if g.shape != labels.shape:
            raise ValueError(f"{name}: {g.shape[0]} guesses for {labels.shape[0]} labels")
        reports[name] = AttackReport(name, int(labels.shape[0]), int(np.sum(g == labels)))
    best = max(reports.values(), key=lambda r: (r.correct, -list(reports).index(r.attacker)))
    reports["combined"] = AttackReport("combined", best.trials, best.correct)
    return reports


REPORT_CSV_HEADER = ("attacker", "trials", "correct", "e_psr", "ci_lo", "ci_hi")


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_CSV_HEADER)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_reports_json(path, reports, meta=None):
    with open(path, "w") as fh:
        json.dump({"meta": meta or {}, "reports": [r.row() for r in reports]}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")


# -- PMLP container ---------------------------------------------------------

PMLP_MAGIC = b"PMLP"


def mlp_to_bytes(model: MlpAttacker) -> bytes:
    out = [header(PMLP_MAGIC), struct.pack("<I", len(model.dims)),
           struct.pack(f"<{len(model.dims)}I", *model.dims),
           model.input_mean.astype("<f8").tobytes(), model.input_scale.astype("<f8").tobytes()]
    for W, b in zip(model.weights, model.biases):
        out.append(W.astype("<f8").tobytes())
        out.append(b.astype("<f8").tobytes())
    return b"".join(out)


def mlp_from_bytes(buf: bytes) -> MlpAttacker:
    r = Reader(buf, check_header(buf, PMLP_MAGIC))
    n = r.unpack("<I")
    dims = r.unpack(f"<{n}I")
    dims = (dims,) if isinstance(dims, int) else tuple(dims)
    mean = r.array("<f8", dims[0]).astype(np.float64)
    scale = r.array("<f8", dims[0]).astype(np.float64)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(r.array("<f8", a * b).astype(np.float64).reshape(a, b))
        biases.append(r.array("<f8", b).astype(np.float64))
    r.done()
    return MlpAttacker(dims, weights, biases, mean, scale)
