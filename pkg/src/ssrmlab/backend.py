"""Hashed n-gram logistic preference model.

The model scores a formatted template with ``p_a = sigmoid(w . phi(T) + b)``,
the probability that response A is preferred.  ``phi`` counts hashed n-grams
of whitespace tokens.  Each n-gram is keyed by the template segment it occurs
in (context, response A, response B), so the same token contributes to
different weights depending on which response contains it.  Without that the
features would be symmetric in the two responses and carry no preference
signal.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import math
import os
import re
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ssrmlab.prefdata import (
    CONTEXT_MARKER,
    RESPONSE_A_MARKER,
    RESPONSE_B_MARKER,
    Label,
    LabeledExample,
    PreferenceTriplet,
    format_template,
)

SNAPSHOT_FORMAT = "ssrmlab.snapshot"
SNAPSHOT_VERSION = 1

_MARKERS = (CONTEXT_MARKER, RESPONSE_A_MARKER, RESPONSE_B_MARKER)
_MARKER_RE = re.compile("(" + "|".join(re.escape(m) for m in _MARKERS) + ")")


class SnapshotError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at optimizer step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class FeaturizerSpec:
    hash_dimension: int = 2**18
    ngram_orders: tuple[int, ...] = (1, 2)
    hash_seed: int = 0

    def __post_init__(self):
        orders = tuple(sorted(set(int(o) for o in self.ngram_orders)))
        object.__setattr__(self, "ngram_orders", orders)
        if self.hash_dimension < 2:
            raise ValueError("hash_dimension must be >= 2")
        if not orders or orders[0] < 1:
            raise ValueError("ngram_orders must be nonempty with every order >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {"hash_dimension": self.hash_dimension,
                "ngram_orders": list(self.ngram_orders),
                "hash_seed": self.hash_seed}


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse bucket counts; ``indices`` sorted and unique."""

    indices: np.ndarray
    counts: np.ndarray

    def as_dict(self) -> dict[int, int]:
        return {int(i): int(c) for i, c in zip(self.indices, self.counts)}

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class LRSchedule(str, enum.Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 128
    epochs: int = 1
    lr_schedule: LRSchedule = LRSchedule.CONSTANT
    warmup_steps: int = 0
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", LRSchedule(self.lr_schedule))
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.warmup_steps < 0 or self.l2 < 0:
            raise ValueError("warmup_steps and l2 must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lr_schedule"] = self.lr_schedule.value
        return d


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    weights: np.ndarray
    bias: float
    featurizer: FeaturizerSpec
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.featurizer.hash_dimension,):
            raise ValueError(f"weights shape {w.shape} does not match hash_dimension "
                             f"{self.featurizer.hash_dimension}")
        if not (np.all(np.isfinite(w)) and math.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, featurizer: FeaturizerSpec | None = None, **provenance) -> "ModelSnapshot":
        featurizer = featurizer or FeaturizerSpec()
        return cls(np.zeros(featurizer.hash_dimension), 0.0, featurizer, dict(provenance))

    @property
    def is_zero(self) -> bool:
        return self.bias == 0.0 and not np.any(self.weights)


class PredictionDistribution(NamedTuple):
    p_a: float
    p_b: float


class Gradient(NamedTuple):
    weights: np.ndarray
    bias: float


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=1 << 20)
def _bucket(key: str, hash_seed: int, dim: int) -> int:
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8,
                             salt=hash_seed.to_bytes(8, "little", signed=True)).digest()
    return int.from_bytes(digest, "little") % dim


def _ngram_keys(spec: FeaturizerSpec, template_text: str) -> list[str]:
    keys: list[str] = []
    segment = ""
    for piece in _MARKER_RE.split(template_text):
        if piece in _MARKERS:
            segment = piece
            keys.append(piece)
            continue
        tokens = piece.split()
        for n in spec.ngram_orders:
            for i in range(len(tokens) - n + 1):
                keys.append(segment + "\x1f" + " ".join(tokens[i:i + n]))
    return keys


def _bucket_counts(spec: FeaturizerSpec, template_text: str) -> tuple[np.ndarray, np.ndarray]:
    buckets = [_bucket(k, spec.hash_seed, spec.hash_dimension)
               for k in _ngram_keys(spec, template_text)]
    idx, counts = np.unique(np.asarray(buckets, dtype=np.int64), return_counts=True)
    return idx, counts.astype(np.float64)


def featurize(spec: FeaturizerSpec, template_text: str) -> FeatureVector:
    """Hash segment-tagged n-grams of ``template_text`` into bucket counts.

    Marker strings are themselves counted as unigrams, so an empty template
    body still yields three marker features.
    """
    idx, counts = _bucket_counts(spec, template_text)
    return FeatureVector(idx, counts.astype(np.int64))


class FeatureCache:
    """Memoizes featurized templates for one featurizer spec.

    Training loops revisit the same triplets every iteration; caching by
    template text avoids re-hashing them.
    """

    def __init__(self, spec: FeaturizerSpec):
        self.spec = spec
        self._rows: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def row(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self._rows.get(text)
        if hit is None:
            hit = self._rows[text] = _bucket_counts(self.spec, text)
        return hit

    def __len__(self) -> int:
        return len(self._rows)


def feature_matrix(spec: FeaturizerSpec, triplets: Iterable[PreferenceTriplet],
                   cache: FeatureCache | None = None) -> sp.csr_matrix:
    """Stack featurized templates into a CSR matrix, one row per triplet."""
    if cache is not None and cache.spec != spec:
        raise ValueError("feature cache was built for a different featurizer")
    row_of = cache.row if cache is not None else functools.partial(_bucket_counts, spec)
    indptr = [0]
    indices: list[np.ndarray] = []
    data: list[np.ndarray] = []
    for t in triplets:
        idx, counts = row_of(format_template(t))
        indices.append(idx)
        data.append(counts)
        indptr.append(indptr[-1] + len(idx))
    n_rows = len(indptr) - 1
    if n_rows:
        ind = np.concatenate(indices)
        dat = np.concatenate(data)
    else:
        ind = np.zeros(0, dtype=np.int64)
        dat = np.zeros(0)
    return sp.csr_matrix((dat, ind, np.asarray(indptr)), shape=(n_rows, spec.hash_dimension))


def _label_targets(batch: Sequence[LabeledExample]) -> np.ndarray:
    return np.fromiter((ex.label is Label.A for ex in batch), dtype=np.float64, count=len(batch))


# ---------------------------------------------------------------------------
# Prediction, loss and gradient
# ---------------------------------------------------------------------------

def _check_dimension(model: ModelSnapshot, x: sp.spmatrix) -> None:
    if x.shape[1] != model.weights.shape[0]:
        raise ValueError(f"feature dimension {x.shape[1]} != model dimension {model.weights.shape[0]}")


def logits(model: ModelSnapshot, x: sp.spmatrix) -> np.ndarray:
    _check_dimension(model, x)
    return x @ model.weights + model.bias


def predict_proba_a(model: ModelSnapshot, triplets: Sequence[PreferenceTriplet],
                    cache: FeatureCache | None = None) -> np.ndarray:
    """Vectorized P(A preferred) for many triplets."""
    return expit(logits(model, feature_matrix(model.featurizer, triplets, cache)))


def predict(model: ModelSnapshot, t: PreferenceTriplet) -> PredictionDistribution:
    p_a = float(predict_proba_a(model, [t])[0])
    return PredictionDistribution(p_a, 1.0 - p_a)


def _loss_from_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # -log p(y) = softplus(-z) for A, softplus(z) for B
    signed = np.where(y == 1.0, z, -z)
    return np.logaddexp(0.0, -signed)


def srm_loss_matrix(model: ModelSnapshot, x: sp.spmatrix, y: np.ndarray, l2: float = 0.0) -> float:
    if x.shape[0] == 0:
        raise ValueError("srm_loss needs a nonempty batch")
    loss = float(np.mean(_loss_from_logits(logits(model, x), y)))
    if l2:
        loss += 0.5 * l2 * float(model.weights @ model.weights)
    return loss


def srm_loss(model: ModelSnapshot, batch: Sequence[LabeledExample], l2: float = 0.0,
             cache: FeatureCache | None = None) -> float:
    """Mean negative log-probability of the stored labels, plus ``l2/2 * |w|^2``."""
    x = feature_matrix(model.featurizer, [ex.triplet for ex in batch], cache)
    return srm_loss_matrix(model, x, _label_targets(batch), l2)


def loss_gradient_matrix(model: ModelSnapshot, x: sp.spmatrix, y: np.ndarray,
                         l2: float = 0.0) -> Gradient:
    if x.shape[0] == 0:
        raise ValueError("loss_gradient needs a nonempty batch")
    residual = expit(logits(model, x)) - y
    n = x.shape[0]
    grad_w = np.asarray(x.T @ residual).ravel() / n
    if l2:
        grad_w = grad_w + l2 * model.weights
    return Gradient(grad_w, float(residual.sum() / n))


def loss_gradient(model: ModelSnapshot, batch: Sequence[LabeledExample], l2: float = 0.0,
                  cache: FeatureCache | None = None) -> Gradient:
    """Exact gradient of :func:`srm_loss` with respect to weights and bias."""
    x = feature_matrix(model.featurizer, [ex.triplet for ex in batch], cache)
    return loss_gradient_matrix(model, x, _label_targets(batch), l2)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def learning_rate_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for zero-based ``step`` out of ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule is LRSchedule.CONSTANT:
        return cfg.learning_rate
    decay_steps = max(total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / decay_steps
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def fit_matrix(initial: ModelSnapshot, x: sp.csr_matrix, y: np.ndarray, cfg: TrainConfig,
               provenance: dict[str, Any] | None = None) -> ModelSnapshot:
    """Mini-batch SGD over pre-featurized rows.  ``initial`` is not modified."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("fit needs nonempty training data")
    _check_dimension(initial, x)
    x = x.tocsr()
    w = np.array(initial.weights, dtype=np.float64)
    b = initial.bias
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            xb = x[rows]
            yb = y[rows]
            z = xb @ w + b
            batch_loss = float(np.mean(_loss_from_logits(z, yb)))
            if not math.isfinite(batch_loss) or not np.all(np.isfinite(z)):
                raise TrainingDivergedError(step, batch_loss)
            lr = learning_rate_at(cfg, step, total_steps)
            residual = (expit(z) - yb) / len(rows)
            if cfg.l2:
                w *= 1.0 - lr * cfg.l2
            # row-major accumulation keeps the summation order fixed
            row_ids = np.repeat(np.arange(len(rows)), np.diff(xb.indptr))
            np.add.at(w, xb.indices, -lr * xb.data * residual[row_ids])
            b -= lr * float(residual.sum())
            step += 1
    if not (np.all(np.isfinite(w)) and math.isfinite(b)):
        raise TrainingDivergedError(step, float("nan"))
    prov = dict(initial.provenance)
    prov.update(provenance or {})
    prov["train"] = cfg.to_dict()
    prov["train_examples"] = n
    return ModelSnapshot(w, b, initial.featurizer, prov)


def fit(initial: ModelSnapshot, data: Sequence[LabeledExample], cfg: TrainConfig,
        cache: FeatureCache | None = None, provenance: dict[str, Any] | None = None) -> ModelSnapshot:
    """Train ``cfg.epochs`` passes of shuffled mini-batch SGD starting from ``initial``."""
    if not data:
        raise ValueError("fit needs nonempty training data")
    x = feature_matrix(initial.featurizer, [ex.triplet for ex in data], cache)
    return fit_matrix(initial, x, _label_targets(data), cfg, provenance)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def config_hash(config: Any) -> str:
    """SHA-256 over the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_snapshot(model: ModelSnapshot, path: str | Path) -> None:
    """Write ``model`` as an ``.npz`` archive; the write is atomic."""
    path = Path(path)
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "featurizer": model.featurizer.to_dict(),
        "bias": model.bias.hex(),
        "provenance": model.provenance,
    }
    nz = np.flatnonzero(model.weights)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez_compressed(f, header=np.array(json.dumps(header, sort_keys=True)),
                                indices=nz.astype(np.int64), values=model.weights[nz])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_snapshot(path: str | Path) -> ModelSnapshot:
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            indices = archive["indices"]
            values = archive["values"]
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e}") from e
    if header.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError(f"{path} is not a model snapshot")
    if header.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {header.get('version')} unsupported "
                            f"(expected {SNAPSHOT_VERSION})")
    spec = FeaturizerSpec(**{**header["featurizer"],
                             "ngram_orders": tuple(header["featurizer"]["ngram_orders"])})
    w = np.zeros(spec.hash_dimension)
    w[indices] = values
    return ModelSnapshot(w, float.fromhex(header["bias"]), spec, header["provenance"])


def with_provenance(model: ModelSnapshot, **fields) -> ModelSnapshot:
    return replace(model, provenance={**model.provenance, **fields})
