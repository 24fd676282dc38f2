"""
Adaptation Engine Module
Classifier heads (zero-shot, retrieval, ensemble, linear theory head), losses,
risks, cache fine-tuning and mixture caches
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from embedding_core import ClassId, UnitVector, VectorLike, as_array
from errors import (
    DimensionMismatch,
    EmptySampleSet,
    HeadMismatch,
    NonFiniteGradient,
    ShapeMismatch,
    WeightSumViolation,
)
from retrieval_engine import Cache, ClassAverages

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
LIPSCHITZ_CE = math.sqrt(math.e ** 2 + 1.0)

Predictor = Callable[[np.ndarray], np.ndarray]
MatrixLike = Union[ClassAverages, np.ndarray]


class Head(str, Enum):
    ZOC = "ZOC"
    RET = "RET"
    EN = "EN"
    THEORY = "THEORY"


@dataclass(frozen=True)
class LogitVector:
    scores: np.ndarray
    head: Head
    omega: Optional[float] = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if scores.ndim != 1 or scores.size < 1:
            raise DimensionMismatch(f"logits need shape (C,), got {scores.shape}")
        head = Head(self.head)
        if head in (Head.ZOC, Head.THEORY) and np.any(np.abs(scores) > 1.0 + 1e-12):
            raise ValueError(f"{head.value} logits must lie in [-1, 1]")
        if head is Head.RET:
            # mean of exp(omega (s - 1)) over s in [-1, 1]
            low = math.exp(-2.0 * self.omega) * (1.0 - 1e-12) if self.omega is not None else 0.0
            if np.any(scores < low) or np.any(scores > 1.0 + 1e-12):
                raise ValueError(f"RET logits must lie in [{low:.6g}, 1]")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "head", head)

    @property
    def classes(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class EnsembleWeights:
    alpha: float
    gamma: float
    beta: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value!r}")

    def require_convex(self) -> "EnsembleWeights":
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise WeightSumViolation(f"alpha + beta + gamma = {total!r}, expected 1")
        return self


@dataclass(frozen=True)
class LabeledSample:
    z: UnitVector
    y: ClassId


@dataclass(frozen=True)
class SampleSet:
    """n labeled embeddings stored column-wise: z is (n, d), y holds 1-based ids."""

    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True)
        if z.ndim != 2 or y.shape != (z.shape[0],):
            raise DimensionMismatch(f"sample set needs z (n, d) and y (n,), got {z.shape} and {y.shape}")
        if y.size and y.min() < 1:
            raise ValueError("labels are 1-based class ids")
        z.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.z.shape[0]

    def __getitem__(self, index: int) -> LabeledSample:
        return LabeledSample(UnitVector(self.z[index]), ClassId(int(self.y[index])))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def subset(self, mask: np.ndarray) -> "SampleSet":
        return SampleSet(self.z[mask], self.y[mask])

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "SampleSet":
        if not samples:
            raise EmptySampleSet("no samples")
        return cls(np.stack([s.z.values for s in samples]), np.array([s.y.value for s in samples]))


SamplesLike = Union[SampleSet, Sequence[LabeledSample]]


def as_sample_set(samples: SamplesLike) -> SampleSet:
    if isinstance(samples, SampleSet):
        if len(samples) == 0:
            raise EmptySampleSet("no samples")
        return samples
    return SampleSet.from_samples(list(samples))


def _columns(matrix: MatrixLike) -> np.ndarray:
    if isinstance(matrix, ClassAverages):
        return matrix.columns
    return np.asarray(matrix, dtype=np.float64)


def _check_dim(columns: np.ndarray, z: np.ndarray):
    if z.shape[-1] != columns.shape[0]:
        raise DimensionMismatch(f"embedding dim {z.shape[-1]} vs head dim {columns.shape[0]}")


# Heads

def zoc_scores(text: MatrixLike, z: np.ndarray) -> np.ndarray:
    columns = _columns(text)
    _check_dim(columns, z)
    return np.clip(z @ columns, -1.0, 1.0)


def zoc_logits(text: MatrixLike, z: VectorLike) -> LogitVector:
    """Cosine of z with each class text embedding."""
    return LogitVector(zoc_scores(text, as_array(z)), Head.ZOC)


def exp_scale(s, omega: float):
    """exp(omega * (s - 1)); 1 at s = 1 and strictly increasing in s."""
    return np.exp(omega * (np.asarray(s, dtype=np.float64) - 1.0))


def ret_scores(cache: Cache, z: np.ndarray) -> np.ndarray:
    _check_dim(cache.columns, z)
    sims = np.clip(z @ cache.columns, -1.0, 1.0)
    scaled = exp_scale(sims, cache.omega)
    return scaled.reshape(scaled.shape[:-1] + (cache.classes, cache.shots)).mean(axis=-1)


def ret_logits(cache: Cache, z: VectorLike) -> LogitVector:
    """Per class, the mean exponentially scaled similarity to its K cache columns."""
    return LogitVector(ret_scores(cache, as_array(z)), Head.RET, cache.omega)


def ensemble_logits(weights: EnsembleWeights, zoc: LogitVector, ret: LogitVector) -> LogitVector:
    if zoc.head is not Head.ZOC or ret.head is not Head.RET:
        raise HeadMismatch(f"ensemble takes (ZOC, RET) logits, got ({zoc.head.value}, {ret.head.value})")
    if zoc.classes != ret.classes:
        raise DimensionMismatch(f"class counts differ: {zoc.classes} vs {ret.classes}")
    return LogitVector(weights.alpha * zoc.scores + weights.gamma * ret.scores, Head.EN)


def ensemble_scores(text: MatrixLike, cache: Cache, alpha: float, gamma: float, z: np.ndarray) -> np.ndarray:
    return alpha * zoc_scores(text, z) + gamma * ret_scores(cache, z)


def theory_matrix(weights: EnsembleWeights, text: MatrixLike, one_shot: MatrixLike, kbar: MatrixLike) -> np.ndarray:
    weights.require_convex()
    return weights.alpha * _columns(text) + weights.beta * _columns(one_shot) + weights.gamma * _columns(kbar)


def linear_scores(matrix: MatrixLike, z: np.ndarray) -> np.ndarray:
    columns = _columns(matrix)
    _check_dim(columns, z)
    return z @ columns


def theory_logits(weights: EnsembleWeights, text: MatrixLike, one_shot: MatrixLike,
                  kbar: MatrixLike, z: VectorLike) -> LogitVector:
    """(alpha T + beta S + gamma K-bar)^T z, without exponential scaling."""
    scores = linear_scores(theory_matrix(weights, text, one_shot, kbar), as_array(z))
    # convex combination of unit columns against a unit z
    return LogitVector(np.clip(scores, -1.0, 1.0), Head.THEORY)


def zoc_head(text: MatrixLike) -> Predictor:
    return lambda z: zoc_scores(text, z)


def ret_head(cache: Cache) -> Predictor:
    return lambda z: ret_scores(cache, z)


def ensemble_head(text: MatrixLike, cache: Cache, alpha: float, gamma: float) -> Predictor:
    return lambda z: ensemble_scores(text, cache, alpha, gamma, z)


def linear_head(matrix: MatrixLike) -> Predictor:
    columns = _columns(matrix)
    return lambda z: linear_scores(columns, z)


# Prediction and risks

def predict(logits: Union[LogitVector, np.ndarray]) -> ClassId:
    """Arg-max class; ties resolve to the lowest class id."""
    scores = logits.scores if isinstance(logits, LogitVector) else np.asarray(logits, dtype=np.float64)
    return ClassId(int(np.argmax(scores)) + 1)


def predict_batch(scores: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=-1) + 1


def pairwise_sum(values) -> float:
    """Sum in a fixed pairwise reduction tree, independent of platform BLAS."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return 0.0
    while values.size > 1:
        if values.size % 2:
            values = np.append(values, 0.0)
        values = values[0::2] + values[1::2]
    return float(values[0])


def cross_entropy_batch(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """log(1 + sum_{i != y} exp(v_i - v_y)) per row, overflow-free."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    rows = np.arange(scores.shape[0])
    idx = np.asarray(y, dtype=np.int64).reshape(-1) - 1
    diff = scores - scores[rows, idx][:, None]
    diff[rows, idx] = -np.inf
    top = np.max(diff, axis=1)
    shift = np.maximum(top, 0.0)
    tail = np.sum(np.exp(diff - shift[:, None]), axis=1)
    with np.errstate(divide="ignore"):
        shifted = shift + np.log(np.exp(-shift) + tail)
    return np.where(shift > 0.0, shifted, np.log1p(tail))


def cross_entropy(v, y: Union[ClassId, int]) -> float:
    label = y.value if isinstance(y, ClassId) else int(y)
    return float(cross_entropy_batch(np.asarray(v, dtype=np.float64)[None, :], np.array([label]))[0])


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    return special.softmax(np.atleast_2d(np.asarray(scores, dtype=np.float64)), axis=1)


def cross_entropy_grad_batch(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    probs = softmax_rows(scores)
    probs[np.arange(probs.shape[0]), np.asarray(y).reshape(-1) - 1] -= 1.0
    return probs


def gradient_norms(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row's cross-entropy gradient."""
    return np.linalg.norm(cross_entropy_grad_batch(scores, y), axis=1)


def cross_entropy_grad(v, y: Union[ClassId, int]) -> np.ndarray:
    """Closed-form gradient softmax(v) - e_y."""
    label = y.value if isinstance(y, ClassId) else int(y)
    return cross_entropy_grad_batch(np.asarray(v, dtype=np.float64)[None, :], np.array([label]))[0]


def risk_of_scores(scores: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise EmptySampleSet("risk of an empty sample set")
    return pairwise_sum(cross_entropy_batch(scores, y)) / len(y)


def empirical_risk(matrix: MatrixLike, samples: SamplesLike) -> float:
    """Mean cross-entropy of the linear head Q^T z."""
    data = as_sample_set(samples)
    return risk_of_scores(linear_scores(matrix, data.z), data.y)


def zero_one_risk(head: Predictor, samples: SamplesLike) -> float:
    data = as_sample_set(samples)
    wrong = int(np.count_nonzero(predict_batch(head(data.z)) != data.y))
    return wrong / len(data)


def accuracy(head: Predictor, samples: SamplesLike) -> float:
    return 1.0 - zero_one_risk(head, samples)


def classwise_accuracy(head: Predictor, samples: SamplesLike, classes: int) -> np.ndarray:
    """Accuracy per class (nan for classes absent from the sample set)."""
    data = as_sample_set(samples)
    hits = predict_batch(head(data.z)) == data.y
    result = np.full(classes, np.nan)
    for c in range(1, classes + 1):
        mask = data.y == c
        if np.any(mask):
            result[c - 1] = np.count_nonzero(hits[mask]) / np.count_nonzero(mask)
    return result


# Cache fine-tuning

@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.001
    epochs: int = 20
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    renormalize: bool = False
    keep_best: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"lr must be finite and non-negative, got {self.lr!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError("weight_decay must be finite and non-negative")


def ensemble_loss_and_grad(columns: np.ndarray, text: MatrixLike, train: SampleSet,
                           alpha: float, gamma: float, omega: float,
                           classes: int, shots: int) -> Tuple[float, np.ndarray]:
    """Training cross-entropy of the EN head and its gradient w.r.t. the cache columns."""
    z, y = train.z, train.y
    n = z.shape[0]
    raw = z @ columns
    inside = (raw > -1.0) & (raw < 1.0)
    scaled = exp_scale(np.clip(raw, -1.0, 1.0), omega)
    ret = scaled.reshape(n, classes, shots).mean(axis=2)
    logits = alpha * zoc_scores(text, z) + gamma * ret
    loss = risk_of_scores(logits, y)

    g_logits = cross_entropy_grad_batch(logits, y) / n
    g_raw = np.repeat(g_logits, shots, axis=1) * (gamma / shots) * omega * scaled * inside
    return loss, z.T @ g_raw


def finetune_cache(cache: Cache, train: SamplesLike, text: MatrixLike,
                   weights: EnsembleWeights, hyper: FinetuneConfig = FinetuneConfig()) -> Cache:
    """
    Full-batch AdamW with cosine learning-rate decay on the cache columns.

    alpha, gamma, omega and the text matrix stay fixed. Columns are left
    un-normalized unless hyper.renormalize is set.
    """
    data = as_sample_set(train)
    params = np.array(cache.columns, dtype=np.float64, copy=True)
    m = np.zeros_like(params)
    v = np.zeros_like(params)

    def objective(p):
        return ensemble_loss_and_grad(p, text, data, weights.alpha, weights.gamma,
                                      cache.omega, cache.classes, cache.shots)

    best_params, best_loss, initial_loss = params.copy(), None, None
    for step in range(hyper.epochs):
        loss, grad = objective(params)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteGradient(f"non-finite loss or gradient at step {step}")
        if initial_loss is None:
            initial_loss = loss
        if best_loss is None or loss < best_loss:
            best_params, best_loss = params.copy(), loss

        lr_t = hyper.lr * 0.5 * (1.0 + math.cos(math.pi * step / hyper.epochs))
        t = step + 1
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad * grad
        m_hat = m / (1.0 - hyper.beta1 ** t)
        v_hat = v / (1.0 - hyper.beta2 ** t)
        params = params - lr_t * hyper.weight_decay * params
        params = params - lr_t * m_hat / (np.sqrt(v_hat) + hyper.eps)
        if hyper.renormalize:
            params = params / np.linalg.norm(params, axis=0, keepdims=True)
        if not np.all(np.isfinite(params)):
            raise NonFiniteGradient(f"update at step {step} produced non-finite parameters")

    final_loss, _ = objective(params)
    logger.debug(f"Fine-tuned cache: initial/best/final risk -> {initial_loss:.6g}/{best_loss:.6g}/{final_loss:.6g}")
    if hyper.keep_best and not final_loss < best_loss:
        params = best_params
    return cache.with_columns(params, finetuned=True)


def cache_training_set(cache: Cache) -> SampleSet:
    """The cache's own columns labeled by their class, used as the fine-tuning set."""
    return SampleSet(cache.columns.T, cache.class_of_column())


def mixture_cache(id_cache: Cache, ret_cache: Cache, ratio: Tuple[int, int] = (1, 1)) -> Cache:
    """Per class, the ID columns followed by the retrieved columns (1:1)."""
    if tuple(ratio) != (1, 1):
        raise ValueError(f"only a 1:1 mixture is supported, got {ratio!r}")
    if (id_cache.dim, id_cache.classes, id_cache.shots) != (ret_cache.dim, ret_cache.classes, ret_cache.shots):
        raise ShapeMismatch(
            f"caches differ in shape: (d, C, K) = {(id_cache.dim, id_cache.classes, id_cache.shots)} "
            f"vs {(ret_cache.dim, ret_cache.classes, ret_cache.shots)}"
        )
    if id_cache.omega != ret_cache.omega:
        raise ShapeMismatch(f"caches differ in omega: {id_cache.omega} vs {ret_cache.omega}")
    d, c, k = id_cache.dim, id_cache.classes, id_cache.shots
    blocks = np.concatenate(
        [id_cache.columns.reshape(d, c, k), ret_cache.columns.reshape(d, c, k)], axis=2
    )
    return Cache(blocks.reshape(d, c * 2 * k), c, 2 * k, id_cache.omega,
                 id_cache.finetuned or ret_cache.finetuned)


# Ensemble weight selection

def weights_from_ratio(ratio: float) -> Tuple[float, float]:
    """gamma:alpha = ratio with alpha + gamma = 1."""
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio!r}")
    return 1.0 / (1.0 + ratio), ratio / (1.0 + ratio)


@dataclass(frozen=True)
class TunedEnsemble:
    alpha: float
    gamma: float
    omega: float
    accuracy: float
    ce_risk: float


def tune_ensemble(text: MatrixLike, cache: Cache, validation: SamplesLike,
                  ratios: Sequence[float], omegas: Sequence[float]) -> TunedEnsemble:
    """Grid point with the best validation accuracy (then lowest risk, then grid order)."""
    data = as_sample_set(validation)
    best: Optional[TunedEnsemble] = None
    for omega in omegas:
        scaled_cache = replace(cache, omega=float(omega))
        for ratio in ratios:
            alpha, gamma = weights_from_ratio(ratio)
            scores = ensemble_scores(text, scaled_cache, alpha, gamma, data.z)
            acc = float(np.count_nonzero(predict_batch(scores) == data.y)) / len(data)
            risk = risk_of_scores(scores, data.y)
            if best is None or acc > best.accuracy or (acc == best.accuracy and risk < best.ce_risk):
                best = TunedEnsemble(alpha, gamma, float(omega), acc, risk)
    if best is None:
        raise ValueError("empty weight grid")
    return best
