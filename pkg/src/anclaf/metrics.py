"""Affect objectives and evaluation metrics.

Plain-float metrics (rmse / pearson_cor / ccc / icc) use population
moments and are what reports carry.  The *_loss functions build the same
quantities on the autodiff graph for training.  Correlation-style
formulas use the standard product of centered series in the numerator;
the concordance variant scales by 2 and penalizes mean differences in
the denominator, and the intraclass variant drops that penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import DegenerateSeriesError, ShapeError
from .tensor import Tensor

PROB_CLAMP = 1e-7
VAR_FLOOR = 1e-12
N_BINS = 10


@dataclass(frozen=True)
class AffectLabel:
    """Valence/arousal pair; ground truth lies in [-1, 1], predictions may not."""

    valence: float
    arousal: float

    def __post_init__(self):
        if not (np.isfinite(self.valence) and np.isfinite(self.arousal)):
            raise ShapeError(f"non-finite affect label ({self.valence}, {self.arousal})")

    def as_array(self) -> np.ndarray:
        return np.array([self.valence, self.arousal])


def _as_series(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ShapeError("empty series")
    return arr


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    p, t = _as_series(pred), _as_series(truth)
    if p.size != t.size:
        raise ShapeError(f"series lengths differ: {p.size} vs {t.size}")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def pearson_cor(pred, truth) -> float:
    p, t = _pair(pred, truth)
    sp, st = p.std(), t.std()
    if sp == 0.0 or st == 0.0:
        raise DegenerateSeriesError("pearson_cor undefined for a zero-variance series")
    cov = np.mean((p - p.mean()) * (t - t.mean()))
    return float(cov / (sp * st))


def ccc(pred, truth) -> float:
    p, t = _pair(pred, truth)
    cov = np.mean((p - p.mean()) * (t - t.mean()))
    denom = p.var() + t.var() + (p.mean() - t.mean()) ** 2
    if denom == 0.0:
        raise DegenerateSeriesError("ccc undefined: both series constant with equal means")
    return float(2.0 * cov / denom)


def icc(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = p.var() + t.var()
    if denom == 0.0:
        raise DegenerateSeriesError("icc undefined: both series have zero variance")
    cov = np.mean((p - p.mean()) * (t - t.mean()))
    return float(2.0 * cov / denom)


# -- class balance -------------------------------------------------------------


def bin_index(x: np.ndarray) -> np.ndarray:
    """Index of the 10 equal-width bins over [-1, 1]; +1.0 folds into the top bin."""
    i = np.floor((np.asarray(x) + 1.0) / 0.2).astype(int)
    return np.clip(i, 0, N_BINS - 1)


@dataclass
class ClassWeights:
    """Per-dimension bin counts and normalized weights (rows: valence, arousal)."""

    counts: np.ndarray
    weights: np.ndarray
    bin_count: int = N_BINS

    def __post_init__(self):
        if self.counts.shape != (2, self.bin_count) or self.weights.shape != (2, self.bin_count):
            raise ShapeError("class weight arrays must be [2, bin_count]")


def class_weights(labels, literal_form: bool = False) -> ClassWeights:
    """Inverse-frequency weights per V/A bin, normalized to sum 1 per dimension.

    ``literal_form`` uses raw frequency shares f_i/N instead, which
    overweights frequent classes; kept for ablation.
    """
    arr = _labels_to_array(labels)
    if arr.size == 0:
        raise ShapeError("empty label set")
    counts = np.zeros((2, N_BINS), dtype=int)
    weights = np.zeros((2, N_BINS))
    for d in range(2):
        idx = bin_index(arr[:, d])
        counts[d] = np.bincount(idx, minlength=N_BINS)
        occupied = counts[d] > 0
        if literal_form:
            weights[d] = counts[d] / counts[d].sum()
        else:
            inv = np.where(occupied, 1.0 / np.maximum(counts[d], 1), 0.0)
            weights[d] = inv / inv.sum()
    return ClassWeights(counts=counts, weights=weights)


def _labels_to_array(labels) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        return labels.reshape(-1, 2)
    return np.array([[l.valence, l.arousal] for l in labels])


# -- differentiable losses ------------------------------------------------------


def _mean_centered(x: Tensor) -> Tensor:
    return T.sub(x, T.tmean(x))


def cor_loss_term(pred: Tensor, truth: Tensor) -> Tensor:
    cov = T.tmean(T.mul(_mean_centered(pred), _mean_centered(truth)))
    return T.div(cov, T.mul(T.sqrt(T.tvar(pred)), T.sqrt(T.tvar(truth))))


def ccc_loss_term(pred: Tensor, truth: Tensor) -> Tensor:
    cov = T.tmean(T.mul(_mean_centered(pred), _mean_centered(truth)))
    mean_gap = T.sub(T.tmean(pred), T.tmean(truth))
    denom = T.add(T.add(T.tvar(pred), T.tvar(truth)), T.mul(mean_gap, mean_gap))
    return T.div(T.scale(cov, 2.0), denom)


def icc_loss_term(pred: Tensor, truth: Tensor) -> Tensor:
    cov = T.tmean(T.mul(_mean_centered(pred), _mean_centered(truth)))
    return T.div(T.scale(cov, 2.0), T.add(T.tvar(pred), T.tvar(truth)))


def affect_loss(pred_v: Tensor, pred_a: Tensor, truths: np.ndarray,
                weights: ClassWeights) -> Tensor:
    """Composite affect objective, averaged over the two dimensions.

    Per dimension: class-weighted RMSE over truth bins, plus batch-level
    (1-COR) + (1-CCC) + (1-ICC).  Correlation terms are skipped (zero
    contribution, zero gradient) when either series has near-zero
    variance, so training never divides by ~0 mid-batch.
    """
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    n = truths.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    if pred_v.size != n or pred_a.size != n:
        raise ShapeError(f"prediction/truth lengths differ: {pred_v.size}/{pred_a.size} vs {n}")
    total: Optional[Tensor] = None
    for d, pred in ((0, pred_v), (1, pred_a)):
        tr = truths[:, d]
        bins = bin_index(tr)
        dim_loss: Optional[Tensor] = None
        for b in np.unique(bins):
            w = weights.weights[d, b]
            if w == 0.0:
                continue
            idx = np.nonzero(bins == b)[0]
            diff = T.sub(T.take(pred, idx), Tensor(tr[idx]))
            term = T.scale(T.sqrt(T.tmean(T.mul(diff, diff))), w)
            dim_loss = term if dim_loss is None else T.add(dim_loss, term)
        if tr.var() > VAR_FLOOR and pred.array.var() > VAR_FLOOR:
            truth_t = Tensor(tr)
            for metric in (cor_loss_term, ccc_loss_term, icc_loss_term):
                term = T.sub(Tensor([1.0]), metric(pred, truth_t))
                dim_loss = term if dim_loss is None else T.add(dim_loss, term)
        if dim_loss is None:
            dim_loss = Tensor([0.0])
        total = dim_loss if total is None else T.add(total, dim_loss)
    return T.scale(total, 0.5)


def adversarial_losses(d_real: Tensor, d_fake: Tensor,
                       saturating: bool = False) -> Tuple[Tensor, Tensor]:
    """Discriminator and generator objectives from real/fake probabilities.

    loss_D = -mean(log d_real) - mean(log(1 - d_fake)); loss_G defaults to
    the non-saturating -mean(log d_fake), with the literal minimax form
    behind ``saturating``.  Probabilities are clamped 1e-7 away from {0,1}.
    """
    for name, t in (("d_real", d_real), ("d_fake", d_fake)):
        vals = t.array
        if np.any(vals < 0.0) or np.any(vals > 1.0):
            raise ShapeError(f"{name} must contain probabilities in [0, 1]")
    pr = T.clip(d_real, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pf = T.clip(d_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss_d = T.sub(T.scale(T.tmean(T.log(pr)), -1.0),
                   T.tmean(T.log(T.sub(Tensor([1.0]), pf))))
    if saturating:
        loss_g = T.tmean(T.log(T.sub(Tensor([1.0]), pf)))
    else:
        loss_g = T.scale(T.tmean(T.log(pf)), -1.0)
    return loss_d, loss_g


def quadrant_cross_entropy(logits: Tensor, true_quadrant: int) -> Tensor:
    """-log softmax(logits)[true_quadrant], computed via stable log-sum-exp."""
    if logits.size != 4 or logits.ndim != 1:
        raise ShapeError(f"expected 4 quadrant logits, got shape {logits.shape}")
    if true_quadrant not in (0, 1, 2, 3):
        raise ShapeError(f"quadrant index {true_quadrant} out of range")
    m = float(logits.array.max())
    shifted = T.sub(logits, m)
    lse = T.log(T.tsum(T.exp(shifted)))
    return T.sub(lse, T.narrow(shifted, 0, true_quadrant, 1))


def quadrant_cross_entropy_batch(logits: Tensor, quadrants: np.ndarray) -> Tensor:
    """Mean cross-entropy over a [4, B] logit matrix against integer labels."""
    if logits.ndim != 2 or logits.shape[0] != 4:
        raise ShapeError(f"expected [4, B] logits, got {logits.shape}")
    q = np.asarray(quadrants, dtype=int)
    b = logits.shape[1]
    if q.size != b:
        raise ShapeError("label count does not match batch width")
    m = float(logits.array.max())
    shifted = T.sub(logits, m)
    e = T.exp(shifted)
    ones = Tensor(np.ones((1, 4)))
    lse = T.log(T.matmul(ones, e))  # [1, B]
    flat = T.reshape(shifted, (4 * b,))
    picked = T.take(flat, q * b + np.arange(b))
    return T.tmean(T.sub(T.reshape(lse, (b,)), picked))


# -- reports --------------------------------------------------------------------

METRIC_KEYS = ("rmse", "cor", "ccc", "icc")


@dataclass
class MetricReport:
    """Per-dimension and averaged metrics for one model on one fold."""

    model: str
    fold: Union[int, str]
    sequence_length: Optional[int] = None
    rmse_val: float = 0.0
    rmse_aro: float = 0.0
    cor_val: float = 0.0
    cor_aro: float = 0.0
    ccc_val: float = 0.0
    ccc_aro: float = 0.0
    icc_val: float = 0.0
    icc_aro: float = 0.0

    def value(self, key: str, dim: str) -> float:
        return getattr(self, f"{key}_{dim}")

    def avg(self, key: str) -> float:
        return (self.value(key, "val") + self.value(key, "aro")) / 2.0

    @property
    def ccc_avg(self) -> float:
        return self.avg("ccc")

    def to_dict(self) -> dict:
        out = {"model": self.model, "fold": self.fold,
               "sequence_length": self.sequence_length}
        for key in METRIC_KEYS:
            out[key] = {"val": self.value(key, "val"),
                        "aro": self.value(key, "aro"),
                        "avg": self.avg(key)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        kwargs = {"model": d["model"], "fold": d["fold"],
                  "sequence_length": d.get("sequence_length")}
        for key in METRIC_KEYS:
            kwargs[f"{key}_val"] = d[key]["val"]
            kwargs[f"{key}_aro"] = d[key]["aro"]
        return cls(**kwargs)


def _safe_metric(fn, pred, truth) -> float:
    try:
        return fn(pred, truth)
    except DegenerateSeriesError:
        return 0.0


def compute_report(pred: np.ndarray, truth: np.ndarray, model: str,
                   fold: Union[int, str], sequence_length: Optional[int] = None
                   ) -> MetricReport:
    """Metrics from [N, 2] prediction/truth arrays; degenerate series score 0."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction/truth shapes differ: {pred.shape} vs {truth.shape}")
    vals = {}
    for key, fn in zip(METRIC_KEYS, (rmse, pearson_cor, ccc, icc)):
        for d, dim in ((0, "val"), (1, "aro")):
            if key == "rmse":
                vals[f"{key}_{dim}"] = rmse(pred[:, d], truth[:, d])
            else:
                vals[f"{key}_{dim}"] = _safe_metric(fn, pred[:, d], truth[:, d])
    return MetricReport(model=model, fold=fold, sequence_length=sequence_length, **vals)


def aggregate_report(per_fold: Sequence[MetricReport]) -> MetricReport:
    """Mean across folds per cell; single fold comes back unchanged."""
    reports = list(per_fold)
    if not reports:
        raise ShapeError("no reports to aggregate")
    names = {r.model for r in reports}
    if len(names) != 1:
        raise ShapeError(f"inconsistent model names in aggregation: {sorted(names)}")
    if len(reports) == 1:
        return reports[0]
    kwargs = {}
    for key in METRIC_KEYS:
        for dim in ("val", "aro"):
            kwargs[f"{key}_{dim}"] = float(np.mean([r.value(key, dim) for r in reports]))
    return MetricReport(model=reports[0].model, fold="aggregate",
                        sequence_length=reports[0].sequence_length, **kwargs)
