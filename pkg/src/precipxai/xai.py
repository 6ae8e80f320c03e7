"""Post-hoc explanations: permutation importance, temporal occlusion, Grad-CAM, counterfactuals.

All error-type quantities are reported in mm/day after inverting the log1p
target transform. ``model`` is anything with ``predict(X) -> log1p predictions``;
Grad-CAM additionally needs a :class:`~precipxai.nn.ConvLstmModel`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import SampleSet, expm1_inverse
from .training import rmse


def _mm(model, X) -> np.ndarray:
    return expm1_inverse(model.predict(X))


@dataclass
class FeatureImportanceReport:
    features: list[str]
    mean_delta_rmse: list[float]
    std_delta_rmse: list[float]
    baseline_rmse: float
    repeats: int

    def ranking(self) -> list[str]:
        order = np.argsort(-np.asarray(self.mean_delta_rmse), kind="stable")
        return [self.features[i] for i in order]


@dataclass
class OcclusionReport:
    labels: list[str]
    delta_rmse: list[float]
    baseline_rmse: float

    def argmax_step(self) -> int:
        return int(np.argmax(self.delta_rmse))


@dataclass
class GradCamMap:
    attention: list[list[float]]
    selection: dict
    all_zero: bool = False

    def array(self) -> np.ndarray:
        return np.asarray(self.attention, dtype=np.float64)


@dataclass
class CounterfactualReport:
    features: list[str]
    norms: list[float]
    delta: float
    normalization: str = "l2 / sqrt(N)"

    def ranking(self) -> list[str]:
        order = np.argsort(-np.asarray(self.norms), kind="stable")
        return [self.features[i] for i in order]


@dataclass
class ExplanationReport:
    importance: FeatureImportanceReport | None = None
    occlusion: OcclusionReport | None = None
    gradcam: GradCamMap | None = None
    counterfactual: CounterfactualReport | None = None

    def to_dict(self) -> dict:
        return {k: (asdict(v) if v is not None else None) for k, v in vars(self).items()}


def _feature_names(samples: SampleSet, names: Sequence[str] | None) -> list[str]:
    F = samples.X.shape[-1]
    names = list(names) if names is not None else [f"f{i}" for i in range(F)]
    if len(names) != F:
        raise ValueError(f"{len(names)} feature names for {F} channels")
    return names


def permutation_importance(model, samples: SampleSet, repeats: int = 5, seed: int = 0,
                           feature_names: Sequence[str] | None = None,
                           shuffle: Callable[[np.random.Generator, int], np.ndarray] | None = None,
                           ) -> FeatureImportanceReport:
    """Shuffle one channel's whole T x H x W block across samples; report RMSE increase."""
    n = len(samples)
    if n < 2:
        raise ValueError("permutation importance needs at least 2 samples")
    names = _feature_names(samples, feature_names)
    shuffle = shuffle or (lambda rng, k: rng.permutation(k))
    y_mm = expm1_inverse(samples.y)
    base = rmse(y_mm, _mm(model, samples.X))
    rng = np.random.default_rng(seed)
    means, stds = [], []
    X = samples.X.copy()
    for f in range(len(names)):
        original = samples.X[..., f]
        deltas = []
        for _ in range(repeats):
            X[..., f] = original[shuffle(rng, n)]
            deltas.append(rmse(y_mm, _mm(model, X)) - base)
        X[..., f] = original
        means.append(float(np.mean(deltas)))
        stds.append(float(np.std(deltas)))
    return FeatureImportanceReport(names, means, stds, base, repeats)


def training_mean_slice(train_X: np.ndarray) -> np.ndarray:
    """Mean H x W x F slice over training samples and time steps."""
    return train_X.mean(axis=(0, 1))


def temporal_occlusion(model, samples: SampleSet, fill: np.ndarray) -> OcclusionReport:
    """Replace time step t of every sample with ``fill`` (H x W x F) in turn."""
    if len(samples) == 0:
        raise ValueError("temporal occlusion needs samples")
    T = samples.X.shape[1]
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), samples.X.shape[2:])
    y_mm = expm1_inverse(samples.y)
    base = rmse(y_mm, _mm(model, samples.X))
    deltas = []
    X = samples.X.copy()
    for t in range(T):
        X[:, t] = fill
        deltas.append(rmse(y_mm, _mm(model, X)) - base)
        X[:, t] = samples.X[:, t]
    return OcclusionReport([f"time_{t}" for t in range(T)], deltas, base)


def select_top_predicted(model, samples: SampleSet, decile: float = 0.9) -> np.ndarray:
    """Indices of samples whose predicted rainfall is in the top (1 - decile) fraction."""
    pred = model.predict(samples.X)
    k = max(1, int(math.ceil((1.0 - decile) * len(pred))))
    return np.sort(np.argsort(-pred, kind="stable")[:k])


def grad_cam(model, samples: SampleSet, select: np.ndarray | None = None,
             decile: float = 0.9) -> GradCamMap:
    """Grad-CAM over the final ConvLSTM hidden state, averaged over selected samples."""
    idx = select_top_predicted(model, samples, decile) if select is None else np.asarray(select)
    if len(idx) == 0:
        raise ValueError("Grad-CAM selection is empty")
    X = samples.X[idx]
    with ad.Tape() as tape:
        yhat, trace = model.forward(X, training=False)
        # samples are independent, so d(sum)/dA is the per-sample gradient
        tape.backward(ad.sum(yhat))
    A = trace.hidden.data                  # N,H,W,Ch
    grads = trace.hidden.grad
    weights = grads.mean(axis=(1, 2))      # N,Ch
    raw = np.maximum(np.einsum("nhwk,nk->nhw", A, weights), 0.0).mean(axis=0)
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= 0.0:
        norm, all_zero = np.zeros_like(raw), True
    elif hi == lo:
        norm, all_zero = np.ones_like(raw), False
    else:
        norm, all_zero = (raw - lo) / (hi - lo), False
    selection = {"rule": "top predicted rainfall" if select is None else "explicit",
                 "decile": decile, "indices": [int(i) for i in idx],
                 "dates": [samples.dates[i].isoformat() for i in idx] if samples.dates else []}
    return GradCamMap(norm.tolist(), selection, all_zero)


def counterfactual_perturb(model, samples: SampleSet, delta: float = 0.1,
                           feature_names: Sequence[str] | None = None) -> CounterfactualReport:
    """Scale one channel by (1 - delta) everywhere; RMS change of predicted rainfall (mm/day)."""
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    names = _feature_names(samples, feature_names)
    base = _mm(model, samples.X)
    n = len(samples)
    norms = []
    X = samples.X.copy()
    for f in range(len(names)):
        X[..., f] = samples.X[..., f] * (1.0 - delta)
        change = _mm(model, X) - base
        norms.append(float(np.linalg.norm(change) / math.sqrt(n)))
        X[..., f] = samples.X[..., f]
    return CounterfactualReport(names, norms, delta)


def explain(model, samples: SampleSet, train_X: np.ndarray, feature_names: Sequence[str],
            methods: Sequence[str] = ("importance", "occlusion", "gradcam", "counterfactual"),
            repeats: int = 5, delta: float = 0.1, decile: float = 0.9, seed: int = 0,
            ) -> ExplanationReport:
    rep = ExplanationReport()
    if "importance" in methods:
        rep.importance = permutation_importance(model, samples, repeats, seed, feature_names)
    if "occlusion" in methods:
        rep.occlusion = temporal_occlusion(model, samples, training_mean_slice(train_X))
    if "gradcam" in methods:
        rep.gradcam = grad_cam(model, samples, decile=decile)
    if "counterfactual" in methods:
        rep.counterfactual = counterfactual_perturb(model, samples, delta, feature_names)
    return rep
