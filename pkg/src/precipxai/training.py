"""Extreme-weighted MSE, Adam, early stopping / plateau decay, metrics and time-series CV."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SampleSet, expm1_inverse, quantile
from .nn import ConvLstmModel, ModelConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


# --- loss -----------------------------------------------------------------------

MIN_TAU_SAMPLES = 10


@dataclass
class LossConfig:
    tau_percentile: float = 90.0
    alpha: float = 5.0
    tau: float | None = None

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")

    def resolved(self, train_targets) -> "LossConfig":
        return replace(self, tau=compute_tau(train_targets, self.tau_percentile))


def compute_tau(train_targets, percentile: float = 90.0) -> float:
    y = np.asarray(train_targets, dtype=np.float64)
    if y.size < MIN_TAU_SAMPLES:
        raise ValueError(f"need >= {MIN_TAU_SAMPLES} training targets for tau, got {y.size}")
    return float(quantile(y, percentile / 100.0))


def extreme_weights(y: np.ndarray, cfg: LossConfig) -> np.ndarray:
    if cfg.tau is None:
        raise ValueError("loss threshold tau is unresolved")
    return np.where(np.asarray(y) >= cfg.tau, cfg.alpha, 1.0)


def weighted_mse(y, yhat, cfg: LossConfig) -> Tensor:
    """(1/N) sum w_i (y_i - yhat_i)^2 with w_i = alpha above tau, else 1."""
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    yhat = ad.as_tensor(yhat)
    if y_arr.shape != yhat.shape:
        raise ad.ShapeError(f"targets {y_arr.shape} and predictions {yhat.shape} differ")
    if y_arr.size == 0:
        raise ValueError("empty batch")
    r = ad.sub(Tensor(y_arr), yhat)
    return ad.mean(ad.mul(Tensor(extreme_weights(y_arr, cfg)), ad.mul(r, r)))


# --- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- fitting --------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    patience: int = 3
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    min_delta: float = 1e-6
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    # start the regression bias at the mean training target instead of 0
    warm_start_bias: bool = True


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def train_loss(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    @property
    def val_loss(self) -> list[float]:
        return [e["val_loss"] for e in self.epochs]

    @property
    def learning_rates(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)


def loss_value(model: ConvLstmModel, samples: SampleSet, cfg: LossConfig, batch_size: int = 64) -> float:
    yhat = model.predict(samples.X, batch_size)
    return float(weighted_mse(samples.y, yhat, cfg).data)


def fit(model: ConvLstmModel, train: SampleSet, val: SampleSet, train_cfg: TrainConfig,
        loss_cfg: LossConfig, on_epoch: Callable[[dict], None] | None = None) -> History:
    """Mini-batch Adam with plateau LR decay and early stopping; restores the best weights."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fit needs nonempty training and validation partitions")
    if loss_cfg.tau is None:
        loss_cfg = loss_cfg.resolved(train.y)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    if train_cfg.warm_start_bias:
        model.params["dense.b"].data[...] = float(np.mean(train.y))
    state = OptimizerState.for_params(model.params)
    lr = train_cfg.learning_rate
    hist = History()
    best = model.copy_params()
    since_best = since_lr_drop = 0

    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            with ad.Tape() as tape:
                yhat, _ = model.forward(train.X[idx], training=True, rng=dropout_rng)
                loss = weighted_mse(train.y[idx], yhat, loss_cfg)
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"training loss became non-finite in epoch {epoch + 1}", epoch + 1)
            try:
                adam_step(model.params, {n: p.grad for n, p in model.params.items()}, state, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} in epoch {epoch + 1}", epoch + 1) from None
            total += float(loss.data) * len(idx)
        train_loss = total / len(train)
        val_loss = loss_value(model, val, loss_cfg)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"validation loss became non-finite in epoch {epoch + 1}", epoch + 1)
        record = {"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        hist.epochs.append(record)
        if on_epoch:
            on_epoch(record)
        log.debug("epoch %d train %.6f val %.6f lr %g", epoch + 1, train_loss, val_loss, lr)

        if val_loss < hist.best_val_loss - train_cfg.min_delta:
            hist.best_val_loss, hist.best_epoch = val_loss, epoch + 1
            best = model.copy_params()
            since_best = since_lr_drop = 0
            continue
        since_best += 1
        since_lr_drop += 1
        if since_best >= train_cfg.patience:
            hist.stopped_early = epoch + 1 < train_cfg.epochs
            break
        if since_lr_drop >= train_cfg.plateau_patience:
            lr *= train_cfg.plateau_factor
            since_lr_drop = 0

    model.load_params(best)
    return hist


# --- metrics --------------------------------------------------------------------

@dataclass
class Metrics:
    rmse: float
    extreme_rmse: float | None
    n_samples: int
    n_extreme: int
    threshold_mm: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def rmse(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def metrics_from_log(y_log, yhat_log, tau: float | None) -> Metrics:
    y_mm = expm1_inverse(y_log)
    p_mm = expm1_inverse(yhat_log)
    if len(y_mm) == 0:
        raise ValueError("cannot evaluate on zero samples")
    thr = float(np.expm1(tau)) if tau is not None else None
    ext = y_mm >= thr if thr is not None else np.zeros(len(y_mm), bool)
    return Metrics(
        rmse=rmse(y_mm, p_mm),
        extreme_rmse=rmse(y_mm[ext], p_mm[ext]) if ext.any() else None,
        n_samples=int(len(y_mm)),
        n_extreme=int(ext.sum()),
        threshold_mm=thr,
    )


def evaluate(model, samples: SampleSet, tau: float | None) -> Metrics:
    """RMSE and extreme-event RMSE in mm/day; extreme = target at or above expm1(tau)."""
    return metrics_from_log(samples.y, model.predict(samples.X), tau)


class MeanPredictor:
    """Constant forecast of the training mean rainfall (in mm/day)."""

    def __init__(self, train_y_log):
        self.mean_mm = float(np.mean(expm1_inverse(train_y_log)))

    def predict(self, X) -> np.ndarray:
        return np.full(len(X), np.log1p(self.mean_mm))


# --- time-series cross-validation -------------------------------------------------

@dataclass
class FoldWindow:
    fold: int
    train: slice
    test: slice


def expanding_windows(n: int, k: int = 3) -> list[FoldWindow]:
    """Fold j (1-based) trains on the first j/(k+1) of the samples and tests on the next 1/(k+1)."""
    if k < 1 or n < 2 * (k + 1):
        raise ValueError(f"{n} samples are too few for {k} expanding-window folds")
    cuts = [int(np.floor(j * n / (k + 1))) for j in range(k + 2)]
    return [FoldWindow(j, slice(0, cuts[j]), slice(cuts[j], cuts[j + 1])) for j in range(1, k + 1)]


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    train_loss: list[float]
    val_loss: list[float]
    metrics: Metrics
    n_train: int
    n_val: int
    n_test: int
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d


def fold_partitions(samples: SampleSet, window: FoldWindow, val_fraction: float = 0.15):
    """Train/val/test for one fold; the tail of the training window is held out for early stopping."""
    fold_train_all = samples[window.train]
    n_fit = len(fold_train_all) - max(1, int(np.floor(val_fraction * len(fold_train_all))))
    return fold_train_all[:n_fit], fold_train_all[n_fit:], samples[window.test]


def ts_cross_validate(samples: SampleSet, model_cfg: ModelConfig, train_cfg: TrainConfig,
                      loss_cfg: LossConfig, k: int = 3, val_fraction: float = 0.15,
                      rescale: Callable[[SampleSet, SampleSet], tuple] | None = None,
                      on_fold: Callable[[FoldResult, ConvLstmModel], None] | None = None):
    """Expanding-window CV; each fold's training window reserves its last ``val_fraction`` for
    early stopping. ``rescale(train, other)`` may refit input scaling on the fold's training part.

    Returns ``(fold_results, mean_test_rmse)``.
    """
    results = []
    for w in expanding_windows(len(samples), k):
        tr, va, te = fold_partitions(samples, w, val_fraction)
        if rescale is not None:
            tr, va, te = rescale(tr, va, te)
        fold_loss = loss_cfg.resolved(tr.y)
        model = ConvLstmModel.initialized(model_cfg, train_cfg.seed + w.fold)
        hist = fit(model, tr, va, train_cfg, fold_loss)
        res = FoldResult(w.fold, hist.best_epoch, hist.train_loss, hist.val_loss,
                         evaluate(model, te, fold_loss.tau), len(tr), len(va), len(te))
        if on_fold:
            on_fold(res, model)
        results.append(res)
    return results, float(np.mean([r.metrics.rmse for r in results]))
