"""Sequential hyperparameter search: quasi-random warm-up followed by a Parzen density-ratio sampler."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .data import SampleSet
from .nn import (
    CONV_FILTER_CHOICES,
    CONVLSTM_FILTER_CHOICES,
    KERNEL_CHOICES,
    MAX_DROPOUT,
    ConvLstmModel,
    ModelConfig,
)
from .training import (
    DivergenceError,
    LossConfig,
    TrainConfig,
    evaluate,
    expanding_windows,
    fit,
    fold_partitions,
)

log = logging.getLogger(__name__)

N_STARTUP = 8
GOOD_FRACTION = 0.3
N_CANDIDATES = 24
DIMENSIONS = ("conv_filters", "convlstm_filters", "dropout", "learning_rate", "kernel_size")


class TuningError(RuntimeError):
    def __init__(self, msg: str, trials: list["Trial"]):
        super().__init__(msg)
        self.trials = trials


@dataclass(frozen=True)
class SearchSpace:
    conv_filters: tuple[int, ...] = CONV_FILTER_CHOICES
    convlstm_filters: tuple[int, ...] = CONVLSTM_FILTER_CHOICES
    dropout: tuple[float, float] = (0.0, MAX_DROPOUT)
    learning_rate: tuple[float, ...] = (1e-3, 1e-4)
    kernel_size: tuple[int, ...] = KERNEL_CHOICES
    # off for reduced spaces (toy grids, quick tests) whose filter counts are outside the menus
    strict: bool = True

    def __post_init__(self):
        lo, hi = self.dropout
        if not 0.0 <= lo <= hi <= MAX_DROPOUT:
            raise ValueError(f"dropout range {self.dropout} outside [0, {MAX_DROPOUT}]")
        for name in ("conv_filters", "convlstm_filters", "learning_rate", "kernel_size"):
            if not getattr(self, name):
                raise ValueError(f"search dimension {name} is empty")
        if any(lr <= 0 for lr in self.learning_rate):
            raise ValueError("learning rates must be positive")

    def categorical(self) -> dict[str, tuple]:
        return {"conv_filters": self.conv_filters, "convlstm_filters": self.convlstm_filters,
                "learning_rate": self.learning_rate, "kernel_size": self.kernel_size}

    def decode(self, u: Sequence[float]) -> dict:
        """Map a point of the unit cube (one coordinate per dimension, in DIMENSIONS order)."""
        out = {}
        for name, ui in zip(DIMENSIONS, u):
            if name == "dropout":
                lo, hi = self.dropout
                out[name] = float(lo + ui * (hi - lo))
            else:
                choices = getattr(self, name)
                out[name] = choices[min(int(ui * len(choices)), len(choices) - 1)]
        return out

    def model_config(self, base: ModelConfig, params: dict) -> ModelConfig:
        cfg = replace(base, conv_filters=int(params["conv_filters"]),
                      convlstm_filters=int(params["convlstm_filters"]),
                      kernel_size=int(params["kernel_size"]), dropout_rate=float(params["dropout"]))
        return cfg.validate(strict=self.strict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trial:
    index: int
    params: dict
    val_loss: float | None
    status: str = "ok"
    best_epoch: int = -1
    test_rmse: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        # wall time is kept out of the log so identical seeds give identical bytes
        d = {"index": self.index, "params": self.params, "val_loss": self.val_loss,
             "status": self.status, "best_epoch": self.best_epoch, "test_rmse": self.test_rmse}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Trial":
        return cls(**json.loads(line))


@dataclass
class TuneResult:
    best: Trial
    trials: list[Trial]

    def best_so_far(self) -> list[float]:
        out, cur = [], math.inf
        for t in self.trials:
            if t.status == "ok":
                cur = min(cur, t.val_loss)
            out.append(cur)
        return out

    def log_text(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.trials)


# --- sampling -------------------------------------------------------------------------

def _sobol_point(seed: int, index: int) -> np.ndarray:
    pts = qmc.Sobol(d=len(DIMENSIONS), scramble=True, seed=seed).random(N_STARTUP)
    return pts[index]


def _categorical_probs(values: list, choices: tuple) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == c) for c in choices], float)
    return (counts + 1.0) / (len(values) + len(choices))


def _parzen_logpdf(x: np.ndarray, centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    width = hi - lo
    if width <= 0:
        return np.zeros_like(x)
    bw = max(width / 10, width * len(centers) ** -0.2 / 4)
    dens = np.full_like(x, 1.0 / width)  # uniform prior component
    for c in centers:
        dens = dens + np.exp(-0.5 * ((x - c) / bw) ** 2) / (bw * math.sqrt(2 * math.pi))
    return np.log(dens / (len(centers) + 1))


def _parzen_sample(rng: np.random.Generator, centers: np.ndarray, lo: float, hi: float, n: int):
    width = hi - lo
    if width <= 0:
        return np.full(n, lo)
    bw = max(width / 10, width * len(centers) ** -0.2 / 4)
    pick = rng.integers(0, len(centers) + 1, size=n)
    out = np.empty(n)
    for i, j in enumerate(pick):
        if j == len(centers):
            out[i] = rng.uniform(lo, hi)
        else:
            out[i] = np.clip(rng.normal(centers[j], bw), lo, hi)
    return out


def sample_config(space: SearchSpace, history: Sequence[Trial], seed: int) -> dict:
    """Next point to try. The first N_STARTUP come from one scrambled Sobol sequence, which
    stratifies every dimension; later points maximise the good/bad density ratio."""
    done = [t for t in history if t.status == "ok"]
    if len(history) < N_STARTUP or len(done) < 2:
        return space.decode(_sobol_point(seed, len(history) % N_STARTUP))

    rng = np.random.default_rng([seed, len(history)])
    ranked = sorted(done, key=lambda t: t.val_loss)
    n_good = max(1, math.ceil(GOOD_FRACTION * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]

    score = np.zeros(N_CANDIDATES)
    cand: dict[str, list] = {}
    for name, choices in space.categorical().items():
        pg = _categorical_probs([t.params[name] for t in good], choices)
        pb = _categorical_probs([t.params[name] for t in bad], choices)
        idx = rng.choice(len(choices), size=N_CANDIDATES, p=pg)
        cand[name] = [choices[i] for i in idx]
        score += np.log(pg[idx]) - np.log(pb[idx])
    lo, hi = space.dropout
    x = _parzen_sample(rng, np.array([t.params["dropout"] for t in good]), lo, hi, N_CANDIDATES)
    cand["dropout"] = list(x)
    score += (_parzen_logpdf(x, np.array([t.params["dropout"] for t in good]), lo, hi)
              - _parzen_logpdf(x, np.array([t.params["dropout"] for t in bad]), lo, hi))

    best = int(np.argmax(score))
    out = {name: cand[name][best] for name in DIMENSIONS}
    out["dropout"] = float(out["dropout"])
    return out


# --- tuning loop ------------------------------------------------------------------------

Objective = Callable[[dict, int], tuple[float, int, float | None]]


def training_objective(base: ModelConfig, space: SearchSpace, train: SampleSet, val: SampleSet,
                       train_cfg: TrainConfig, loss_cfg: LossConfig, seed: int,
                       test: SampleSet | None = None) -> Objective:
    """Fit one candidate and report (validation loss, best epoch, test RMSE or None)."""
    resolved = loss_cfg.resolved(train.y)

    def run(params: dict, index: int):
        init_seed, fit_seed = np.random.SeedSequence([seed, index]).generate_state(2)
        model = ConvLstmModel.initialized(space.model_config(base, params), int(init_seed))
        cfg = replace(train_cfg, learning_rate=float(params["learning_rate"]), seed=int(fit_seed))
        hist = fit(model, train, val, cfg, resolved)
        test_rmse = evaluate(model, test, resolved.tau).rmse if test is not None and len(test) else None
        return hist.best_val_loss, hist.best_epoch, test_rmse

    return run


def tune(objective: Objective, space: SearchSpace, n_trials: int = 20, seed: int = 0,
         log_path: Path | None = None) -> TuneResult:
    """Run ``n_trials`` sequential trials; the log (one JSON trial per line) is rewritten after each."""
    trials: list[Trial] = []
    for i in range(n_trials):
        params = sample_config(space, trials, seed)
        t0 = time.perf_counter()
        try:
            val_loss, best_epoch, test_rmse = objective(params, i)
            trial = Trial(i, params, float(val_loss), "ok", int(best_epoch), test_rmse)
        except DivergenceError as exc:
            log.warning("trial %d diverged: %s", i, exc)
            trial = Trial(i, params, None, "diverged")
        trial.wall_time = time.perf_counter() - t0
        trials.append(trial)
        log.info("trial %d %s val_loss=%s", i, params, trial.val_loss)
        if log_path is not None:
            _write_log(log_path, trials)

    done = [t for t in trials if t.status == "ok"]
    if not done:
        raise TuningError(f"all {n_trials} trials diverged", trials)
    best = min(done, key=lambda t: (t.val_loss, t.index))
    return TuneResult(best, trials)


def _write_log(path: Path, trials: list[Trial]) -> None:
    path = Path(path)
    path.write_text("".join(t.to_json() + "\n" for t in trials), encoding="utf-8")
    times = {str(t.index): round(t.wall_time, 3) for t in trials}
    path.with_name(path.stem + "_walltime.json").write_text(json.dumps(times, indent=2) + "\n",
                                                            encoding="utf-8")


def read_log(path: Path) -> list[Trial]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Trial.from_json(line) for line in lines if line.strip()]


def modal_config(bests: Sequence[Trial]) -> dict:
    """Most common value per categorical dimension (ties go to the earliest fold) and the median dropout."""
    if not bests:
        raise ValueError("no trials to aggregate")
    out = {}
    for name in DIMENSIONS:
        vals = [t.params[name] for t in bests]
        if name == "dropout":
            out[name] = float(np.median(vals))
        else:
            counts = Counter(vals)
            top = max(counts.values())
            out[name] = next(v for v in vals if counts[v] == top)
    return out


def tune_folds(samples: SampleSet, base: ModelConfig, space: SearchSpace, train_cfg: TrainConfig,
               loss_cfg: LossConfig, n_trials: int = 20, seed: int = 0, k: int = 3,
               all_folds: bool = False, log_dir: Path | None = None):
    """Tune on the expanding-window folds (only the first unless ``all_folds``).

    Returns ``(per-fold TuneResults, modal params)``.
    """
    windows = expanding_windows(len(samples), k)
    if not all_folds:
        windows = windows[:1]
    results = []
    for w in windows:
        tr, va, te = fold_partitions(samples, w)
        obj = training_objective(base, space, tr, va, train_cfg, loss_cfg, seed + w.fold, te)
        path = Path(log_dir) / f"trials_fold{w.fold}.jsonl" if log_dir is not None else None
        results.append(tune(obj, space, n_trials, seed + w.fold, path))
    return results, modal_config([r.best for r in results])
