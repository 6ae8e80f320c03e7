"""TimeDistributed convolution + ConvLSTM + pooled dense head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CONV_FILTER_CHOICES = (32, 64, 128)
CONVLSTM_FILTER_CHOICES = (16, 32, 64)
KERNEL_CHOICES = (3, 5)
MAX_DROPOUT = 0.5
GATES = ("i", "f", "o", "c")

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    T: int
    H: int
    W: int
    F: int
    conv_filters: int = 32
    convlstm_filters: int = 16
    kernel_size: int = 3
    dropout_rate: float = 0.2
    forget_bias: float = 1.0

    def validate(self, strict: bool = True) -> "ModelConfig":
        """Check bounds; ``strict=False`` relaxes the filter-count menus (tests, toy models)."""
        for name in ("T", "H", "W", "F", "conv_filters", "convlstm_filters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate <= MAX_DROPOUT:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, {MAX_DROPOUT}]")
        if strict:
            if self.conv_filters not in CONV_FILTER_CHOICES:
                raise ValueError(f"conv_filters {self.conv_filters} not in {CONV_FILTER_CHOICES}")
            if self.convlstm_filters not in CONVLSTM_FILTER_CHOICES:
                raise ValueError(
                    f"convlstm_filters {self.convlstm_filters} not in {CONVLSTM_FILTER_CHOICES}")
            if self.kernel_size not in KERNEL_CHOICES:
                raise ValueError(f"kernel_size {self.kernel_size} not in {KERNEL_CHOICES}")
        return self


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    k, cout, ch = cfg.kernel_size, cfg.conv_filters, cfg.convlstm_filters
    shapes: dict[str, tuple[int, ...]] = {
        "conv.W": (k, k, cfg.F, cout),
        "conv.b": (cout,),
    }
    for g in GATES:
        shapes[f"lstm.W_x{g}"] = (k, k, cout, ch)
        shapes[f"lstm.W_h{g}"] = (k, k, ch, ch)
    for g in GATES:
        shapes[f"lstm.b_{g}"] = (ch,)
    shapes["dense.W"] = (ch,)
    shapes["dense.b"] = ()
    return shapes


def init_weights(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform kernels, zero biases, forget bias set to ``cfg.forget_bias``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if ".W" in name:
            if len(shape) == 4:
                k = shape[0]
                fan_in, fan_out = k * k * shape[2], k * k * shape[3]
            else:
                fan_in, fan_out = shape[0], 1
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        elif name == "lstm.b_f":
            data = np.full(shape, cfg.forget_bias)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, Tensor]:
    return {n: Tensor(np.zeros(s), requires_grad=True, name=n)
            for n, s in parameter_shapes(cfg).items()}


# --- layers ----------------------------------------------------------------

def conv_feature_forward(x_t, kernel, bias) -> Tensor:
    """F_t = ReLU(W_c * X_t + b_c) for one time step (optionally batched)."""
    return ad.relu(ad.conv2d(x_t, kernel, bias))


@dataclass
class ConvLstmCell:
    W_x: dict[str, Tensor]
    W_h: dict[str, Tensor]
    b: dict[str, Tensor]

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> "ConvLstmCell":
        return cls(
            W_x={g: params[f"lstm.W_x{g}"] for g in GATES},
            W_h={g: params[f"lstm.W_h{g}"] for g in GATES},
            b={g: params[f"lstm.b_{g}"] for g in GATES},
        )

    @property
    def hidden_channels(self) -> int:
        return self.b["i"].shape[0]

    def stacked(self) -> tuple[Tensor, Tensor, Tensor]:
        """Gate kernels and biases concatenated along the output channel in i,f,o,c order."""
        return (ad.concat([self.W_x[g] for g in GATES], axis=3),
                ad.concat([self.W_h[g] for g in GATES], axis=3),
                ad.concat([self.b[g] for g in GATES], axis=0))


def convlstm_step(f_t, h_prev, c_prev, cell: ConvLstmCell, stacked=None):
    """One ConvLSTM update; returns ``(h_t, c_t)``.

    Inputs may be ``[H,W,C]`` or batched ``[N,H,W,C]``. ``stacked`` lets a
    caller reuse :meth:`ConvLstmCell.stacked` across steps.
    """
    f_t, h_prev, c_prev = ad.as_tensor(f_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    ch = cell.hidden_channels
    if h_prev.shape != c_prev.shape or h_prev.shape[-1] != ch:
        raise ShapeError(f"state shapes {h_prev.shape}/{c_prev.shape} do not match Ch={ch}")
    if f_t.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"input {f_t.shape} and state {h_prev.shape} disagree spatially")
    wx, wh, b = stacked or cell.stacked()
    z = ad.conv2d(f_t, wx, b) + ad.conv2d(h_prev, wh)
    i = ad.sigmoid(z[..., 0:ch])
    f = ad.sigmoid(z[..., ch:2 * ch])
    o = ad.sigmoid(z[..., 2 * ch:3 * ch])
    g = ad.tanh(z[..., 3 * ch:4 * ch])
    c_t = f * c_prev + i * g
    h_t = o * ad.tanh(c_t)
    return h_t, c_t


def apply_dropout(h, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate <= MAX_DROPOUT:
        raise ValueError(f"dropout rate {rate} outside [0, {MAX_DROPOUT}]")
    h = ad.as_tensor(h)
    if not training or rate == 0.0:
        return h
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * Tensor(keep)


# --- model -----------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass (for Grad-CAM and tests)."""
    features: list[Tensor]
    hidden: Tensor
    cell: Tensor
    pooled: Tensor


class ConvLstmModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ShapeError(f"parameter names {sorted(params)} do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def initialized(cls, config: ModelConfig, seed: int) -> "ConvLstmModel":
        return cls(config, init_weights(config, seed))

    @property
    def cell(self) -> ConvLstmCell:
        return ConvLstmCell.from_params(self.params)

    def run_sequence(self, X, h0=None, c0=None, features_out: list | None = None):
        """Unroll over the time axis of ``X`` ``[N,T,H,W,F]``; returns final ``(h, c)``."""
        X = ad.as_tensor(X)
        n, t_len, h, w, _ = X.shape
        ch = self.config.convlstm_filters
        if h0 is None:
            h0 = Tensor(np.zeros((n, h, w, ch)))
        if c0 is None:
            c0 = Tensor(np.zeros((n, h, w, ch)))
        cell = self.cell
        stacked = cell.stacked()
        h_t, c_t = h0, c0
        for t in range(t_len):
            f_t = conv_feature_forward(X[:, t], self.params["conv.W"], self.params["conv.b"])
            if features_out is not None:
                features_out.append(f_t)
            h_t, c_t = convlstm_step(f_t, h_t, c_t, cell, stacked)
        return h_t, c_t

    def forward(self, X, training: bool = False, rng: np.random.Generator | None = None):
        """Batched prediction in log1p space; returns ``(yhat [N], ForwardTrace)``."""
        X = ad.as_tensor(X)
        cfg = self.config
        if X.ndim != 5 or X.shape[1:] != (cfg.T, cfg.H, cfg.W, cfg.F):
            raise ShapeError(f"input {X.shape} does not match [N,{cfg.T},{cfg.H},{cfg.W},{cfg.F}]")
        feats: list[Tensor] = []
        h_T, c_T = self.run_sequence(X, features_out=feats)
        pooled = ad.global_avg_pool(h_T)
        dropped = apply_dropout(pooled, cfg.dropout_rate, training, rng)
        yhat = ad.matmul(dropped, self.params["dense.W"]) + self.params["dense.b"]
        return yhat, ForwardTrace(feats, h_T, c_T, pooled)

    def predict(self, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Log-space predictions, no tape, eval mode."""
        X = np.asarray(X, dtype=np.float64)
        out = [self.forward(X[i:i + batch_size])[0].data for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data[...] = values[n]


# --- checkpoint ------------------------------------------------------------

def write_blob(json_path: Path, arrays: dict[str, np.ndarray], header: dict) -> None:
    """Write ``header`` + tensor index as JSON and the tensors as one little-endian float64 blob."""
    json_path = Path(json_path)
    bin_path = json_path.with_suffix(".bin")
    index, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.nbytes
    meta = dict(header)
    meta["blob"] = bin_path.name
    meta["tensors"] = index
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_blob(json_path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text(encoding="utf-8"))
    raw = (json_path.parent / meta["blob"]).read_bytes()
    arrays = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return meta, arrays


def save_checkpoint(model: ConvLstmModel, path: Path) -> None:
    header = {"format_version": CHECKPOINT_FORMAT, "model_config": asdict(model.config)}
    write_blob(path, model.copy_params(), header)


def load_checkpoint(path: Path) -> ConvLstmModel:
    meta, arrays = read_blob(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
    cfg = ModelConfig(**meta["model_config"])
    params = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
    return ConvLstmModel(cfg, params)
