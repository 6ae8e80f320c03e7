"""Gridded daily variables -> scaled T-step sequences with area-averaged log1p targets."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import read_blob, write_blob

log = logging.getLogger(__name__)

CSV_HEADER = ("date", "row", "col", "variable", "value")
PROVENANCES = ("ingested", "synthetic")
BUNDLE_FORMAT = 1


class DataValidationError(ValueError):
    pass


# --- manifest ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    grid_rows: int
    grid_cols: int
    variables: list[str]
    date_start: date
    date_end: date
    city: str = ""
    provenance: str = "ingested"
    precip_variable: str = "tp"
    # optional month filter (e.g. June-September monsoon blocks)
    months: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(set(self.variables)) != len(self.variables):
            raise DataValidationError(f"duplicate variable names in {self.variables}")
        if self.provenance not in PROVENANCES:
            raise DataValidationError(f"provenance must be one of {PROVENANCES}")
        if self.date_end < self.date_start:
            raise DataValidationError("date_end precedes date_start")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise DataValidationError("grid dimensions must be positive")

    def dates(self) -> list[date]:
        n = (self.date_end - self.date_start).days + 1
        days = [self.date_start + timedelta(days=i) for i in range(n)]
        if self.months:
            days = [d for d in days if d.month in self.months]
        return days

    def to_dict(self) -> dict:
        d = asdict(self)
        d["date_start"] = self.date_start.isoformat()
        d["date_end"] = self.date_end.isoformat()
        d["months"] = list(self.months) if self.months else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["date_start"] = date.fromisoformat(d["date_start"])
        d["date_end"] = date.fromisoformat(d["date_end"])
        d["months"] = tuple(d["months"]) if d.get("months") else None
        return cls(**d)

    def to_text(self) -> str:
        lines = [
            f"grid_rows={self.grid_rows}",
            f"grid_cols={self.grid_cols}",
            f"variables={','.join(self.variables)}",
            f"date_start={self.date_start.isoformat()}",
            f"date_end={self.date_end.isoformat()}",
            f"city={self.city}",
            f"provenance={self.provenance}",
            f"precip_variable={self.precip_variable}",
        ]
        if self.months:
            lines.append(f"months={','.join(str(m) for m in self.months)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = parse_key_values(text)
        required = ("grid_rows", "grid_cols", "variables", "date_start", "date_end")
        missing = [k for k in required if k not in kv]
        if missing:
            raise DataValidationError(f"manifest missing keys: {', '.join(missing)}")
        known = set(required) | {"city", "provenance", "precip_variable", "months"}
        unknown = sorted(set(kv) - known)
        if unknown:
            raise DataValidationError(f"unknown manifest keys: {', '.join(unknown)}")
        return cls(
            grid_rows=int(kv["grid_rows"]),
            grid_cols=int(kv["grid_cols"]),
            variables=[v.strip() for v in kv["variables"].split(",") if v.strip()],
            date_start=date.fromisoformat(kv["date_start"]),
            date_end=date.fromisoformat(kv["date_end"]),
            city=kv.get("city", ""),
            provenance=kv.get("provenance", "ingested"),
            precip_variable=kv.get("precip_variable", "tp"),
            months=tuple(int(m) for m in kv["months"].split(",")) if kv.get("months") else None,
        )

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored; duplicate keys rejected."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataValidationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise DataValidationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


# --- feature cube ------------------------------------------------------------

@dataclass
class FeatureCube:
    """Per-day ``[D, H, W, F]`` values with an explicit name <-> channel map.

    Days in different season blocks are never treated as neighbours; rows made
    invalid by shifting hold NaN and are flagged in ``valid``.
    """
    values: np.ndarray
    names: list[str]
    dates: list[date]
    block: np.ndarray = None
    valid: np.ndarray = None

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[-1] != len(self.names):
            raise DataValidationError(
                f"cube shape {self.values.shape} does not match {len(self.names)} names")
        if len(self.dates) != self.values.shape[0]:
            raise DataValidationError("date count does not match cube length")
        if self.block is None:
            self.block = season_blocks(self.dates)
        if self.valid is None:
            self.valid = np.isfinite(self.values).reshape(len(self.dates), -1).all(axis=1)

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataValidationError(f"no feature channel named {name!r}") from None

    def channel(self, name: str) -> np.ndarray:
        return self.values[..., self.index(name)]

    def widened(self, new_values: np.ndarray, new_names: list[str]) -> "FeatureCube":
        values = np.concatenate([self.values, new_values], axis=-1)
        valid = self.valid & np.isfinite(new_values).reshape(self.n_days, -1).all(axis=1)
        return FeatureCube(values, self.names + new_names, list(self.dates), self.block.copy(), valid)


def season_blocks(dates: Sequence[date]) -> np.ndarray:
    """Block id per day; a new block starts wherever consecutive dates are not 1 day apart."""
    block = np.zeros(len(dates), dtype=np.int64)
    for i in range(1, len(dates)):
        step = (dates[i] - dates[i - 1]).days
        if step <= 0:
            raise DataValidationError(f"dates not strictly increasing at {dates[i]}")
        block[i] = block[i - 1] + (step != 1)
    return block


# --- CSV ingestion ------------------------------------------------------------

def ingest_csv(manifest_path: Path, data_path: Path) -> tuple[DatasetManifest, FeatureCube]:
    manifest = DatasetManifest.load(manifest_path)
    return manifest, read_long_csv(manifest, data_path)


def read_long_csv(manifest: DatasetManifest, data_path: Path) -> FeatureCube:
    dates = manifest.dates()
    date_idx = {d.isoformat(): i for i, d in enumerate(dates)}
    var_idx = {v: i for i, v in enumerate(manifest.variables)}
    H, W = manifest.grid_rows, manifest.grid_cols
    values = np.full((len(dates), H, W, len(var_idx)), np.nan)
    seen = np.zeros(values.shape, dtype=bool)
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataValidationError(f"CSV header must be {','.join(CSV_HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != 5:
                raise DataValidationError(f"line {lineno}: expected 5 fields, got {len(rec)}")
            d, r, c, v, x = (s.strip() for s in rec)
            if d not in date_idx:
                raise DataValidationError(f"line {lineno}: date {d} outside manifest range")
            if v not in var_idx:
                raise DataValidationError(f"line {lineno}: unknown variable {v!r}")
            ri, ci = int(r), int(c)
            if not (0 <= ri < H and 0 <= ci < W):
                raise DataValidationError(f"line {lineno}: cell ({ri},{ci}) outside {H}x{W} grid")
            key = (date_idx[d], ri, ci, var_idx[v])
            if seen[key]:
                raise DataValidationError(
                    f"line {lineno}: duplicate value for date={d} cell=({ri},{ci}) variable={v}")
            seen[key] = True
            values[key] = float(x)
    if not seen.all():
        di, ri, ci, vi = (int(a[0]) for a in np.nonzero(~seen))
        raise DataValidationError(
            f"missing value for date={dates[di].isoformat()} cell=({ri},{ci}) "
            f"variable={manifest.variables[vi]} ({int((~seen).sum())} cells missing in total)")
    if not np.isfinite(values).all():
        raise DataValidationError("non-finite values in CSV")
    return FeatureCube(values, list(manifest.variables), dates)


def export_csv(cube: FeatureCube, path: Path, variables: Sequence[str] | None = None) -> None:
    variables = list(variables or cube.names)
    idx = [cube.index(v) for v in variables]
    _, H, W, _ = cube.values.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for di, d in enumerate(cube.dates):
            iso = d.isoformat()
            for r in range(H):
                for c in range(W):
                    for v, vi in zip(variables, idx):
                        w.writerow((iso, r, c, v, repr(float(cube.values[di, r, c, vi]))))


# --- feature engineering ------------------------------------------------------

def shift_within_blocks(x: np.ndarray, block: np.ndarray, lag: int) -> np.ndarray:
    """``out[t] = x[t - lag]`` when both days share a block, else NaN."""
    out = np.full_like(x, np.nan, dtype=np.float64)
    if lag < len(x):
        same = block[lag:] == block[:-lag] if lag else np.ones(len(x), bool)
        src = x[:-lag] if lag else x
        out[lag:][same] = src[same]
    return out


def build_lag_features(cube: FeatureCube, lags: Sequence[int] = (1, 2, 3),
                       variables: Sequence[str] | None = None) -> FeatureCube:
    """Append ``<var>_lag<k>`` channels, ordered by lag then variable."""
    variables = list(cube.names if variables is None else variables)
    if not lags:
        return cube
    if cube.n_days < max(lags) + 1:
        raise DataValidationError(f"need at least {max(lags) + 1} days for lags {tuple(lags)}")
    new, names = [], []
    for lag in lags:
        for v in variables:
            new.append(shift_within_blocks(cube.channel(v), cube.block, lag))
            names.append(f"{v}_lag{lag}")
    return cube.widened(np.stack(new, axis=-1), names)


def build_precip_deltas(cube: FeatureCube, precip: str = "tp",
                        lags: Sequence[int] = (1, 2, 3)) -> FeatureCube:
    """Append ``<precip>_delta<k>`` = P(t-k) - P(t-k+1)."""
    if precip not in cube.names:
        raise DataValidationError(f"missing precipitation channel {precip!r}")
    new, names = [], []
    for lag in lags:
        older = cube.channel(f"{precip}_lag{lag}") if f"{precip}_lag{lag}" in cube.names else None
        if older is None:
            raise DataValidationError(f"precipitation lag {lag} not built before deltas")
        newer = cube.channel(precip) if lag == 1 else cube.channel(f"{precip}_lag{lag - 1}")
        new.append(older - newer)
        names.append(f"{precip}_delta{lag}")
    return cube.widened(np.stack(new, axis=-1), names)


# --- sequencing ---------------------------------------------------------------

@dataclass
class SequenceSample:
    X: np.ndarray
    y: float
    date: date


@dataclass
class SampleSet:
    """Date-ordered batch of sequence samples stored as stacked arrays."""
    X: np.ndarray       # [N, T, H, W, F]
    y: np.ndarray       # [N] log1p(mm/day)
    dates: list[date]   # target dates

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SampleSet(self.X[i], self.y[i], self.dates[i])
        if isinstance(i, (list, np.ndarray)):
            idx = np.asarray(i, dtype=np.int64)
            return SampleSet(self.X[idx], self.y[idx], [self.dates[j] for j in idx])
        return SequenceSample(self.X[i], float(self.y[i]), self.dates[i])

    def __iter__(self) -> Iterator[SequenceSample]:
        return (self[i] for i in range(len(self)))

    def with_X(self, X: np.ndarray) -> "SampleSet":
        return SampleSet(X, self.y, self.dates)


def admissible_anchors(cube: FeatureCube, T: int) -> np.ndarray:
    """Anchor days t whose window t-T+1..t is valid and whose target day t+1 shares the block."""
    anchors = []
    for t in range(T - 1, cube.n_days - 1):
        lo = t - T + 1
        if cube.block[lo] != cube.block[t + 1]:
            continue
        if cube.valid[lo:t + 1].all():
            anchors.append(t)
    return np.asarray(anchors, dtype=np.int64)


def area_mean_log_target(cube: FeatureCube, precip: str, day: int) -> float:
    return float(log1p_target(cube.channel(precip)[day].mean()))


def assemble_sequences(cube: FeatureCube, precip: str = "tp", T: int = 7,
                       anchors: np.ndarray | None = None) -> SampleSet:
    if anchors is None:
        anchors = admissible_anchors(cube, T)
    _, H, W, F = cube.values.shape
    if len(anchors) == 0:
        log.warning("no admissible %d-day sequences in %d days; returning empty sample set",
                    T, cube.n_days)
        return SampleSet(np.zeros((0, T, H, W, F)), np.zeros(0), [])
    X = np.stack([cube.values[t - T + 1:t + 1] for t in anchors])
    y = np.array([area_mean_log_target(cube, precip, t + 1) for t in anchors])
    dates = [cube.dates[t + 1] for t in anchors]
    return SampleSet(X, y, dates)


# --- scaling and target transform ---------------------------------------------

def quantile(x: np.ndarray, q: float, axis=None):
    """Linear interpolation between order statistics (Hyndman-Fan type 7)."""
    return np.quantile(x, q, axis=axis, method="linear")


@dataclass
class ScalerParams:
    median: np.ndarray
    iqr: np.ndarray

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "iqr": self.iqr.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.asarray(d["median"], float), np.asarray(d["iqr"], float))


IQR_GUARD = 1e-9


def robust_fit(train) -> ScalerParams:
    """Per-channel median/IQR over every value of the training inputs (last axis = channel)."""
    X = train.X if isinstance(train, SampleSet) else np.asarray(train)
    flat = X.reshape(-1, X.shape[-1])
    q25, med, q75 = quantile(flat, [0.25, 0.5, 0.75], axis=0)
    iqr = q75 - q25
    iqr = np.where(iqr < IQR_GUARD, 1.0, iqr)
    return ScalerParams(med, iqr)


def robust_transform(x: np.ndarray, params: ScalerParams) -> np.ndarray:
    return (x - params.median) / params.iqr


def log1p_target(y_mm):
    y = np.asarray(y_mm, dtype=np.float64)
    if np.any(y < 0):
        raise DataValidationError("negative rainfall is physically invalid")
    out = np.log1p(y)
    return float(out) if out.ndim == 0 else out


def expm1_inverse(y_log, return_clamped: bool = False):
    """mm/day from log1p space; negative results are clamped to 0."""
    mm = np.expm1(np.asarray(y_log, dtype=np.float64))
    clamped = mm < 0
    mm = np.where(clamped, 0.0, mm)
    if mm.ndim == 0:
        mm, clamped = float(mm), bool(clamped)
    return (mm, clamped) if return_clamped else mm


# --- splitting ----------------------------------------------------------------

DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float]
    train_end: int
    val_end: int
    n: int
    boundary_dates: dict = field(default_factory=dict)

    def partitions(self, samples: SampleSet) -> tuple[SampleSet, SampleSet, SampleSet]:
        return samples[:self.train_end], samples[self.train_end:self.val_end], samples[self.val_end:]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


def chronological_split(samples: SampleSet, fractions=DEFAULT_FRACTIONS):
    n = len(samples)
    if n < 3:
        raise DataValidationError(f"need at least 3 samples to split, got {n}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataValidationError(f"split fractions {fractions} do not sum to 1")
    if any(b <= a for a, b in zip(samples.dates, samples.dates[1:])):
        raise DataValidationError("samples are not strictly date-ordered")
    train_end = int(np.floor(fractions[0] * n))
    val_end = int(np.floor((fractions[0] + fractions[1]) * n))
    parts = (samples[:train_end], samples[train_end:val_end], samples[val_end:])
    bounds = {name: [p.dates[0].isoformat(), p.dates[-1].isoformat()]
              for name, p in zip(("train", "val", "test"), parts) if len(p)}
    spec = SplitSpec(tuple(fractions), train_end, val_end, n, bounds)
    return spec, parts


# --- end-to-end processing ------------------------------------------------------

@dataclass
class PipelineConfig:
    T: int = 7
    lags: tuple[int, ...] = (1, 2, 3)
    # None lags every base variable
    lag_variables: tuple[str, ...] | None = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def to_dict(self) -> dict:
        return {"T": self.T, "lags": list(self.lags),
                "lag_variables": list(self.lag_variables) if self.lag_variables is not None else None,
                "fractions": list(self.fractions)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        lv = d.get("lag_variables")
        return cls(T=int(d["T"]), lags=tuple(d["lags"]),
                   lag_variables=tuple(lv) if lv is not None else None,
                   fractions=tuple(d["fractions"]))


def engineer_features(cube: FeatureCube, precip: str, cfg: PipelineConfig) -> FeatureCube:
    lag_vars = list(cube.names) if cfg.lag_variables is None else list(cfg.lag_variables)
    if cfg.lags and precip in cube.names and precip not in lag_vars:
        lag_vars.append(precip)
    out = build_lag_features(cube, cfg.lags, lag_vars)
    if cfg.lags and tuple(cfg.lags) == tuple(range(1, max(cfg.lags) + 1)):
        out = build_precip_deltas(out, precip, cfg.lags)
    return out


@dataclass
class Dataset:
    """Engineered cube, raw sequences, the default split and its training-fitted scaler."""
    manifest: DatasetManifest
    cube: FeatureCube
    anchors: np.ndarray
    pipeline: PipelineConfig
    scaler: ScalerParams
    split: SplitSpec
    synthetic: dict | None = None

    @property
    def feature_names(self) -> list[str]:
        return self.cube.names

    def raw_samples(self) -> SampleSet:
        return assemble_sequences(self.cube, self.manifest.precip_variable, self.pipeline.T,
                                  self.anchors)

    def scaled_samples(self, scaler: ScalerParams | None = None) -> SampleSet:
        s = self.raw_samples()
        return s.with_X(robust_transform(s.X, scaler or self.scaler))

    def partitions(self) -> tuple[SampleSet, SampleSet, SampleSet]:
        return self.split.partitions(self.scaled_samples())


def build_dataset(manifest: DatasetManifest, base: FeatureCube, cfg: PipelineConfig | None = None,
                  synthetic: dict | None = None) -> Dataset:
    cfg = cfg or PipelineConfig()
    cube = engineer_features(base, manifest.precip_variable, cfg)
    anchors = admissible_anchors(cube, cfg.T)
    raw = assemble_sequences(cube, manifest.precip_variable, cfg.T, anchors)
    split, (train, _, _) = chronological_split(raw, cfg.fractions)
    scaler = robust_fit(train)
    return Dataset(manifest, cube, anchors, cfg, scaler, split, synthetic)


def save_bundle(ds: Dataset, path: Path) -> None:
    header = {
        "format_version": BUNDLE_FORMAT,
        "manifest": ds.manifest.to_dict(),
        "feature_index": {n: i for i, n in enumerate(ds.cube.names)},
        "pipeline": ds.pipeline.to_dict(),
        "scaler": ds.scaler.to_dict(),
        "split": ds.split.to_dict(),
        "dates": [d.isoformat() for d in ds.cube.dates],
        "synthetic": ds.synthetic,
    }
    arrays = {
        "features": ds.cube.values,
        "valid": ds.cube.valid.astype(np.float64),
        "anchors": ds.anchors.astype(np.float64),
    }
    write_blob(Path(path), arrays, header)


def load_bundle(path: Path) -> Dataset:
    meta, arrays = read_blob(Path(path))
    if meta.get("format_version") != BUNDLE_FORMAT:
        raise DataValidationError(f"unsupported bundle format {meta.get('format_version')}")
    index = meta["feature_index"]
    names = sorted(index, key=index.get)
    if [index[n] for n in names] != list(range(len(names))):
        raise DataValidationError("feature index map is not a permutation of channels")
    values = arrays["features"]
    if values.shape[-1] != len(names):
        raise DataValidationError("feature index map does not match stored channel count")
    dates = [date.fromisoformat(d) for d in meta["dates"]]
    cube = FeatureCube(values, names, dates, valid=arrays["valid"].astype(bool))
    split = dict(meta["split"])
    split["fractions"] = tuple(split["fractions"])
    return Dataset(
        manifest=DatasetManifest.from_dict(meta["manifest"]),
        cube=cube,
        anchors=arrays["anchors"].astype(np.int64),
        pipeline=PipelineConfig.from_dict(meta["pipeline"]),
        scaler=ScalerParams.from_dict(meta["scaler"]),
        split=SplitSpec(**split),
        synthetic=meta.get("synthetic"),
    )


# --- synthetic planted-signal data ----------------------------------------------

QUADRANTS = ("NW", "NE", "SW", "SE")


def quadrant_mask(rows: int, cols: int, which: str) -> np.ndarray:
    mask = np.zeros((rows, cols), dtype=bool)
    r0 = 0 if which[0] == "N" else rows // 2
    c0 = 0 if which[1] == "W" else cols // 2
    r1 = rows // 2 if which[0] == "N" else rows
    c1 = cols // 2 if which[1] == "W" else cols
    mask[r0:r1, c0:c1] = True
    return mask


@dataclass
class SyntheticSpec:
    """Planted signal: area-mean rain on day D = offset + coeff * s(D-1-lag) + noise,
    where s is the standardized mean of the driver channel over ``mask``.

    ``lag`` counts back from the last input day, so lag 0 is the most recent
    step of a window ending the day before D.
    """
    grid_rows: int = 8
    grid_cols: int = 8
    n_days: int = 600
    n_features: int = 4
    driver: int = 0
    lag: int = 0
    mask: str = "NW"
    coeff: float = 1.0
    noise_std: float = 0.2
    seed: int = 0
    ar_coeff: float = 0.5
    spatial_sigma: float = 1.0
    # driver amplitude outside the mask, relative to inside
    background_scale: float = 0.3
    offset: float | None = None
    start: date = date(2001, 6, 1)
    T: int = 7

    def mask_array(self) -> np.ndarray:
        if self.mask.upper() in QUADRANTS:
            return quadrant_mask(self.grid_rows, self.grid_cols, self.mask.upper())
        m = np.zeros((self.grid_rows, self.grid_cols), dtype=bool)
        for cell in self.mask.split(";"):
            r, c = (int(v) for v in cell.split(":"))
            m[r, c] = True
        return m

    def resolved_offset(self) -> float:
        return self.offset if self.offset is not None else 3.0 * (abs(self.coeff) + self.noise_std)

    def validate(self) -> "SyntheticSpec":
        if not 0 <= self.driver < self.n_features:
            raise DataValidationError(f"driver index {self.driver} outside 0..{self.n_features - 1}")
        if not 0 <= self.lag < self.T:
            raise DataValidationError(f"planted lag {self.lag} must lie in [0, {self.T})")
        try:
            mask = self.mask_array()
        except (ValueError, IndexError) as exc:
            raise DataValidationError(f"invalid mask {self.mask!r}: {exc}") from None
        if not mask.any():
            raise DataValidationError("planted mask is empty")
        if self.noise_std < 0 or not 0 <= self.ar_coeff < 1 or self.background_scale < 0:
            raise DataValidationError("noise_std must be >= 0 and ar_coeff in [0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = self.start.isoformat()
        d["offset"] = self.resolved_offset()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if isinstance(d.get("start"), str):
            d["start"] = date.fromisoformat(d["start"])
        return cls(**d)


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    if sigma > 0:
        z = gaussian_filter(z, sigma=(0, sigma, sigma), mode="wrap")
    return z / z.std()


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetManifest, FeatureCube, dict]:
    """Smooth AR(1) noise channels plus a precipitation channel driven by one of them."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W, F = spec.grid_rows, spec.grid_cols, spec.n_features
    burn = spec.lag + 1
    n = spec.n_days + burn
    phi = spec.ar_coeff
    base = np.empty((n, H, W, F))
    for f in range(F):
        eps = _smooth_field(rng, (n, H, W), spec.spatial_sigma)
        x = np.empty_like(eps)
        x[0] = eps[0]
        for t in range(1, n):
            x[t] = phi * x[t - 1] + np.sqrt(1 - phi * phi) * eps[t]
        base[..., f] = x
    mask = spec.mask_array()
    base[:, ~mask, spec.driver] *= spec.background_scale
    s = base[:, mask, spec.driver].mean(axis=1)
    s = (s - s.mean()) / s.std()
    noise = spec.noise_std * rng.standard_normal(n)
    area = np.full(n, np.nan)
    area[burn:] = spec.resolved_offset() + spec.coeff * s[:-burn] + noise[burn:]
    n_clipped = int((area[burn:] < 0).sum())
    area = np.maximum(area, 0.0)
    # zero-mean spatial texture keeps the grid mean equal to the area target
    u = _smooth_field(rng, (n, H, W), spec.spatial_sigma)
    u -= u.mean(axis=(1, 2), keepdims=True)
    u /= np.abs(u).max(axis=(1, 2), keepdims=True) + 1e-12
    rain = area[:, None, None] * (1.0 + 0.5 * u)
    values = np.concatenate([base, rain[..., None]], axis=-1)[burn:]
    names = [f"x{i}" for i in range(F)] + ["tp"]
    dates = [spec.start + timedelta(days=i) for i in range(spec.n_days)]
    manifest = DatasetManifest(H, W, names, dates[0], dates[-1], city="synthetic",
                               provenance="synthetic", precip_variable="tp")
    descriptor = spec.to_dict()
    descriptor["n_clipped"] = n_clipped
    descriptor["driver_name"] = names[spec.driver]
    return manifest, FeatureCube(values, names, dates), descriptor


def planted_dataset(spec: SyntheticSpec, cfg: PipelineConfig | None = None) -> Dataset:
    """Synthetic bundle; by default only precipitation is lagged so that each
    (variable, day) pair lives in exactly one input channel."""
    manifest, cube, descriptor = generate_synthetic(spec)
    cfg = cfg or PipelineConfig(T=spec.T, lag_variables=(manifest.precip_variable,))
    return build_dataset(manifest, cube, replace(cfg, T=spec.T), synthetic=descriptor)
