"""Binary logistic scalability predictor.

The model maps a sampled metric vector to the log-odds that the kernel runs
faster on fused (scale-up) SMs. ``logit > 0`` means fuse.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .reconfig import Decision

FEATURES = (
    "control_divergent", "coalescing", "l1d_miss", "l1i_miss", "l1c_miss", "mshr",
    "load_inst_rate", "store_inst_rate", "noc", "concurrent_cta",
)
FRACTIONS = FEATURES[:-1]
LOGIT_CLAMP = 1000.0
DEFAULT_CONVENTION = (
    "all inputs are fractions in [0,1] except concurrent_cta "
    "(time-averaged resident CTAs per SM)"
)


class TrainingError(ValueError):
    """Training data cannot produce a model (empty or single-class)."""


class SamplingInconclusive(RuntimeError):
    """The sampling window retired no instructions."""


@dataclass(frozen=True)
class MetricVector:
    control_divergent: float = 0.0
    coalescing: float = 0.0
    l1d_miss: float = 0.0
    l1i_miss: float = 0.0
    l1c_miss: float = 0.0
    mshr: float = 0.0
    load_inst_rate: float = 0.0
    store_inst_rate: float = 0.0
    noc: float = 0.0
    concurrent_cta: float = 0.0
    avg_noc_latency: float = 0.0   # reported, never a model input

    def __post_init__(self):
        for name in FRACTIONS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")
        if self.concurrent_cta < 0:
            raise ValueError("concurrent_cta must be non-negative")

    def values(self) -> list[float]:
        return [getattr(self, f) for f in FEATURES]

    @classmethod
    def from_mapping(cls, data) -> "MetricVector":
        known = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in data.items() if k in known})


@dataclass
class PredictorModel:
    constant: float
    coefficients: dict
    metric_convention: str = DEFAULT_CONVENTION

    def __post_init__(self):
        keys = set(self.coefficients)
        if keys != set(FEATURES):
            missing = sorted(set(FEATURES) - keys)
            extra = sorted(keys - set(FEATURES))
            raise ValueError(f"model coefficients mismatch: missing={missing} extra={extra}")

    def weights(self) -> list[float]:
        return [self.coefficients[f] for f in FEATURES]

    def to_dict(self) -> dict:
        return {"constant": self.constant,
                "coefficients": {f: self.coefficients[f] for f in FEATURES},
                "metric_convention": self.metric_convention}


def load_model(path) -> PredictorModel:
    with open(path) as fh:
        data = json.load(fh)
    try:
        return PredictorModel(float(data["constant"]),
                              {k: float(v) for k, v in data["coefficients"].items()},
                              data.get("metric_convention", DEFAULT_CONVENTION))
    except KeyError as exc:
        raise ValueError(f"model file missing field {exc.args[0]}") from None


def save_model(model: PredictorModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def default_model() -> PredictorModel:
    """Coefficients shipped with the package."""
    with resources.as_file(resources.files("smfuse") / "data" / "default_model.json") as p:
        return load_model(p)


def constant_model(value: float) -> PredictorModel:
    """A model whose decision ignores the metrics (useful for forcing a path)."""
    return PredictorModel(value, {f: 0.0 for f in FEATURES}, "constant decision")


# -- evaluation ---------------------------------------------------------------

def impact_magnitudes(model: PredictorModel, x: MetricVector) -> dict:
    out = {"constant": model.constant}
    for f in FEATURES:
        out[f] = model.coefficients[f] * getattr(x, f)
    return out


def logit(model: PredictorModel, x: MetricVector) -> float:
    # fsum over the same terms keeps the impact identity exact
    return math.fsum(impact_magnitudes(model, x).values())


def normalized_impacts(impacts: dict) -> dict:
    peak = max((abs(v) for v in impacts.values()), default=0.0)
    if peak == 0.0:
        return {k: 0.0 for k in impacts}
    return {k: v / peak for k, v in impacts.items()}


def sigmoid(z: float) -> float:
    z = max(-LOGIT_CLAMP, min(LOGIT_CLAMP, z))
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def log_sigmoid(z: float) -> float:
    # no clamp: the log1p form is exact in both tails
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def probability(model: PredictorModel, x: MetricVector) -> float:
    return sigmoid(logit(model, x))


def complement(model: PredictorModel, x: MetricVector) -> float:
    """1 - P, evaluated without cancellation."""
    return sigmoid(-logit(model, x))


def predict_fuse(model: PredictorModel, x: MetricVector) -> Decision:
    return Decision.SCALE_UP if logit(model, x) > 0 else Decision.SCALE_OUT


# -- training -------------------------------------------------------------------

@dataclass
class TrainingSample:
    metrics: MetricVector
    label: bool


@dataclass
class TrainResult:
    model: PredictorModel
    accuracy: float
    history: list = field(default_factory=list)


def _sig(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_likelihood(params: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> float:
    """Mean log-likelihood minus (l2/2)|w|^2; ``params`` = [b0, w...]."""
    z = params[0] + X @ params[1:]
    ll = np.mean(y * z - np.logaddexp(0.0, z))
    return float(ll - 0.5 * l2 * np.dot(params[1:], params[1:]))


def gradient(params: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> np.ndarray:
    z = params[0] + X @ params[1:]
    r = y - _sig(z)
    g = np.empty_like(params)
    g[0] = r.mean()
    g[1:] = X.T @ r / len(y) - l2 * params[1:]
    return g


def train(samples, lr: float = 0.5, epochs: int = 3000, l2: float = 0.0) -> TrainResult:
    """Batch gradient ascent from zero on standardized inputs; the result is
    mapped back to raw metric units."""
    samples = list(samples)
    if len(samples) < 2:
        raise TrainingError("need at least two samples")
    y = np.array([1.0 if s.label else 0.0 for s in samples])
    if y.min() == y.max():
        raise TrainingError("all samples carry the same label; add runs where the other "
                            "configuration wins")
    X = np.array([s.metrics.values() for s in samples], dtype=float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    params = np.zeros(X.shape[1] + 1)
    history = []
    for epoch in range(epochs):
        params += lr * gradient(params, Z, y, l2)
        if epoch % 500 == 0:
            history.append(log_likelihood(params, Z, y, l2))
    w = params[1:] / sd
    b = params[0] - float(np.dot(params[1:], mu / sd))
    model = PredictorModel(float(b), {f: float(v) for f, v in zip(FEATURES, w)},
                           "trained on " + DEFAULT_CONVENTION)
    acc = accuracy(model, samples)
    return TrainResult(model, acc, history)


def accuracy(model: PredictorModel, samples) -> float:
    samples = list(samples)
    if not samples:
        return 0.0
    hits = sum((predict_fuse(model, s.metrics) is Decision.SCALE_UP) == s.label for s in samples)
    return hits / len(samples)


def read_samples(path) -> list[TrainingSample]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise TrainingError(f"{path}: no training rows")
    missing = [c for c in (*FEATURES, "label") if c not in rows[0]]
    if missing:
        raise TrainingError(f"{path}: missing columns {missing}")
    out = []
    for row in rows:
        label = str(row["label"]).strip().lower() in ("1", "true", "yes")
        out.append(TrainingSample(MetricVector(**{f: float(row[f]) for f in FEATURES}), label))
    return out


def write_samples(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*FEATURES, "label"])
        for s in samples:
            w.writerow([*s.metrics.values(), int(s.label)])


def read_metric_rows(path) -> list[MetricVector]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return [MetricVector(**{f: float(r.get(f) or 0.0) for f in FEATURES}) for r in rows]


def metrics_dict(x: MetricVector) -> dict:
    return asdict(x)
