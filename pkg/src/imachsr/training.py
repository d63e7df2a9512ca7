"""The multi-point supervised training loop, evaluation and per-M overhead profiling."""

from __future__ import annotations

import json
import logging
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import supervision as S
from . import tensor as T
from .datagen import Dataset
from .metrics import ConfusionMatrix, summarize
from .netspec import Model, TapCriterion, NO_TAPS, forward, forward_with_taps
from .optim import SGD, Adam

log = logging.getLogger(__name__)

BYTES_PER_REAL = 8


class NumericalAbort(ArithmeticError):
    """Raised when a loss goes non-finite; carries the records completed so far."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    criterion: TapCriterion = NO_TAPS
    alpha: float | Sequence[float] = S.DEFAULT_ALPHA
    lam: float | Sequence[float] = S.DEFAULT_LAMBDA
    optimizer: str = "adam"
    lr: float = 0.01
    dataset: str | None = None
    log_path: str | None = None
    record_trace: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.dataset is not None and not os.path.exists(self.dataset):
            raise FileNotFoundError(self.dataset)

    def weights(self, m: int) -> S.LossWeights:
        def expand(v, name):
            if isinstance(v, (int, float)):
                return [float(v)] * m
            v = list(v)
            if len(v) == 1:
                return v * m
            if len(v) != m:
                raise ValueError(f"{name} has {len(v)} entries for {m} taps")
            return v

        return S.LossWeights(expand(self.alpha, "alpha"), expand(self.lam, "lambda"))


@dataclass
class EpochRecord:
    epoch: int
    loss: S.LossBreakdown
    grad_norm_sq_mean: float
    steps: int
    wall_time_s: float
    metrics: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.metrics is None:
            d.pop("metrics")
        return d


@dataclass
class TraceRecord:
    """Flattened parameters and per-component (unweighted) gradients at one step."""

    theta: np.ndarray
    grads: dict[str, np.ndarray]
    samples: dict[str, np.ndarray] = field(default_factory=dict)


def make_optimizer(model: Model, name: str, lr: float):
    # adapters first, then the backbone
    params = {**model.phi(), **model.theta()}
    if name == "adam":
        return Adam(params, lr=lr)
    return SGD(params, lr=lr)


def compute_losses(model: Model, x: T.Tensor, y: np.ndarray, weights: S.LossWeights):
    """Forward pass plus every loss term; returns (total, breakdown, ce, mi_terms, ne_terms)."""
    res = forward_with_taps(model, x)
    h, w = model.spec.height, model.spec.width
    ce = S.ce_loss(res.logits, y)
    taps = {tap.m: tap for tap in model.taps}
    mi_terms, ne_terms = [], []
    for m, z in res.taps:
        adapted = S.adapter_apply(z, taps[m].adapter, h, w)
        mi_terms.append(S.mi_loss(adapted, y))
        ne_terms.append(S.ne_reg(z))
    total, bd = S.total_loss(ce, mi_terms, ne_terms, weights)
    return total, bd, ce, mi_terms, ne_terms


def _flat(params: Sequence[T.Tensor]) -> np.ndarray:
    return np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params
    ])


def component_gradients(model: Model, ce, mi_terms, ne_terms) -> dict[str, np.ndarray]:
    params = model.parameters()
    comps = {"ce": ce}
    for m, (mi, ne) in enumerate(zip(mi_terms, ne_terms), start=1):
        comps[f"mi{m}"] = mi
        comps[f"ne{m}"] = ne
    out = {}
    for name, term in comps.items():
        model.zero_grad()
        T.backward(term)
        out[name] = _flat(params)
    model.zero_grad()
    return out


def train_step(model: Model, opt, x: T.Tensor, y: np.ndarray, weights: S.LossWeights,
               trace: list | None = None):
    try:
        total, bd, ce, mi_terms, ne_terms = compute_losses(model, x, y, weights)
    except T.NumericalError as exc:
        raise FloatingPointError(str(exc)) from exc
    if not np.isfinite(bd.total):
        raise FloatingPointError(f"non-finite loss: {bd}")
    if trace is not None:
        grads = component_gradients(model, ce, mi_terms, ne_terms)
        theta = np.concatenate([p.data.ravel() for p in model.parameters()])
        trace.append(TraceRecord(theta, grads))
    model.zero_grad()
    T.backward(total)
    gsq = float(sum(float(np.sum(p.grad * p.grad)) for p in model.parameters() if p.grad is not None))
    opt.step()
    return bd, gsq


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _mean_breakdown(items: list[S.LossBreakdown]) -> S.LossBreakdown:
    n = len(items)
    m = len(items[0].mi)
    return S.LossBreakdown(
        ce=sum(b.ce for b in items) / n,
        mi=[sum(b.mi[j] for b in items) / n for j in range(m)],
        ne=[sum(b.ne[j] for b in items) / n for j in range(m)],
        alpha=list(items[0].alpha),
        lam=list(items[0].lam),
        total=sum(b.total for b in items) / n,
    )


def train(config: TrainingConfig, model: Model, data: Dataset, eval_data: Dataset | None = None,
          trace: list | None = None):
    """Run the full loop; returns (model, epoch records).

    ``trace``, if given a list, receives a :class:`TraceRecord` per step (costly:
    one extra backward per loss component).
    """
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if data.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model expects {model.spec.num_classes}")
    if data.images.shape[1:] != (model.spec.in_channels, model.spec.height, model.spec.width):
        raise ValueError(f"dataset images {data.images.shape[1:]} do not match the model input")
    weights = config.weights(len(model.taps))
    opt = make_optimizer(model, config.optimizer, config.lr)
    images = data.images.astype(np.float64)
    labels = data.labels.astype(np.int64)
    records: list[EpochRecord] = []
    if config.log_path:
        open(config.log_path, "w").close()
    if config.record_trace and trace is None:
        trace = []
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        t0 = time.perf_counter()
        bds, gsqs = [], []
        for idx in batches(len(data), config.batch_size, rng):
            try:
                bd, gsq = train_step(model, opt, T.Tensor(images[idx]), labels[idx], weights, trace)
            except FloatingPointError as exc:
                raise NumericalAbort(f"epoch {epoch}: {exc}", records) from exc
            bds.append(bd)
            gsqs.append(gsq)
        rec = EpochRecord(
            epoch=epoch,
            loss=_mean_breakdown(bds),
            grad_norm_sq_mean=sum(gsqs) / len(gsqs),
            steps=len(bds),
            wall_time_s=time.perf_counter() - t0,
        )
        if eval_data is not None and len(eval_data):
            rec.metrics = evaluate(model, eval_data)
        records.append(rec)
        if config.log_path:
            with open(config.log_path, "a") as f:
                f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        log.info("epoch %d: total %.5f ce %.5f", epoch, rec.loss.total, rec.loss.ce)
    return model, records


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        x = T.Tensor(np.asarray(images[start:start + batch_size], dtype=np.float64))
        out.append(forward(model, x).data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: Model, data: Dataset) -> dict:
    if data.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model predicts {model.spec.num_classes}")
    cm = ConfusionMatrix(data.num_classes)
    cm.accumulate(predict(model, data.images), data.labels)
    summary = summarize(cm)
    summary["confusion"] = cm.counts.tolist()
    return summary


# ---------------------------------------------------------------------------
# overhead accounting


def tap_cache_bytes(model: Model, batch_size: int) -> int:
    spec = model.spec
    feats = sum(batch_size * c * h * w for c, h, w in (t.feature_dims for t in model.taps))
    adapted = len(model.taps) * batch_size * spec.width * spec.height * spec.num_classes
    return (feats + adapted) * BYTES_PER_REAL


def adapter_param_count(model: Model) -> int:
    k = model.spec.num_classes
    return sum(k * t.feature_dims[0] + k for t in model.taps)


def activation_bytes(model: Model, batch_size: int) -> int:
    spec = model.spec
    n = spec.in_channels * spec.height * spec.width
    n += sum(c * h * w for c, h, w in model.shapes)
    return batch_size * n * BYTES_PER_REAL + tap_cache_bytes(model, batch_size)


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line; exact for integer data."""
    exact = all(isinstance(v, int) for v in list(xs) + list(ys))
    conv = Fraction if exact else float
    x = [conv(v) for v in xs]
    y = [conv(v) for v in ys]
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxx = sum((a - mx) ** 2 for a in x)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    syy = sum((b - my) ** 2 for b in y)
    if syy == 0:
        return 1.0
    if sxx == 0:
        return 0.0
    slope = sxy / sxx
    ss_res = sum((b - (my + slope * (a - mx))) ** 2 for a, b in zip(x, y))
    return float(1 - ss_res / syy)


@dataclass
class OverheadRow:
    M: int
    time_median_s: float
    time_samples: int
    activation_bytes: int
    tap_cache_bytes: int
    adapter_params: int


@dataclass
class OverheadProfile:
    batch_size: int
    rows: list[OverheadRow]
    r2_tap_cache: float
    r2_adapter_params: float
    time_monotone: bool

    def to_dict(self) -> dict:
        return asdict(self)


def profile_overhead(config: TrainingConfig, model_family: Callable[[int], Model], M_values: Sequence[int],
                     data: Dataset, n_batches: int = 20, warmup: int = 2) -> OverheadProfile:
    """Analytic memory terms plus median per-batch step time for each M.

    Steps for the different M are interleaved round-robin so slow drift in
    machine load hits every M equally.
    """
    b = config.batch_size
    models = {m: model_family(m) for m in M_values}
    depths = {mod.depth for mod in models.values()}
    if len(depths) != 1:
        raise ValueError("profile needs one architecture for every M")
    opts = {m: make_optimizer(mod, config.optimizer, config.lr) for m, mod in models.items()}
    x = T.Tensor(data.images[:b].astype(np.float64))
    y = data.labels[:b].astype(np.int64)
    times: dict[int, list[float]] = {m: [] for m in M_values}
    for rep in range(warmup + n_batches):
        for m in M_values:
            weights = config.weights(m)
            t0 = time.perf_counter()
            train_step(models[m], opts[m], x, y, weights)
            dt = time.perf_counter() - t0
            if rep >= warmup:
                times[m].append(dt)
    rows = [
        OverheadRow(
            M=m,
            time_median_s=statistics.median(times[m]),
            time_samples=len(times[m]),
            activation_bytes=activation_bytes(models[m], b),
            tap_cache_bytes=tap_cache_bytes(models[m], b),
            adapter_params=adapter_param_count(models[m]),
        )
        for m in M_values
    ]
    ms = [r.M for r in rows]
    med = [r.time_median_s for r in rows]
    return OverheadProfile(
        batch_size=b,
        rows=rows,
        r2_tap_cache=linear_fit_r2(ms, [r.tap_cache_bytes for r in rows]),
        r2_adapter_params=linear_fit_r2(ms, [r.adapter_params for r in rows]),
        time_monotone=all(a <= c for a, c in zip(med, med[1:])),
    )
