"""Evaluating the nonconvex-SGD gradient-norm bound and checking it empirically.

For a loss ``L_T = L_CE + sum_m (alpha_m L_MI^m + lambda_m L_NE^m)`` whose
components are L_s-smooth with gradient bound G_s and variance bound sigma_s,
SGD with constant step ``eta / sqrt(T)`` satisfies

    (1/T) sum_t E||grad L_T(theta_t)||^2 <= 2 Delta / (eta sqrt T) + L_max eta / sqrt T * (G_T^2 + sigma_T^2)

with ``L_max = max(L_CE, alpha_m L_MI^m, lambda_m L_NE^m)`` and ``G_T^2``,
``sigma_T^2`` the weight-squared sums of the component constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .optim import schedule_rate
from .supervision import LossWeights

SLOPE_WINDOW = (-0.7, -0.3)


@dataclass(frozen=True)
class Constants:
    L: float
    G: float
    sigma: float

    def __post_init__(self):
        for name in ("L", "G", "sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class ComponentConstants:
    ce: Constants
    mi: list[Constants] = field(default_factory=list)
    ne: list[Constants] = field(default_factory=list)
    estimated: bool = False

    def __post_init__(self):
        if len(self.mi) != len(self.ne):
            raise ValueError("need one MI and one NE constant triple per tap")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BoundInputs:
    constants: ComponentConstants
    weights: LossWeights
    delta: float
    eta: float
    T: int

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if len(self.weights) != len(self.constants.mi):
            raise ValueError("weights and tap constants have different lengths")


def aggregate_constants(c: ComponentConstants, weights: LossWeights) -> tuple[float, float, float]:
    """Return ``(L_max, G_T^2, sigma_T^2)``."""
    if len(weights) != len(c.mi):
        raise ValueError(f"{len(weights)} weight pairs for {len(c.mi)} taps")
    l_max = c.ce.L
    g_sq = c.ce.G ** 2
    s_sq = c.ce.sigma ** 2
    for a, lam, mi, ne in zip(weights.alpha, weights.lam, c.mi, c.ne):
        l_max = max(l_max, a * mi.L, lam * ne.L)
        g_sq += a * a * mi.G ** 2 + lam * lam * ne.G ** 2
        s_sq += a * a * mi.sigma ** 2 + lam * lam * ne.sigma ** 2
    return l_max, g_sq, s_sq


def theorem_terms(b: BoundInputs) -> tuple[float, float]:
    """(initial-gap term, variance term) of the bound."""
    l_max, g_sq, s_sq = aggregate_constants(b.constants, b.weights)
    root = math.sqrt(b.T)
    return 2.0 * b.delta / (b.eta * root), l_max * b.eta / root * (g_sq + s_sq)


def theorem_bound(b: BoundInputs) -> float:
    gap, var = theorem_terms(b)
    return gap + var


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    ys = np.asarray(ys, dtype=np.float64)
    if np.any(ys <= 0):
        return float("nan")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------------------
# quadratic test problem with exact constants


@dataclass
class QuadraticProblem:
    """``f(theta) = 0.5 theta^T A theta`` observed through gradients with uniform noise in a cube.

    Noise ``xi`` is uniform on ``[-a, a]^d``, so ``||xi|| <= a sqrt(d)`` and
    ``E||xi||^2 = d a^2 / 3``.  When ``step * L <= 1`` the ball of radius
    ``R = max(||theta_0||, a sqrt(d) / mu)`` is invariant under the noisy
    iteration, hence ``||grad f|| <= L R`` along every trajectory.
    """

    A: np.ndarray
    theta0: np.ndarray
    noise: float

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.A)

    @property
    def smoothness(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def strong_convexity(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def noise_bound(self) -> float:
        return self.noise * math.sqrt(self.dim)

    @property
    def noise_std(self) -> float:
        return math.sqrt(self.dim * self.noise ** 2 / 3.0)

    @property
    def radius(self) -> float:
        return max(float(np.linalg.norm(self.theta0)), self.noise_bound / self.strong_convexity)

    @property
    def gradient_bound(self) -> float:
        return self.smoothness * self.radius

    def value(self, theta: np.ndarray) -> float:
        return 0.5 * float(theta @ self.A @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ theta

    def constants(self) -> ComponentConstants:
        return ComponentConstants(Constants(self.smoothness, self.gradient_bound, self.noise_std))


def make_quadratic(seed: int, dim: int = 10, eig_range=(1.0, 4.0), theta0_norm: float = 5.0,
                   noise: float = 0.5, start: str = "random") -> QuadraticProblem:
    """Random rotation of ``diag(linspace(eig_range))``.

    ``start`` is ``random`` (uniform direction), ``top`` (top eigenvector, so the
    gradient bound is attained at theta_0) or ``optimum`` (theta_0 = 0).
    """
    rng = np.random.default_rng([seed, 0])
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    lam = np.linspace(eig_range[0], eig_range[1], dim)
    A = (q * lam) @ q.T
    A = 0.5 * (A + A.T)
    if start == "random":
        v = rng.normal(size=dim)
        theta0 = theta0_norm * v / np.linalg.norm(v)
    elif start == "top":
        theta0 = theta0_norm * q[:, -1]
    elif start == "optimum":
        theta0 = np.zeros(dim)
    else:
        raise ValueError(f"unknown start {start!r}")
    return QuadraticProblem(A, theta0, noise)


def run_quadratic_sgd(problem: QuadraticProblem, T: int, eta: float, seed: int, n_samples: int = 0,
                      trace: list | None = None) -> float:
    """SGD with step eta/sqrt(T); returns (1/T) sum_{t=1..T} ||grad f(theta_t)||^2."""
    from .training import TraceRecord

    rate = schedule_rate(eta, T)
    if rate * problem.smoothness > 1.0:
        raise ValueError("step * L > 1: the closed-form gradient bound does not apply")
    rng = np.random.default_rng([seed, 1, T])
    a = problem.noise
    theta = problem.theta0.copy()
    acc = 0.0
    for _ in range(T):
        g = problem.grad(theta)
        acc += float(g @ g)
        xi = rng.uniform(-a, a, size=problem.dim) if a > 0 else 0.0
        if trace is not None:
            samples = {}
            if n_samples:
                samples["ce"] = g + rng.uniform(-a, a, size=(n_samples, problem.dim))
            trace.append(TraceRecord(theta.copy(), {"ce": g.copy()}, samples))
        theta = theta - rate * (g + xi)
    return acc / T


@dataclass
class RateEntry:
    T: int
    rate: float
    average: float
    initial_gap: float
    variance_term: float
    bound: float
    holds: bool


@dataclass
class RateReport:
    problem: str
    seed: int
    eta: float
    delta: float
    constants: ComponentConstants
    weights: LossWeights
    entries: list[RateEntry]
    slope: float
    slope_window: tuple[float, float] = SLOPE_WINDOW
    estimated: bool = False

    @property
    def slope_ok(self) -> bool:
        lo, hi = self.slope_window
        return lo <= self.slope <= hi

    @property
    def all_hold(self) -> bool:
        return all(e.holds for e in self.entries)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slope_window"] = list(self.slope_window)
        d["slope_ok"] = self.slope_ok
        d["all_hold"] = self.all_hold
        return d


def _entries(constants, weights, delta, eta, T_values, averages) -> list[RateEntry]:
    out = []
    for T, avg in zip(T_values, averages):
        gap, var = theorem_terms(BoundInputs(constants, weights, delta, eta, T))
        out.append(RateEntry(T, schedule_rate(eta, T), avg, gap, var, gap + var, avg <= gap + var))
    return out


def probe_quadratic(T_values: Sequence[int], seed: int, eta: float = 1.0, **problem_kw) -> RateReport:
    problem = make_quadratic(seed, **problem_kw)
    averages = [run_quadratic_sgd(problem, T, eta, seed) for T in T_values]
    constants = problem.constants()
    weights = LossWeights([], [])
    delta = problem.value(problem.theta0)
    return RateReport(
        problem="quadratic", seed=seed, eta=eta, delta=delta, constants=constants, weights=weights,
        entries=_entries(constants, weights, delta, eta, T_values, averages),
        slope=loglog_slope(T_values, averages),
    )


def probe_toy_net(T_values: Sequence[int], seed: int, eta: float = 0.5, batch_size: int = 4) -> RateReport:
    """Same measurement on a small tapped net; constants are plug-in estimates from the trace."""
    from . import datagen, netspec, supervision as S, tensor as Tn, training

    data = datagen.generate(datagen.GenSpec(count=16, height=8, width=8, num_classes=3, noise=0.05,
                                            seed=seed, min_shape=2))
    spec = netspec.preset_spec("toy6", 1, 8, 8, 3)
    crit = netspec.TapCriterion("explicit_indices", (2, 4))
    m_taps = 2
    weights = S.LossWeights.uniform(m_taps)
    x_all = Tn.Tensor(data.images.astype(np.float64))
    y_all = data.labels.astype(np.int64)

    averages, trace_all, delta = [], [], 0.0
    for T in T_values:
        model = netspec.build_model(spec, seed, crit)
        rate = schedule_rate(eta, T)
        params = {**model.phi(), **model.theta()}
        rng = np.random.default_rng([seed, 2, T])
        acc = 0.0
        for t in range(T):
            total, bd, ce, mi, ne = training.compute_losses(model, x_all, y_all, weights)
            if t == 0 and T == T_values[0]:
                # L_T >= -sum(alpha log K) - sum(lambda log C_m), so this over-estimates the gap
                floor = -sum(a * math.log(3) for a in weights.alpha)
                floor -= sum(lam * math.log(tap.feature_dims[0]) for lam, tap in zip(weights.lam, model.taps))
                delta = bd.total - floor
            full = training.component_gradients(model, ce, mi, ne)
            model.zero_grad()
            Tn.backward(total)
            acc += sum(float(np.sum(p.grad ** 2)) for p in model.parameters())
            idx = rng.choice(len(data), size=batch_size, replace=False)
            xb, yb = Tn.Tensor(data.images[idx].astype(np.float64)), y_all[idx]
            _, _, ceb, mib, neb = training.compute_losses(model, xb, yb, weights)
            sample = training.component_gradients(model, ceb, mib, neb)
            theta = np.concatenate([p.data.ravel() for p in model.parameters()])
            trace_all.append(training.TraceRecord(theta, full, {k: v[None] for k, v in sample.items()}))
            model.zero_grad()
            totb, _ = S.total_loss(ceb, mib, neb, weights)
            Tn.backward(totb)
            for p in params.values():
                p.data = p.data - rate * p.grad
        averages.append(acc / T)
    constants = estimate_constants_from_trace(trace_all)
    return RateReport(
        problem="toy_net", seed=seed, eta=eta, delta=delta, constants=constants, weights=weights,
        entries=_entries(constants, weights, delta, eta, T_values, averages),
        slope=loglog_slope(T_values, averages), estimated=True,
    )


def empirical_rate_probe(problem: str, T_values: Sequence[int], seed: int, **kw) -> RateReport:
    if problem == "quadratic":
        return probe_quadratic(T_values, seed, **kw)
    if problem == "toy_net":
        return probe_toy_net(T_values, seed, **kw)
    raise ValueError(f"unknown problem kind {problem!r}; expected 'quadratic' or 'toy_net'")


# ---------------------------------------------------------------------------
# plug-in constants from a gradient trace


def estimate_constants_from_trace(records: Sequence) -> ComponentConstants:
    """Lower-bound estimates of the per-component suprema.

    G_s: largest observed gradient norm.  L_s: largest secant ratio between
    consecutive records.  sigma_s: root of the pooled squared deviation of the
    per-record samples from the record's gradient when samples are present,
    otherwise of the across-record spread of the gradients.
    """
    if len(records) < 2:
        raise ValueError(f"need at least 2 trace records, got {len(records)}")
    names = list(records[0].grads)
    est = {}
    for name in names:
        gs = np.stack([r.grads[name] for r in records])
        G = float(np.max(np.linalg.norm(gs, axis=1)))
        L = 0.0
        for r0, r1, g0, g1 in zip(records, records[1:], gs, gs[1:]):
            step = float(np.linalg.norm(r1.theta - r0.theta))
            if step > 0:
                L = max(L, float(np.linalg.norm(g1 - g0)) / step)
        if all(name in r.samples for r in records):
            dev = [np.sum((r.samples[name] - r.grads[name]) ** 2, axis=1) for r in records]
            sigma = math.sqrt(float(np.mean(np.concatenate(dev))))
        else:
            sigma = math.sqrt(float(np.mean(np.sum((gs - gs.mean(axis=0)) ** 2, axis=1))))
        est[name] = Constants(L, G, sigma)
    m = sum(1 for n in names if n.startswith("mi"))
    return ComponentConstants(
        ce=est["ce"],
        mi=[est[f"mi{j}"] for j in range(1, m + 1)],
        ne=[est[f"ne{j}"] for j in range(1, m + 1)],
        estimated=True,
    )
