"""NN-GPR: trend plus neural-network-kernel GP shared across grid locations.

Every target location p is modelled as

    Y_t(p) = beta^T Xbar_t + f_p(X_t) + eps,   f_p ~ GP(0, K_theta),  eps ~ N(0, s2)

with one kernel and one noise variance for all locations. The joint
covariance over (time, location) is (K_theta + s2 I_n) kron I_d, so the
likelihood needs a single n x n Cholesky factorization.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotri
from scipy.stats import norm

from .bundle import read_bundle, write_bundle
from .errors import (CompatibilityError, ConditioningError, DataError, FormatError,
                     NumericalError, OptimizationError, SingularFitError)
from .gridstore import EnsembleSnapshot, GridField, GridSpec, TrainingSet
from .kernel import KernelParams, kernel_cross_from_gram, kernel_from_gram

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class ModelParams:
    kernel: KernelParams
    noise_var: float

    def __post_init__(self):
        if not (self.noise_var > 0 and math.isfinite(self.noise_var)):
            raise DataError(f"noise variance must be positive, got {self.noise_var}")

    @classmethod
    def from_log(cls, theta, depth):
        w, b, s = np.exp(np.asarray(theta, dtype=np.float64))
        return cls(KernelParams(float(w), float(b), depth), float(s))

    def to_log(self) -> np.ndarray:
        k = self.kernel
        if k.sigma_b2 <= 0:
            raise DataError("log-space optimization needs sigma_b2 > 0")
        return np.log([k.sigma_w2, k.sigma_b2, self.noise_var])

    def to_json(self) -> dict:
        k = self.kernel
        return {"sigma_w2": k.sigma_w2, "sigma_b2": k.sigma_b2, "depth": k.depth,
                "noise_var": self.noise_var}

    @classmethod
    def from_json(cls, doc):
        return cls(KernelParams(float(doc["sigma_w2"]), float(doc["sigma_b2"]),
                                int(doc["depth"])), float(doc["noise_var"]))


@dataclass(frozen=True)
class OptimizerSettings:
    """Adam on (log sigma_w2, log sigma_b2, log noise_var).

    Steps that would raise the loss are rejected and the step size halved,
    so the recorded loss trace never increases. ``batch_size`` switches to
    plain stochastic Adam over random location subsets (off by default).
    """

    step: float = 0.02
    max_iter: int = 500
    tol: float = 1e-6
    patience: int = 10
    fd_step: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class TrendModel:
    beta: np.ndarray
    intercept: bool = False

    def predict(self, member_means) -> np.ndarray:
        mm = np.atleast_2d(np.asarray(member_means, dtype=np.float64))
        if self.intercept:
            out = self.beta[0] + mm @ self.beta[1:]
        else:
            out = mm @ self.beta
        return out

    def to_json(self) -> dict:
        return {"beta": [float(b) for b in self.beta], "intercept": self.intercept}


def fit_trend(training: TrainingSet, intercept: bool = False, ridge: float = 0.0) -> TrendModel:
    """Least-squares regression of target spatial means on member spatial means."""
    design = training.member_means
    if intercept:
        design = np.column_stack([np.ones(training.n), design])
    y = training.target_means
    n, cols = design.shape
    if n < cols:
        raise SingularFitError(f"trend needs at least {cols} samples, got {n}")
    if ridge > 0:
        beta = np.linalg.solve(design.T @ design + ridge * np.eye(cols), design.T @ y)
    else:
        if np.linalg.matrix_rank(design) < cols:
            raise SingularFitError(
                "member means are collinear; trend regression is rank deficient "
                "(pass ridge > 0 to regularize)")
        beta = np.linalg.lstsq(design, y, rcond=None)[0]
    return TrendModel(beta, intercept)


def residual_targets(training: TrainingSet, trend: TrendModel) -> np.ndarray:
    """(n, d) targets with the trend scalar removed at every location."""
    return training.targets.frames - trend.predict(training.member_means)[:, None]


def jittered_cholesky(a):
    """Lower Cholesky factor, adding diagonal jitter only if plain factorization fails.

    Returns ``(L, jitter)``.
    """
    n = a.shape[0]
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(a) / n, np.finfo(float).tiny)
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(a + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise ConditioningError(f"matrix not positive definite after jitter {jitter / 10:.3g}",
                            jitter=jitter / 10)


def _kron_loss(cov, scatter, d):
    # sum_p Y_p^T A^-1 Y_p == tr(A^-1 R R^T); one Cholesky serves both terms
    chol, _ = jittered_cholesky(cov)
    inv, info = dpotri(chol, lower=1)
    if info != 0:
        raise ConditioningError(f"dpotri failed with info={info}")
    inv = np.tril(inv) + np.tril(inv, -1).T
    quad = float(np.sum(inv * scatter))
    return quad + d * 2.0 * float(np.sum(np.log(np.diag(chol))))


class _Objective:
    """Kronecker-factored negative log-likelihood in log-parameter space."""

    def __init__(self, inputs, residuals, depth):
        inputs = np.asarray(inputs, dtype=np.float64)
        self.gram = inputs @ inputs.T / inputs.shape[1]
        self.depth = depth
        self.set_residuals(residuals)

    def set_residuals(self, residuals):
        r = np.asarray(residuals, dtype=np.float64)
        self.n, self.d = r.shape
        self.scatter = r @ r.T

    def covariance(self, theta):
        p = ModelParams.from_log(theta, self.depth)
        k = kernel_from_gram(self.gram, p.kernel)
        k[np.diag_indices_from(k)] += p.noise_var
        return k

    def __call__(self, theta) -> float:
        return _kron_loss(self.covariance(theta), self.scatter, self.d)

    def gradient(self, theta, h):
        theta = np.asarray(theta, dtype=np.float64)
        g = np.empty(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[i] = (self(theta + e) - self(theta - e)) / (2.0 * h)
        return g


def loss(training: TrainingSet, params: ModelParams, trend: TrendModel) -> float:
    """sum_p Y_p^T (K + s2 I)^-1 Y_p + d log|K + s2 I| on trend residuals."""
    obj = _Objective(training.inputs, residual_targets(training, trend), params.kernel.depth)
    k = kernel_from_gram(obj.gram, params.kernel)
    k[np.diag_indices_from(k)] += params.noise_var
    return _kron_loss(k, obj.scatter, obj.d)


def loss_gradient(training: TrainingSet, params: ModelParams, trend: TrendModel,
                  step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient w.r.t. (log sigma_w2, log sigma_b2, log noise_var)."""
    obj = _Objective(training.inputs, residual_targets(training, trend), params.kernel.depth)
    return obj.gradient(params.to_log(), step)


@dataclass(frozen=True, eq=False)
class FitState:
    params: ModelParams
    trend: TrendModel
    standardizers: tuple
    member_layout: tuple
    target_spec: GridSpec
    train_times: np.ndarray
    inputs: np.ndarray
    residual_targets: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0
    member_names: tuple = ()
    trace: tuple = ()
    converged: bool = False
    units: str = ""
    variable: str = ""
    alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", cho_solve((self.chol, True), self.residual_targets))
        x = self.inputs
        object.__setattr__(self, "_sq", np.einsum("ij,ij->i", x, x) / x.shape[1])

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.residual_targets.shape[1]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True, eq=False)
class PosteriorPrediction:
    time: int
    mean_field: GridField
    latent_var: float
    noise_var: float

    @property
    def predictive_var(self) -> float:
        return self.latent_var + self.noise_var

    @property
    def predictive_std(self) -> float:
        return math.sqrt(self.predictive_var)

    def interval(self, level: float = 0.95):
        """Central ``level`` prediction interval bounds at every location."""
        z = norm.ppf(0.5 + level / 2.0)
        half = z * self.predictive_std
        return self.mean_field.values - half, self.mean_field.values + half


def default_init(residuals, depth: int = 10) -> ModelParams:
    var = float(np.var(residuals))
    return ModelParams(KernelParams(1.6, 0.1, depth), 0.1 * var if var > 0 else 1e-3)


def fit(training: TrainingSet, init: ModelParams | None = None,
        opt: OptimizerSettings | None = None, *, intercept: bool = False,
        trend_ridge: float = 0.0, member_names=(), depth: int | None = None) -> FitState:
    """Estimate trend and kernel/noise parameters by maximum likelihood."""
    opt = opt or OptimizerSettings()
    if training.n < 2:
        raise DataError("fitting needs at least 2 training samples")
    trend = fit_trend(training, intercept, trend_ridge)
    resid = residual_targets(training, trend)
    if init is None:
        init = default_init(resid, depth or 10)
    obj = _Objective(training.inputs, resid, init.kernel.depth)
    if opt.batch_size:
        theta, trace, converged = _adam_stochastic(obj, init.to_log(), opt, resid)
        obj.set_residuals(resid)
    else:
        theta, trace, converged = _adam_monotone(obj, init.to_log(), opt)
    params = ModelParams.from_log(theta, init.kernel.depth)
    chol, jitter = jittered_cholesky(obj.covariance(theta))
    first = training.snapshots[0]
    return FitState(
        params=params, trend=trend, standardizers=tuple(training.standardizers),
        member_layout=first.layout, target_spec=training.targets.spec,
        train_times=training.targets.times.copy(), inputs=np.array(training.inputs),
        residual_targets=resid, chol=chol, jitter=jitter,
        member_names=tuple(member_names), trace=tuple(trace), converged=converged,
        units=training.targets.units, variable=training.targets.variable)


def _safe(obj, theta):
    try:
        v = obj(theta)
    except NumericalError:
        return math.inf
    return v if math.isfinite(v) else math.inf


def _adam_monotone(obj, theta, opt: OptimizerSettings):
    theta = np.array(theta, dtype=np.float64)
    f = _safe(obj, theta)
    trace = [f]
    if not math.isfinite(f):
        raise OptimizationError("loss is not finite at the initial parameters", trace)
    m = np.zeros(3)
    v = np.zeros(3)
    lr = opt.step
    stall = 0
    for it in range(1, opt.max_iter + 1):
        g = obj.gradient(theta, opt.fd_step)
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient at iteration {it}", trace)
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        mhat = m / (1 - opt.beta1 ** it)
        vhat = v / (1 - opt.beta2 ** it)
        cand = theta - lr * mhat / (np.sqrt(vhat) + opt.eps)
        fc = _safe(obj, cand)
        if fc <= f:
            delta = f - fc
            theta, f = cand, fc
            lr = min(opt.step, lr * 1.1)
        else:
            delta = 0.0
            lr *= 0.5
        trace.append(f)
        stall = stall + 1 if delta < opt.tol * (1 + abs(f)) else 0
        if stall >= opt.patience:
            log.debug("converged after %d iterations, loss %.6g", it, f)
            return theta, trace, True
    return theta, trace, False


def _adam_stochastic(obj, theta, opt: OptimizerSettings, resid):
    rng = np.random.default_rng(opt.seed)
    d = resid.shape[1]
    b = min(int(opt.batch_size), d)
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros(3)
    v = np.zeros(3)
    trace = []
    for it in range(1, opt.max_iter + 1):
        cols = np.sort(rng.choice(d, size=b, replace=False))
        obj.set_residuals(resid[:, cols] * math.sqrt(d / b))
        obj.d = d
        trace.append(obj(theta))
        g = obj.gradient(theta, opt.fd_step)
        if not (math.isfinite(trace[-1]) and np.all(np.isfinite(g))):
            raise OptimizationError(f"divergence at iteration {it}", trace)
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        theta = theta - opt.step * (m / (1 - opt.beta1 ** it)) / (
            np.sqrt(v / (1 - opt.beta2 ** it)) + opt.eps)
    return theta, trace, False


def _check_snapshot(state: FitState, snap: EnsembleSnapshot):
    if snap.d_in != state.d_in:
        raise CompatibilityError(f"snapshot d_in={snap.d_in}, fit expects {state.d_in}")
    if snap.member_fields and snap.layout != state.member_layout:
        raise CompatibilityError(
            f"snapshot member layout {snap.layout} != fitted layout {state.member_layout}")
    if snap.m != len(state.standardizers) and state.standardizers:
        raise CompatibilityError(f"snapshot has {snap.m} members, fit expects "
                                 f"{len(state.standardizers)}")


def predict(state: FitState, snapshot: EnsembleSnapshot) -> PosteriorPrediction:
    """Posterior predictive mean field and (location-independent) variance."""
    _check_snapshot(state, snapshot)
    x = snapshot.x_vec
    cross = state.inputs @ x / state.d_in
    kxy, _, kmm = kernel_cross_from_gram(cross[:, None], state._sq,
                                         np.array([x @ x / state.d_in]), state.params.kernel)
    k_star = kxy[:, 0]
    trend = float(state.trend.predict(snapshot.member_means)[0])
    mean = trend + k_star @ state.alpha
    w = solve_triangular(state.chol, k_star, lower=True)
    latent = max(float(kmm[0] - w @ w), 0.0)
    field_ = GridField(state.target_spec, mean, state.units, state.variable)
    return PosteriorPrediction(int(snapshot.time), field_, latent, state.params.noise_var)


def predict_series(state: FitState, snapshots, threads: int = 1) -> list[PosteriorPrediction]:
    snapshots = list(snapshots)
    if threads > 1 and len(snapshots) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda s: predict(state, s), snapshots))
    return [predict(state, s) for s in snapshots]


def with_params(state: FitState, params: ModelParams) -> FitState:
    """Refactor a fit state for different hyperparameters (same data and trend)."""
    obj = _Objective(state.inputs, state.residual_targets, params.kernel.depth)
    chol, jitter = jittered_cholesky(obj.covariance(params.to_log()))
    return replace(state, params=params, chol=chol, jitter=jitter)


def check_members(state: FitState, names) -> None:
    """Raise CompatibilityError unless ``names`` matches the fitted member order."""
    names = tuple(names)
    if state.member_names and names != state.member_names:
        raise CompatibilityError(
            f"member order {list(names)} differs from fitted order {list(state.member_names)}")


FIT_SCHEMA = "nngpr.fitstate/1"


def save_fit(state: FitState, stem):
    """Write ``<stem>.json`` + ``<stem>.bin``; the reload is bit-exact."""
    header = {
        "schema": FIT_SCHEMA,
        "params": state.params.to_json(),
        "trend_intercept": state.trend.intercept,
        "member_layout": [list(s) for s in state.member_layout],
        "member_names": list(state.member_names),
        "jitter": state.jitter,
        "converged": state.converged,
        "units": state.units,
        "variable": state.variable,
    }
    arrays = {
        "trend_beta": state.trend.beta,
        "standardizers": np.array(state.standardizers, dtype=np.float64).reshape(-1, 2),
        "target_lats": state.target_spec.lats,
        "target_lons": state.target_spec.lons,
        "train_times": state.train_times.astype(np.float64),
        "inputs": state.inputs,
        "residual_targets": state.residual_targets,
        "chol": state.chol,
        "trace": np.array(state.trace, dtype=np.float64),
    }
    return write_bundle(stem, header, arrays)


def load_fit(stem) -> FitState:
    doc, a = read_bundle(stem, FIT_SCHEMA)
    try:
        return FitState(
            params=ModelParams.from_json(doc["params"]),
            trend=TrendModel(a["trend_beta"], bool(doc["trend_intercept"])),
            standardizers=tuple((float(m), float(s)) for m, s in a["standardizers"]),
            member_layout=tuple(tuple(int(v) for v in s) for s in doc["member_layout"]),
            target_spec=GridSpec(a["target_lats"], a["target_lons"]),
            train_times=a["train_times"].astype(np.int64),
            inputs=a["inputs"], residual_targets=a["residual_targets"], chol=a["chol"],
            jitter=float(doc["jitter"]), member_names=tuple(doc["member_names"]),
            trace=tuple(float(v) for v in a["trace"]), converged=bool(doc["converged"]),
            units=doc["units"], variable=doc["variable"])
    except KeyError as exc:
        raise FormatError(f"fit state is missing {exc}", field=str(exc)) from exc
