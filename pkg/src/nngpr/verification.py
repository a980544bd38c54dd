"""Verification scores: area-weighted MSE, sliding-window SSIM, Gaussian CRPS,
interval coverage and a windowed bias/variance split of the MSE."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr
from scipy.stats import norm

from .errors import DataError
from .gridstore import GridField, latitude_weights

_SQRT_PI = math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _values(a):
    return a.values if isinstance(a, GridField) else np.asarray(a, dtype=np.float64)


def weighted_mse(y, yhat, weights=None) -> float:
    """(1/d) * sum_p w_p (y_p - yhat_p)^2 with weights of mean 1."""
    if isinstance(y, GridField) and isinstance(yhat, GridField) and y.spec != yhat.spec:
        raise DataError("fields are on different grids")
    yv, hv = _values(y), _values(yhat)
    if yv.shape != hv.shape:
        raise DataError(f"shape mismatch {yv.shape} vs {hv.shape}")
    if weights is None:
        if not isinstance(y, GridField):
            raise DataError("weights are required for raw arrays")
        weights = latitude_weights(y.spec)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-1] != yv.shape[-1]:
        raise DataError("weight vector does not match field size")
    return np.asarray(((yv - hv) ** 2) @ w / w.size)[()]


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None


def fit_window(config: SSIMConfig, shape) -> SSIMConfig:
    """Shrink the window to the largest odd size that fits a grid of ``shape``.

    Sigma scales with the window so the filter keeps its relative width.
    """
    limit = min(shape)
    if limit >= config.window:
        return config
    size = limit if limit % 2 else limit - 1
    if size < 1:
        raise DataError(f"grid {tuple(shape)} is too small for SSIM")
    return replace(config, window=size, sigma=config.sigma * size / config.window)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(a, g):
    # separable Gaussian filter, valid positions only
    a = sliding_window_view(a, g.size, axis=0) @ g
    return sliding_window_view(a, g.size, axis=1) @ g


def ssim(y, yhat, config: SSIMConfig | None = None) -> float:
    """Mean structural similarity over all fully contained Gaussian windows."""
    config = config or SSIMConfig()
    if isinstance(y, GridField) and isinstance(yhat, GridField):
        if y.spec != yhat.spec:
            raise DataError("fields are on different grids")
        a, b = y.grid, yhat.grid
    else:
        a, b = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DataError(f"ssim needs two equal 2-D grids, got {a.shape} and {b.shape}")
    if min(a.shape) < config.window:
        raise DataError(f"grid {a.shape} is smaller than the {config.window}x{config.window} window")
    r = config.data_range
    if r is None:
        r = max(a.max(), b.max()) - min(a.min(), b.min())
    if not r > 0:
        r = 1.0
    c1 = (config.k1 * r) ** 2
    c2 = (config.k2 * r) ** 2
    g = gaussian_window(config.window, config.sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def crps_gaussian(mu, sigma, y):
    """CRPS of N(mu, sigma^2) against observation y (closed form, vectorized)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise DataError("CRPS needs sigma > 0")
    z = (y - mu) / sigma
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / _SQRT_PI)
    return out[()] if out.ndim == 0 else out


def coverage(predictions, observations, level: float = 0.95) -> float:
    """Fraction of observations inside mu +/- z * sigma.

    ``predictions`` is an (N, 2) array-like of ``(mu, sigma)`` pairs.
    """
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    obs = np.asarray(observations, dtype=np.float64).ravel()
    if pred.shape[0] != obs.size:
        raise DataError(f"{pred.shape[0]} predictions for {obs.size} observations")
    if not 0 < level < 1:
        raise DataError(f"level must be in (0, 1), got {level}")
    if obs.size == 0:
        raise DataError("coverage of an empty set is undefined")
    return float(np.mean(interval_hits(pred[:, 0], pred[:, 1], obs, level)))


def interval_hits(mu, sigma, obs, level: float = 0.95):
    """Boolean array: observation inside the central ``level`` interval."""
    half = norm.ppf(0.5 + level / 2.0) * np.asarray(sigma, dtype=np.float64)
    dev = np.abs(np.asarray(obs, dtype=np.float64) - np.asarray(mu, dtype=np.float64))
    return dev <= half


@dataclass(frozen=True, eq=False)
class BiasVarSeries:
    """Per-window decomposition mse == bias2 + variance.

    ``bias`` is the signed area-weighted mean error; ``bias2`` aggregates the
    squared time-mean error per location, and ``variance`` the per-location
    temporal (population) variance of the error.
    """

    labels: tuple
    bias: np.ndarray
    bias2: np.ndarray
    variance: np.ndarray
    mse: np.ndarray

    def to_csv(self, path=None, method: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["window", "bias", "bias2", "variance", "mse"]
        w.writerow((["method"] if method else []) + head)
        for i, lab in enumerate(self.labels):
            w.writerow(([method] if method else []) + [
                lab, repr(float(self.bias[i])), repr(float(self.bias2[i])),
                repr(float(self.variance[i])), repr(float(self.mse[i]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def bias_variance(errors, windows, weights, labels=None) -> BiasVarSeries:
    """Split the area-weighted MSE of an (T, d) error series per time window.

    ``windows`` is a list of index arrays partitioning ``range(T)``.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 2:
        raise DataError("errors must be a (T, d) array")
    w = np.asarray(weights, dtype=np.float64)
    t = e.shape[0]
    seen = np.zeros(t, dtype=int)
    for k, idx in enumerate(windows):
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            raise DataError(f"window {k} is empty")
        seen[idx] += 1
    if np.any(seen != 1):
        raise DataError("windows do not partition the error series")
    bias, bias2, var, mse = [], [], [], []
    for idx in windows:
        block = e[np.asarray(idx, dtype=int)]
        mean_p = block.mean(axis=0)
        var_p = np.mean((block - mean_p) ** 2, axis=0)
        bias.append(mean_p @ w / w.size)
        bias2.append(mean_p ** 2 @ w / w.size)
        var.append(var_p @ w / w.size)
        mse.append(np.mean((block ** 2) @ w) / w.size)
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(len(windows)))
    return BiasVarSeries(labels, np.array(bias), np.array(bias2), np.array(var), np.array(mse))


METRICS = ("mse", "ssim", "crps", "coverage")


@dataclass
class ScoreTable:
    """Scores keyed by (method, window); CSV is window rows by metric/method columns."""

    rows: dict = field(default_factory=dict)

    def add(self, method: str, window: str, mse=math.nan, ssim=math.nan,
            crps=math.nan, coverage=math.nan):
        self.rows[(method, window)] = {"mse": float(mse), "ssim": float(ssim),
                                       "crps": float(crps), "coverage": float(coverage)}

    def get(self, method: str, window: str) -> dict:
        return self.rows[(method, window)]

    @property
    def methods(self) -> list:
        return list(dict.fromkeys(m for m, _ in self.rows))

    @property
    def windows(self) -> list:
        return list(dict.fromkeys(w for _, w in self.rows))

    def column(self, method: str, metric: str) -> np.ndarray:
        return np.array([self.rows[(method, w)][metric] for w in self.windows
                         if (method, w) in self.rows])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        methods = self.methods
        out.writerow(["window"] + [f"{metric}_{m}" for metric in METRICS for m in methods])
        for win in self.windows:
            row = [win]
            for metric in METRICS:
                for m in methods:
                    v = self.rows.get((m, win), {}).get(metric, math.nan)
                    row.append(repr(float(v)))
            out.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        table = cls()
        for row in reader:
            win = row[0]
            vals = {}
            for key, v in zip(header[1:], row[1:]):
                metric, method = key.split("_", 1)
                vals.setdefault(method, {})[metric] = float(v)
            for method, d in vals.items():
                table.add(method, win, **d)
        return table
