"""Reference integration methods: ensemble average (EA), skill/independence
weighted ensemble average (WEA) and pointwise linear regression (LM).

All three work on members resampled to the target grid and return per-location
Gaussian predictive distributions ``(mean, variance)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .bundle import read_bundle, write_bundle
from .errors import DataError, NumericalError
from .gridstore import FieldSeries, GridField, GridSpec, latitude_weights

SCHEMA = "nngpr.baseline/1"


def _axis_weights(src, tgt, periodic):
    """Left index and right-weight for 1-D linear interpolation of ``tgt`` on ``src``."""
    n = src.size
    if periodic:
        if n == 1:
            return np.zeros(tgt.size, int), np.zeros(tgt.size, int), np.zeros(tgt.size)
        ext = np.append(src, src[0] + 360.0)
        t = src[0] + np.mod(tgt - src[0], 360.0)
        j = np.clip(np.searchsorted(ext, t, side="right") - 1, 0, n - 1)
        w = (t - ext[j]) / (ext[j + 1] - ext[j])
        return j, (j + 1) % n, w
    lo, hi = src[0], src[-1]
    if np.any(tgt < lo) or np.any(tgt > hi):
        bad = tgt[(tgt < lo) | (tgt > hi)][0]
        raise DataError(f"target latitude {bad:g} outside source range [{lo:g}, {hi:g}]; "
                        "extrapolation is not supported")
    if n == 1:
        return np.zeros(tgt.size, int), np.zeros(tgt.size, int), np.zeros(tgt.size)
    i = np.clip(np.searchsorted(src, tgt, side="right") - 1, 0, n - 2)
    w = (tgt - src[i]) / (src[i + 1] - src[i])
    return i, i + 1, w


def bilinear_operator(source: GridSpec, target: GridSpec) -> sparse.csr_matrix:
    """Sparse (d_target, d_source) bilinear interpolation matrix, periodic in longitude."""
    lat_order = np.argsort(source.lats)
    lon_order = np.argsort(source.lons)
    i0, i1, wa = _axis_weights(source.lats[lat_order], target.lats, periodic=False)
    j0, j1, wo = _axis_weights(source.lons[lon_order], target.lons, periodic=True)
    i0, i1 = lat_order[i0], lat_order[i1]
    j0, j1 = lon_order[j0], lon_order[j1]
    nlon = source.n_lon
    rows = np.arange(target.size)
    a = np.repeat(np.arange(target.n_lat), target.n_lon)
    o = np.tile(np.arange(target.n_lon), target.n_lat)
    cols = np.concatenate([i0[a] * nlon + j0[o], i0[a] * nlon + j1[o],
                           i1[a] * nlon + j0[o], i1[a] * nlon + j1[o]])
    vals = np.concatenate([(1 - wa[a]) * (1 - wo[o]), (1 - wa[a]) * wo[o],
                           wa[a] * (1 - wo[o]), wa[a] * wo[o]])
    op = sparse.csr_matrix((vals, (np.tile(rows, 4), cols)), shape=(target.size, source.size))
    op.sum_duplicates()
    return op


def regrid_bilinear(field_: GridField, target: GridSpec) -> GridField:
    if field_.spec == target:
        return field_
    op = bilinear_operator(field_.spec, target)
    return GridField(target, op @ field_.values, field_.units, field_.variable)


def regrid_series(series: FieldSeries, target: GridSpec) -> FieldSeries:
    if series.spec == target:
        return series
    op = bilinear_operator(series.spec, target)
    return FieldSeries(target, series.times, (op @ series.frames.T).T,
                       series.units, series.variable)


@dataclass(frozen=True, eq=False)
class CommonGridEnsemble:
    """Members on the target grid; ``values`` has shape (n_time, m, d)."""

    spec: GridSpec
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[2] != self.spec.size:
            raise DataError(f"ensemble values shape {v.shape} does not match grid size "
                            f"{self.spec.size}")
        if not np.all(np.isfinite(v)):
            raise DataError("ensemble contains non-finite values")
        times = np.atleast_1d(np.asarray(self.times, dtype=np.int64))
        if times.size != v.shape[0]:
            raise DataError(f"{times.size} time codes for {v.shape[0]} frames")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", times)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_members(cls, members, target: GridSpec) -> "CommonGridEnsemble":
        members = list(members)
        if not members:
            raise DataError("ensemble has no members")
        regridded = [regrid_series(s, target) for s in members]
        times = regridded[0].times
        for i, s in enumerate(regridded):
            if not np.array_equal(s.times, times):
                raise DataError(f"member {i} is not time-aligned", index=i)
        return cls(target, times, np.stack([s.frames for s in regridded], axis=1))

    def select(self, mask) -> "CommonGridEnsemble":
        return CommonGridEnsemble(self.spec, self.times[mask], self.values[mask])


def _weighted_stats(values, weights):
    """Weighted member mean and reliability-weighted unbiased variance over axis 1."""
    w = np.asarray(weights, dtype=np.float64)
    mean = np.einsum("tmd,m->td", values, w)
    dev = values - mean[:, None, :]
    var = np.einsum("tmd,m->td", dev * dev, w)
    denom = 1.0 - np.sum(w * w)
    if denom > 1e-12:
        var /= denom
    return mean, var


def ensemble_average(ensemble: CommonGridEnsemble):
    """Per-location member mean and unbiased inter-member variance."""
    if ensemble.m < 2:
        raise DataError("inter-member variance needs at least 2 members")
    return _weighted_stats(ensemble.values, np.full(ensemble.m, 1.0 / ensemble.m))


def _rmse(a, b, w):
    """Area-weighted RMSE between (n, d) arrays pooled over time."""
    return float(np.sqrt(np.mean(((a - b) ** 2) @ w) / w.size))


def wea_weights(skill, similarity, sigma_d, sigma_s):
    """Skill/independence weights from member-target and member-member RMSEs."""
    skill = np.asarray(skill, dtype=np.float64)
    sim = np.asarray(similarity, dtype=np.float64)
    m = skill.size
    if not (sigma_d > 0 and sigma_s > 0):
        raise DataError("WEA scales must be positive")
    off = ~np.eye(m, dtype=bool)
    indep = 1.0 + np.sum(np.where(off, np.exp(-(sim / sigma_s) ** 2), 0.0), axis=1)
    logw = -(skill / sigma_d) ** 2 - np.log(indep)
    if not np.any(np.isfinite(logw)):
        raise NumericalError("all WEA weights underflow (member errors are not finite)")
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    w = np.exp(logw - np.max(logw))
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class BaselineModel:
    kind: str
    weights: np.ndarray | None = None
    sigma_d: float | None = None
    sigma_s: float | None = None
    intercept: np.ndarray | None = None     # (d,)
    coef: np.ndarray | None = None          # (d, m)
    x_mean: np.ndarray | None = None        # (d, m)
    gram_inv: np.ndarray | None = None      # (d, m, m) centered (X^T X)^-1
    resid_var: np.ndarray | None = None     # (d,)
    n_train: int = 0
    ridge_locations: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def predict(self, ensemble: CommonGridEnsemble):
        """Predictive ``(mean, variance)``, each of shape (n_time, d)."""
        if self.kind == "EA":
            return ensemble_average(ensemble)
        if self.kind == "WEA":
            if self.weights.size != ensemble.m:
                raise DataError(f"WEA fitted on {self.weights.size} members, got {ensemble.m}")
            return _weighted_stats(ensemble.values, self.weights)
        if self.kind == "LM":
            xc = ensemble.values.transpose(0, 2, 1) - self.x_mean[None]   # (t, d, m)
            mean = self.intercept[None] + np.einsum("tmd,dm->td", ensemble.values, self.coef)
            lev = 1.0 / self.n_train + np.einsum("tdm,dmk,tdk->td", xc, self.gram_inv, xc)
            return mean, self.resid_var[None] * (1.0 + lev)
        raise DataError(f"unknown baseline kind {self.kind!r}")

    @property
    def full_coefficients(self) -> np.ndarray:
        """(d, m + 1) matrix of [intercept, member coefficients] in raw units."""
        return np.column_stack([self.intercept, self.coef])

    def save(self, stem):
        header = {"schema": SCHEMA, "kind": self.kind, "n_train": self.n_train,
                  "sigma_d": self.sigma_d, "sigma_s": self.sigma_s,
                  "weights": None if self.weights is None else [float(w) for w in self.weights],
                  "ridge_locations": [int(i) for i in self.ridge_locations]}
        arrays = {}
        if self.kind == "LM":
            arrays = {"intercept": self.intercept, "coef": self.coef, "x_mean": self.x_mean,
                      "gram_inv": self.gram_inv, "resid_var": self.resid_var}
        return write_bundle(stem, header, arrays)

    @classmethod
    def load(cls, stem) -> "BaselineModel":
        doc, arrays = read_bundle(stem, SCHEMA)
        w = doc.get("weights")
        return cls(doc["kind"], None if w is None else np.array(w), doc.get("sigma_d"),
                   doc.get("sigma_s"), n_train=int(doc.get("n_train", 0)),
                   ridge_locations=np.array(doc.get("ridge_locations", []), dtype=int),
                   **arrays)


def fit_ea(train: CommonGridEnsemble | None = None, targets: FieldSeries | None = None) -> BaselineModel:
    return BaselineModel("EA")


def fit_wea(train: CommonGridEnsemble, targets: FieldSeries, sigma_d=None, sigma_s=None) -> BaselineModel:
    """Weights w_i ~ exp(-D_i^2/sigma_d^2) / (1 + sum_{j != i} exp(-S_ij^2/sigma_s^2)).

    D_i is member i's area-weighted RMSE to the target over the training
    period and S_ij the RMSE between members i and j. Unset scales default to
    the median of the corresponding RMSEs.
    """
    if train.values.shape[0] == 0:
        raise DataError("WEA needs a nonempty training period")
    _check_aligned(train, targets)
    w = latitude_weights(train.spec)
    m = train.m
    skill = np.array([_rmse(train.values[:, i], targets.frames, w) for i in range(m)])
    sim = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            sim[i, j] = sim[j, i] = _rmse(train.values[:, i], train.values[:, j], w)
    if sigma_d is None:
        sigma_d = float(np.median(skill))
    if sigma_s is None:
        sigma_s = float(np.median(sim[~np.eye(m, dtype=bool)])) if m > 1 else 1.0
    sigma_d = sigma_d if sigma_d > 0 else np.finfo(float).tiny
    sigma_s = sigma_s if sigma_s > 0 else np.finfo(float).tiny
    weights = wea_weights(skill, sim, sigma_d, sigma_s)
    return BaselineModel("WEA", weights=weights, sigma_d=float(sigma_d), sigma_s=float(sigma_s))


def _check_aligned(train, targets):
    if targets.spec != train.spec:
        raise DataError("targets are not on the ensemble's grid")
    if not np.array_equal(targets.times, train.times):
        raise DataError("targets and ensemble are not time-aligned")


def fit_lm(train: CommonGridEnsemble, targets: FieldSeries) -> BaselineModel:
    """Per-location OLS of the target on member values plus an intercept.

    Locations whose centered design is rank deficient are solved with a ridge
    penalty of 1e-8 * trace and listed in ``ridge_locations``.
    """
    _check_aligned(train, targets)
    n, m, d = train.values.shape
    if n <= m + 1:
        raise DataError(f"LM needs more than {m + 1} training samples, got {n}")
    x = train.values.transpose(2, 0, 1)          # (d, n, m)
    y = targets.frames.T                         # (d, n)
    x_mean = x.mean(axis=1)
    y_mean = y.mean(axis=1)
    xc = x - x_mean[:, None, :]
    yc = y - y_mean[:, None]
    gram = np.einsum("dnm,dnk->dmk", xc, xc)
    rhs = np.einsum("dnm,dn->dm", xc, yc)
    rank = np.linalg.matrix_rank(gram, hermitian=True)
    ridge = np.flatnonzero(rank < m)
    if ridge.size:
        tr = np.trace(gram[ridge], axis1=1, axis2=2)
        lam = 1e-8 * np.where(tr > 0, tr, 1.0)
        gram = gram.copy()
        gram[ridge] += lam[:, None, None] * np.eye(m)
    gram_inv = np.linalg.inv(gram)
    coef = np.einsum("dmk,dk->dm", gram_inv, rhs)
    resid = yc - np.einsum("dnm,dm->dn", xc, coef)
    rss = np.einsum("dn,dn->d", resid, resid)
    intercept = y_mean - np.einsum("dm,dm->d", x_mean, coef)
    return BaselineModel("LM", intercept=intercept, coef=coef, x_mean=x_mean,
                         gram_inv=gram_inv, resid_var=np.maximum(rss / (n - m - 1), 0.0),
                         n_train=n, ridge_locations=ridge)
