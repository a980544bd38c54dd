"""Perfect-model experiments, decadal scoring, the PCA covariate-shift
diagnostic and a deterministic synthetic ensemble generator."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from .errors import DataError, NNGPRError
from .gpr import OptimizerSettings, fit, predict_series
from .gridstore import (FieldSeries, GridSpec, Manifest, TrainingSet, compute_standardizers,
                        latitude_weights, month_range, snapshots_from_series,
                        write_grid_stack, write_manifest)
from .verification import (ScoreTable, SSIMConfig, bias_variance, crps_gaussian,
                           fit_window, interval_hits, ssim)

log = logging.getLogger(__name__)

METHODS = ("nngpr", "lm", "wea", "ea")
LABELS = {"nngpr": "NN-GPR", "lm": "LM", "wea": "WEA", "ea": "EA"}


# --------------------------------------------------------------------------
# synthetic ensembles

@dataclass(frozen=True)
class SyntheticScenario:
    """Knobs of the synthetic ensemble; every quantity is in anomaly-std units.

    Coefficients of a smooth latent field follow AR(1) noise; members see the
    latent through their own sensitivity, modal response, bias pattern and
    internal variability, resampled to their own grid. After the training
    period the coefficient means ramp by ``shift_strength * shift_rate`` per
    decade along a fixed random direction.
    """

    seed: int = 0
    m: int = 6
    target_shape: tuple = (24, 48)
    member_shapes: tuple = ((16, 32), (12, 24), (8, 16))
    n_train: int = 400
    n_test: int = 240
    start: tuple = (1950, 9)
    n_modes: int = 8
    ar_coef: float = 0.7
    trend_strength: float = 0.2
    shift_strength: float = 1.0
    shift_rate: float = 1.0
    member_noise: float = 0.3
    member_bias: float = 1.0
    member_spread: float = 0.25
    obs_noise: float = 0.2
    nonlinearity: bool = True
    nonlinear_scale: float = 0.15
    climatology: float = 2.0
    lat_extent: float = 80.0

    def __post_init__(self):
        if self.m < 1:
            raise DataError("scenario needs at least one member")
        if self.n_train < 2 or self.n_test < 0:
            raise DataError("scenario needs n_train >= 2 and n_test >= 0")
        if not self.member_shapes:
            raise DataError("scenario needs at least one member grid shape")
        for shape in (self.target_shape,) + tuple(self.member_shapes):
            if len(shape) != 2 or min(shape) < 1:
                raise DataError(f"invalid grid shape {shape}")
        if not 0 <= self.ar_coef < 1:
            raise DataError("ar_coef must be in [0, 1)")
        for name in ("member_noise", "member_bias", "obs_noise", "nonlinear_scale",
                     "shift_strength", "trend_strength", "member_spread"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")

    @property
    def n_time(self) -> int:
        return self.n_train + self.n_test

    @property
    def times(self) -> np.ndarray:
        return month_range(self.start, self.n_time)

    @property
    def train_range(self) -> tuple[int, int]:
        t = self.times
        return int(t[0]), int(t[self.n_train - 1])

    @property
    def test_range(self) -> tuple[int, int] | None:
        t = self.times
        return (int(t[self.n_train]), int(t[-1])) if self.n_test else None

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["target_shape"] = list(self.target_shape)
        doc["member_shapes"] = [list(s) for s in self.member_shapes]
        doc["start"] = list(self.start)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticScenario":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown scenario keys {sorted(unknown)}")
        if "target_shape" in doc:
            doc["target_shape"] = tuple(doc["target_shape"])
        if "member_shapes" in doc:
            doc["member_shapes"] = tuple(tuple(s) for s in doc["member_shapes"])
        if "start" in doc:
            doc["start"] = tuple(doc["start"])
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class Ensemble:
    names: tuple
    members: tuple
    target: FieldSeries | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "members", tuple(self.members))
        if len(self.names) != len(self.members):
            raise DataError("member names and series differ in length")

    @property
    def m(self) -> int:
        return len(self.members)

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "Ensemble":
        target = manifest.load_target() if manifest.target is not None else None
        return cls(manifest.member_names, manifest.load_members(), target)


def _ar1(rng, n, k, phi):
    e = np.empty((n, k))
    e[0] = rng.standard_normal(k)
    innov = rng.standard_normal((n, k)) * math.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        e[t] = phi * e[t - 1] + innov[t]
    return e


def _mode_basis(spec: GridSpec, rng, count):
    """Area-orthonormal, zero-mean smooth patterns on ``spec``."""
    lat = np.deg2rad(spec.lats)[:, None]
    lon = np.deg2rad(spec.lons)[None, :]
    w = latitude_weights(spec)
    pairs = [(a, b) for a in range(0, 5) for b in range(0, 6) if a + b > 0]
    order = rng.permutation(len(pairs))
    basis = []
    for idx in order:
        a, b = pairs[idx]
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        v = (np.cos(a * lat * 1.1 + p1) * np.cos(b * lon + p2)).ravel()
        v = v - (v @ w) / w.size
        for u in basis:
            v = v - ((v * u) @ w / w.size) * u
        nrm = math.sqrt((v * v) @ w / w.size)
        if nrm > 1e-6:
            basis.append(v / nrm)
        if len(basis) == count:
            break
    return np.array(basis)


def generate_synthetic(scenario: SyntheticScenario) -> Ensemble:
    """Build a deterministic member ensemble and target series for ``scenario``."""
    sc = scenario
    root = np.random.SeedSequence(sc.seed)
    s_struct, s_latent, s_target, *s_members = root.spawn(3 + sc.m)
    rs = np.random.default_rng(s_struct)
    tspec = GridSpec.regular(*sc.target_shape, lat_extent=sc.lat_extent)
    w = latitude_weights(tspec)
    n = sc.n_time
    modes = _mode_basis(tspec, rs, sc.n_modes)
    k = modes.shape[0]
    scales = 1.0 / np.sqrt(1.0 + 0.5 * np.arange(k))
    lat = np.deg2rad(np.repeat(tspec.lats, tspec.n_lon))
    clim = sc.climatology * (np.cos(lat) ** 2 - 0.5)
    detail = _mode_basis(tspec, rs, 12)
    clim = clim + 0.5 * sc.climatology * (rs.standard_normal(detail.shape[0]) / 3.0) @ detail
    # shift mostly along the dominant modes, where the inputs vary most
    direction = rs.standard_normal(k) * scales ** 2
    direction /= np.linalg.norm(direction)
    months = np.arange(n)
    ramp = np.maximum(months - (sc.n_train - 1), 0) / 120.0
    warming = sc.trend_strength * months / 120.0

    rl = np.random.default_rng(s_latent)
    coef = _ar1(rl, n, k, sc.ar_coef) * scales + (sc.shift_strength * sc.shift_rate) * ramp[:, None] * direction
    anomaly = coef @ modes

    rt = np.random.default_rng(s_target)
    target = clim + warming[:, None] + anomaly
    if sc.nonlinearity and sc.nonlinear_scale > 0:
        sq = anomaly ** 2
        sq = sq - (sq @ w)[:, None] / w.size
        target = target + sc.nonlinear_scale * sq
    target = target + sc.obs_noise * rt.standard_normal(target.shape)

    members, names = [], []
    for i, ss in enumerate(s_members):
        rm = np.random.default_rng(ss)
        shape = sc.member_shapes[i % len(sc.member_shapes)]
        mspec = GridSpec.regular(*shape, lat_extent=sc.lat_extent)
        sens = 1.0 + sc.member_spread * rm.standard_normal()
        response = 1.0 + 0.6 * sc.member_spread * rm.standard_normal(k)
        # member quality varies, so skill weighting has something to find
        quality = rm.uniform(0.3, 1.7)
        bias = quality * sc.member_bias * (rm.standard_normal() + 0.5 * rm.standard_normal(k) @ modes)
        internal = sc.member_noise * (_ar1(rm, n, k, sc.ar_coef) * scales) @ modes
        values = (clim + bias + sens * warming[:, None] + (coef * response) @ modes + internal
                  + 0.1 * sc.member_noise * rm.standard_normal((n, tspec.size)))
        op = bl.bilinear_operator(tspec, mspec)
        members.append(FieldSeries(mspec, sc.times, (op @ values.T).T, "K", "synthetic"))
        names.append(f"member{i:02d}")
    return Ensemble(names, members, FieldSeries(tspec, sc.times, target, "K", "synthetic"))


def write_ensemble(ensemble: Ensemble, out_dir, variable="synthetic", units="K") -> Manifest:
    """Write members (and target) as CGRID files plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    members = []
    for name, series in zip(ensemble.names, ensemble.members):
        write_grid_stack(series, out / f"{name}.cgrid")
        members.append((name, f"{name}.cgrid"))
    target = None
    if ensemble.target is not None:
        write_grid_stack(ensemble.target, out / "target.cgrid")
        target = "target.cgrid"
    manifest = Manifest(variable, units, tuple(members), target, str(out))
    write_manifest(manifest, out / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# decades and covariate shift

def decadal_blocks(start_year: int, end_year: int, allow_partial: bool = False):
    """Consecutive 10-year windows ``(first_year, last_year)`` anchored at ``start_year``."""
    if end_year < start_year:
        raise DataError(f"empty year range {start_year}-{end_year}")
    span = end_year - start_year + 1
    if span % 10 and not allow_partial:
        raise DataError(f"{span} years is not a whole number of decades "
                        "(allow_partial=True keeps the remainder)")
    return [(y, min(y + 9, end_year)) for y in range(start_year, end_year + 1, 10)]


def decade_label(block) -> str:
    return f"{block[0]}-{block[1]}"


@dataclass(frozen=True, eq=False)
class ShiftDiagnostic:
    pc_basis: np.ndarray          # (2, D) orthonormal rows
    eigenvalues: np.ndarray       # (2,) training variance along each PC
    train_proj: np.ndarray        # (n, 2)
    near_proj: np.ndarray
    long_proj: np.ndarray
    near_times: np.ndarray
    long_times: np.ndarray

    @property
    def near_displacement(self) -> float:
        return _displacement(self.near_proj)

    @property
    def long_displacement(self) -> float:
        """Distance of the long-term projection centroid from the training centroid."""
        return _displacement(self.long_proj)

    @property
    def relative_displacement(self) -> float:
        """Long-term displacement in units of the training spread along PC1."""
        return self.long_displacement / math.sqrt(max(self.eigenvalues[0], 1e-300))

    def to_csv(self, path=None) -> str:
        lines = ["set,time,pc1,pc2"]
        for name, proj, times in (("train", self.train_proj, None),
                                  ("near", self.near_proj, self.near_times),
                                  ("long", self.long_proj, self.long_times)):
            for i, (a, b) in enumerate(proj):
                t = "" if times is None else str(int(times[i]))
                lines.append(f"{name},{t},{a!r},{b!r}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _displacement(p):
    return float(np.linalg.norm(p.mean(axis=0))) if len(p) else 0.0


def pca_shift(train_inputs, future_inputs, future_times=None, split_time=None,
              granularity: str = "gridpoint", member_sizes=None) -> ShiftDiagnostic:
    """Project training and future inputs on the top two training PCs.

    Inputs are centered and scaled with training statistics, either per
    coordinate (``granularity="gridpoint"``) or per member block
    (``granularity="member"``; ``member_sizes`` gives block lengths).
    """
    xt = np.asarray(train_inputs, dtype=np.float64)
    xf = np.asarray(future_inputs, dtype=np.float64)
    if xf.size == 0:
        xf = np.zeros((0, xt.shape[1]))
    if xt.ndim != 2 or xt.shape[0] < 3:
        raise DataError("pca_shift needs at least 3 training inputs")
    if xf.ndim != 2 or xf.shape[1] != xt.shape[1]:
        raise DataError("future inputs have a different length than training inputs")
    mean = xt.mean(axis=0)
    if granularity == "gridpoint":
        sd = xt.std(axis=0)
    elif granularity == "member":
        sizes = [xt.shape[1]] if member_sizes is None else list(member_sizes)
        if sum(sizes) != xt.shape[1]:
            raise DataError("member sizes do not add up to the input length")
        sd = np.empty(xt.shape[1])
        off = 0
        for s in sizes:
            sd[off:off + s] = np.sqrt(np.mean((xt[:, off:off + s] - mean[off:off + s]) ** 2))
            off += s
    else:
        raise DataError(f"unknown granularity {granularity!r}")
    sd = np.where(sd > 0, sd, 1.0)
    zt = (xt - mean) / sd
    zf = (xf - mean) / sd
    gram = zt @ zt.T
    evals, evecs = np.linalg.eigh(gram)
    evals, evecs = evals[::-1][:2], evecs[:, ::-1][:, :2]
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise DataError("training inputs have rank < 2; no second principal component")
    basis = (zt.T @ evecs / np.sqrt(evals)).T
    # orient each direction so its largest-magnitude entry is positive
    flip = np.sign(basis[np.arange(2), np.argmax(np.abs(basis), axis=1)])
    basis *= flip[:, None]
    ft = np.arange(xf.shape[0]) if future_times is None else np.asarray(future_times)
    if split_time is None:
        split_time = ft[len(ft) // 2] if len(ft) else 0
    near = ft < split_time
    proj_f = zf @ basis.T
    return ShiftDiagnostic(basis, evals / xt.shape[0], zt @ basis.T, proj_f[near],
                           proj_f[~near], ft[near], ft[~near])


# --------------------------------------------------------------------------
# model comparison

@dataclass(frozen=True)
class ExperimentSettings:
    depth: int = 10
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    wea_sigma_d: float | None = None
    wea_sigma_s: float | None = None
    ssim: SSIMConfig = field(default_factory=SSIMConfig)
    level: float = 0.95
    intercept: bool = False
    threads: int = 1
    sigma_floor: float = 1e-12


@dataclass(eq=False)
class ExperimentRun:
    methods: tuple
    windows: list
    test_times: np.ndarray
    scores: ScoreTable
    bias_variance: dict
    predictions: dict        # method -> (mean (T, d), std (T, d))
    skipped: dict
    timings: dict
    target_spec: GridSpec
    fit_state: object = None


@dataclass(eq=False)
class PerfectModelRun:
    held_out: int
    held_out_name: str
    input_names: tuple
    train_range: tuple
    test_range: tuple
    result: ExperimentRun

    @property
    def scores(self) -> ScoreTable:
        return self.result.scores

    @property
    def bias_variance(self) -> dict:
        return self.result.bias_variance

    @property
    def skipped(self) -> dict:
        return self.result.skipped


def _split_masks(times, train_range, test_range):
    if not (train_range[0] <= train_range[1] < test_range[0] <= test_range[1]):
        raise DataError(f"train {train_range} and test {test_range} must be ordered and disjoint")
    train = (times >= train_range[0]) & (times <= train_range[1])
    test = (times >= test_range[0]) & (times <= test_range[1])
    return train, test


def _score_method(name, mean, std, target, windows, settings, data_range, w):
    table_rows = []
    ssim_cfg = fit_window(replace(settings.ssim, data_range=data_range), target.spec.shape)
    err = mean - target.frames
    mse_t = (err ** 2) @ w / w.size
    ssim_t = np.array([ssim(mean[t].reshape(target.spec.shape), target.frames[t].reshape(
        target.spec.shape), ssim_cfg) for t in range(len(target))])
    sd = np.maximum(std, settings.sigma_floor)
    crps_t = crps_gaussian(mean, sd, target.frames) @ w / w.size
    hits = interval_hits(mean, sd, target.frames, settings.level)
    for label, idx in windows:
        table_rows.append((label, float(np.mean(mse_t[idx])), float(np.mean(ssim_t[idx])),
                           float(np.mean(crps_t[idx])), float(np.mean(hits[idx]))))
    bv = bias_variance(err, [idx for _, idx in windows], w, [lab for lab, _ in windows])
    return table_rows, bv


def run_experiment(inputs, target: FieldSeries, methods=METHODS, train_range=None,
                   test_range=None, settings: ExperimentSettings | None = None,
                   allow_partial: bool = True) -> ExperimentRun:
    """Train every method on ``train_range`` and score ``test_range`` per decade."""
    settings = settings or ExperimentSettings()
    inputs = list(inputs)
    times = target.times
    for i, s in enumerate(inputs):
        if not np.array_equal(s.times, times):
            raise DataError(f"input {i} is not time-aligned with the target", index=i)
    train, test = _split_masks(times, train_range, test_range)
    y_train, y_test = target.select(train), target.select(test)
    if len(y_test) == 0:
        raise DataError("test range contains no time steps")
    years = y_test.times // 100
    blocks = decadal_blocks(int(years[0]), int(years[-1]), allow_partial)
    windows = [(decade_label(b), np.flatnonzero((years >= b[0]) & (years <= b[1])))
               for b in blocks]
    windows = [(lab, idx) for lab, idx in windows if idx.size]
    w = latitude_weights(target.spec)
    data_range = float(y_train.frames.max() - y_train.frames.min())

    scores = ScoreTable()
    bvs, preds, skipped, timings = {}, {}, {}, {}
    state = None
    common = None
    for method in methods:
        t0 = time.perf_counter()
        try:
            if method == "nngpr":
                mean, std, state = _run_nngpr(inputs, train, test, y_train, settings)
            else:
                if common is None:
                    common = bl.CommonGridEnsemble.from_members(inputs, target.spec)
                mean, std = _run_baseline(method, common, train, test, y_train, settings)
        except NNGPRError as exc:
            skipped[method] = f"{type(exc).__name__}: {exc}"
            log.warning("method %s skipped: %s", method, exc)
            continue
        rows, bv = _score_method(method, mean, std, y_test, windows, settings, data_range, w)
        for label, mse, ss, cr, cov in rows:
            scores.add(LABELS.get(method, method), label, mse, ss, cr, cov)
        bvs[method] = bv
        preds[method] = (mean, std)
        timings[method] = time.perf_counter() - t0
    return ExperimentRun(tuple(methods), [lab for lab, _ in windows], y_test.times, scores,
                         bvs, preds, skipped, timings, target.spec, state)


def _run_nngpr(inputs, train, test, y_train, settings):
    train_series = [s.select(train) for s in inputs]
    test_series = [s.select(test) for s in inputs]
    standardizers = compute_standardizers(train_series)
    ts = TrainingSet(snapshots_from_series(train_series, standardizers), y_train, standardizers)
    state = fit(ts, None, settings.optimizer, intercept=settings.intercept,
                depth=settings.depth)
    preds = predict_series(state, snapshots_from_series(test_series, standardizers),
                           settings.threads)
    mean = np.array([p.mean_field.values for p in preds])
    std = np.array([[p.predictive_std] for p in preds]) * np.ones((1, mean.shape[1]))
    return mean, std, state


def _run_baseline(method, common, train, test, y_train, settings):
    tr, te = common.select(train), common.select(test)
    if method == "ea":
        model = bl.fit_ea()
    elif method == "wea":
        model = bl.fit_wea(tr, y_train, settings.wea_sigma_d, settings.wea_sigma_s)
    elif method == "lm":
        model = bl.fit_lm(tr, y_train)
    else:
        raise DataError(f"unknown method {method!r}")
    mean, var = model.predict(te)
    return mean, np.sqrt(np.maximum(var, 0.0))


def run_perfect_model(dataset, held_out: int, methods=METHODS, split=None,
                      settings: ExperimentSettings | None = None) -> PerfectModelRun:
    """Hold member ``held_out`` out as truth and predict it from the others."""
    ens = Ensemble.from_manifest(dataset) if isinstance(dataset, Manifest) else dataset
    if not 0 <= held_out < ens.m:
        raise DataError(f"held-out index {held_out} outside 0..{ens.m - 1}")
    if ens.m < 2:
        raise DataError("perfect-model tests need at least 2 members")
    if split is None:
        raise DataError("a (train_range, test_range) split is required")
    train_range, test_range = split
    target = ens.members[held_out]
    keep = [i for i in range(ens.m) if i != held_out]
    inputs = [ens.members[i] for i in keep]
    result = run_experiment(inputs, target, methods, train_range, test_range, settings)
    return PerfectModelRun(held_out, ens.names[held_out], tuple(ens.names[i] for i in keep),
                           tuple(train_range), tuple(test_range), result)


def run_all_perfect_model(dataset, methods=METHODS, split=None,
                          settings: ExperimentSettings | None = None, threads: int = 1):
    """One perfect-model run per member; failures are returned, not raised."""
    ens = Ensemble.from_manifest(dataset) if isinstance(dataset, Manifest) else dataset

    def one(i):
        try:
            return run_perfect_model(ens, i, methods, split, settings)
        except NNGPRError as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(ens.m)))
    return [one(i) for i in range(ens.m)]
