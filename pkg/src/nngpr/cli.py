"""Command-line entry point: ``nngpr <command> [--config run.json] [flags]``.

Configuration is one JSON document. Flags given on the command line
override the matching top-level JSON scalars; everything else comes from
the JSON file or the defaults below. The whole configuration is validated
before any data is read or any output is written.

Exit codes: 0 ok, 2 configuration, 3 data/format, 4 numerical,
5 partial experiment failure, 6 member-order mismatch with a saved fit.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, NNGPRError, PartialFailure
from .experiments import (METHODS, Ensemble, ExperimentSettings, SyntheticScenario,
                          decadal_blocks, decade_label, generate_synthetic, pca_shift,
                          run_perfect_model, write_ensemble)
from .gpr import OptimizerSettings, check_members, fit, load_fit, predict_series, save_fit
from .gridstore import (FieldSeries, TrainingSet, compute_standardizers, latitude_weights,
                        load_manifest, read_grid_stack, snapshots_from_series,
                        write_grid_stack)
from .verification import (ScoreTable, SSIMConfig, crps_gaussian, fit_window,
                           interval_hits, ssim)

log = logging.getLogger("nngpr")

COMMANDS = ("synth", "fit", "predict", "perfect-model", "evaluate", "diagnose-shift")


# --------------------------------------------------------------------------
# configuration

def parse_time(value, key="time") -> int:
    """``"YYYY-MM"`` or an integer ``YYYYMM`` code."""
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected 'YYYY-MM', got {value!r}")
    if isinstance(value, int):
        code = value
    elif isinstance(value, str):
        try:
            year, month = value.split("-")
            code = int(year) * 100 + int(month)
        except ValueError:
            raise ConfigError(f"{key}: expected 'YYYY-MM', got {value!r}") from None
    else:
        raise ConfigError(f"{key}: expected 'YYYY-MM', got {value!r}")
    if not 1 <= code % 100 <= 12:
        raise ConfigError(f"{key}: month out of range in {value!r}")
    return code


def _range(value, key):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{key}: expected [start, end]")
    a, b = parse_time(value[0], key), parse_time(value[1], key)
    if a > b:
        raise ConfigError(f"{key}: start {value[0]} is after end {value[1]}")
    return a, b


def _sub(cls, doc, key):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{key}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{key}: unknown keys {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    manifest: str | None = None
    methods: tuple = METHODS
    depth: int = 10
    intercept: bool = False
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    wea_sigma_d: float | None = None
    wea_sigma_s: float | None = None
    ssim: SSIMConfig = field(default_factory=SSIMConfig)
    level: float = 0.95
    train_range: tuple | None = None
    test_range: tuple | None = None
    predict_range: tuple | None = None
    fit_path: str | None = None
    predictions: str | None = None
    held_out: tuple | None = None
    split_time: int | None = None
    granularity: str = "gridpoint"
    scenario: SyntheticScenario | None = None
    seed: int = 0
    threads: int = 1

    def to_json(self) -> dict:
        doc = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (OptimizerSettings, SSIMConfig)):
                v = {g.name: getattr(v, g.name) for g in fields(v)}
            elif isinstance(v, SyntheticScenario):
                v = v.to_json()
            elif isinstance(v, tuple):
                v = list(v)
            doc[f.name] = v
        return doc

    @property
    def digest(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def experiment_settings(self) -> ExperimentSettings:
        return ExperimentSettings(depth=self.depth, optimizer=self.optimizer,
                                  wea_sigma_d=self.wea_sigma_d, wea_sigma_s=self.wea_sigma_s,
                                  ssim=self.ssim, level=self.level, intercept=self.intercept,
                                  threads=self.threads)


_KEYS = {"output_dir", "manifest", "methods", "depth", "intercept", "optimizer", "wea",
         "ssim", "level", "train_range", "test_range", "predict_range", "fit", "predictions",
         "held_out", "split_time", "granularity", "scenario", "seed", "threads"}


def build_config(doc: dict, command: str) -> RunConfig:
    """Validate a JSON configuration for ``command``; raises ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(doc) - _KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")

    def typed(key, kind, default):
        v = doc.get(key, default)
        if v is None or (isinstance(v, kind) and not (kind is not bool and isinstance(v, bool))):
            return v
        raise ConfigError(f"{key}: expected {getattr(kind, '__name__', kind)}, got {v!r}")

    out = typed("output_dir", str, None)
    if not out:
        raise ConfigError("output_dir is required")
    methods = doc.get("methods", list(METHODS))
    if (not isinstance(methods, list) or not methods
            or any(m not in METHODS for m in methods) or len(set(methods)) != len(methods)):
        raise ConfigError(f"methods must be a nonempty list drawn from {list(METHODS)}")
    depth = typed("depth", int, 10)
    if not 1 <= depth <= 64:
        raise ConfigError(f"depth must be in 1..64, got {depth}")
    seed = typed("seed", int, 0)
    threads = typed("threads", int, 1)
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    level = typed("level", (int, float), 0.95)
    if not 0 < level < 1:
        raise ConfigError("level must be in (0, 1)")
    opt_doc = dict(doc.get("optimizer") or {})
    opt_doc.setdefault("seed", seed)
    optimizer = _sub(OptimizerSettings, opt_doc, "optimizer")
    if optimizer.max_iter < 0 or optimizer.step <= 0 or optimizer.patience < 1:
        raise ConfigError("optimizer: need max_iter >= 0, step > 0, patience >= 1")
    wea = doc.get("wea") or {}
    if not isinstance(wea, dict) or set(wea) - {"sigma_d", "sigma_s"}:
        raise ConfigError("wea: only 'sigma_d' and 'sigma_s' are allowed")
    for k, v in wea.items():
        if v is not None and (not isinstance(v, (int, float)) or v <= 0):
            raise ConfigError(f"wea.{k} must be positive")
    ssim_cfg = _sub(SSIMConfig, doc.get("ssim"), "ssim")
    if ssim_cfg.window < 1 or ssim_cfg.window % 2 == 0 or ssim_cfg.sigma <= 0:
        raise ConfigError("ssim: window must be odd and positive, sigma > 0")
    granularity = typed("granularity", str, "gridpoint")
    if granularity not in ("gridpoint", "member"):
        raise ConfigError("granularity must be 'gridpoint' or 'member'")
    held = doc.get("held_out")
    if held is not None and (not isinstance(held, list)
                             or any(not isinstance(i, int) or i < 0 for i in held)):
        raise ConfigError("held_out must be a list of member indices")
    scenario = None
    if command == "synth":
        sdoc = dict(doc.get("scenario") or {})
        sdoc.setdefault("seed", seed)
        try:
            scenario = SyntheticScenario.from_json(sdoc)
        except (NNGPRError, TypeError, ValueError) as exc:
            raise ConfigError(f"scenario: {exc}") from exc
    split_time = doc.get("split_time")
    cfg = RunConfig(
        output_dir=out, manifest=typed("manifest", str, None), methods=tuple(methods),
        depth=depth, intercept=typed("intercept", bool, False), optimizer=optimizer,
        wea_sigma_d=wea.get("sigma_d"), wea_sigma_s=wea.get("sigma_s"), ssim=ssim_cfg,
        level=float(level), train_range=_range(doc.get("train_range"), "train_range"),
        test_range=_range(doc.get("test_range"), "test_range"),
        predict_range=_range(doc.get("predict_range"), "predict_range"),
        fit_path=typed("fit", str, None), predictions=typed("predictions", str, None),
        held_out=tuple(held) if held is not None else None,
        split_time=None if split_time is None else parse_time(split_time, "split_time"),
        granularity=granularity, scenario=scenario, seed=seed, threads=threads)
    _require(cfg, command)
    return cfg


def _require(cfg: RunConfig, command: str):
    def need(attr, what):
        if getattr(cfg, attr) is None:
            raise ConfigError(f"{command} needs {what}")

    def exists(path, what):
        if not Path(path).exists():
            raise ConfigError(f"{what} not found: {path}")

    if command != "synth":
        need("manifest", "a manifest")
        exists(cfg.manifest, "manifest")
        if not load_manifest(cfg.manifest).members:
            raise ConfigError(f"manifest lists no members: {cfg.manifest}")
    if command == "predict":
        need("fit_path", "a saved fit ('fit')")
        exists(Path(cfg.fit_path).with_suffix(".json"), "fit state")
    if command == "evaluate":
        need("predictions", "a predictions directory")
        exists(cfg.predictions, "predictions directory")
    if command in ("perfect-model", "diagnose-shift"):
        need("train_range", "train_range")
        need("test_range", "test_range")
    if cfg.train_range and cfg.test_range and not cfg.train_range[1] < cfg.test_range[0]:
        raise ConfigError("train_range must end before test_range starts")


# --------------------------------------------------------------------------
# reporting

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunReport:
    command: str
    config: RunConfig
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def add(self, path):
        self.files.append(Path(path))

    def write(self, out_dir: Path) -> Path:
        inventory = [{"path": p.relative_to(out_dir).as_posix(), "bytes": p.stat().st_size,
                      "sha256": sha256_file(p)} for p in sorted(self.files)]
        doc = {"tool": "nngpr", "version": __version__, "command": self.command,
               "config": self.config.to_json(), "config_sha256": self.config.digest,
               "timings_s": self.timings, "metrics": self.metrics, "failures": self.failures,
               "files": inventory}
        path = out_dir / "report.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _subset(series: FieldSeries, rng):
    if rng is None:
        return series
    return series.between(*rng)


def _dataset(cfg: RunConfig):
    manifest = load_manifest(cfg.manifest)
    return manifest, Ensemble.from_manifest(manifest)


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig, out: Path, report: RunReport) -> int:
    t0 = time.perf_counter()
    ens = generate_synthetic(cfg.scenario)
    write_ensemble(ens, out)
    for name in ens.names:
        report.add(out / f"{name}.cgrid")
    report.add(out / "target.cgrid")
    report.add(out / "manifest.json")
    scen = out / "scenario.json"
    scen.write_text(json.dumps(cfg.scenario.to_json(), indent=2, sort_keys=True) + "\n")
    report.add(scen)
    report.timings["synth"] = time.perf_counter() - t0
    return 0


def _training(cfg: RunConfig, ens: Ensemble):
    if ens.target is None:
        raise ConfigError("manifest has no target")
    members = [_subset(s, cfg.train_range) for s in ens.members]
    target = _subset(ens.target, cfg.train_range)
    standardizers = compute_standardizers(members)
    return TrainingSet(snapshots_from_series(members, standardizers), target, standardizers)


def cmd_fit(cfg: RunConfig, out: Path, report: RunReport) -> int:
    _, ens = _dataset(cfg)
    t0 = time.perf_counter()
    ts = _training(cfg, ens)
    state = fit(ts, None, cfg.optimizer, intercept=cfg.intercept, member_names=ens.names,
                depth=cfg.depth)
    report.timings["fit"] = time.perf_counter() - t0
    for p in save_fit(state, out / "fit"):
        report.add(p)
    trace = out / "trace.csv"
    trace.write_text("iteration,loss\n" + "".join(
        f"{i},{v!r}\n" for i, v in enumerate(state.trace)), encoding="utf-8")
    report.add(trace)
    report.metrics["fit"] = {"params": state.params.to_json(), "converged": state.converged,
                             "iterations": len(state.trace) - 1,
                             "final_loss": state.trace[-1] if state.trace else None,
                             "jitter": state.jitter}
    return 0


def cmd_predict(cfg: RunConfig, out: Path, report: RunReport) -> int:
    state = load_fit(cfg.fit_path)
    _, ens = _dataset(cfg)
    check_members(state, ens.names)
    members = [_subset(s, cfg.predict_range) for s in ens.members]
    if len(members[0]) == 0:
        report.metrics["predict"] = {"count": 0}
        return 0
    t0 = time.perf_counter()
    snaps = snapshots_from_series(members, state.standardizers)
    preds = predict_series(state, snaps, cfg.threads)
    report.timings["predict"] = time.perf_counter() - t0
    times = members[0].times
    mean = np.array([p.mean_field.values for p in preds])
    var = np.array([p.predictive_var for p in preds])[:, None] * np.ones_like(mean)
    lower, upper = zip(*(p.interval(cfg.level) for p in preds))
    spec = state.target_spec
    for name, frames in (("mean", mean), ("variance", var), ("lower", np.array(lower)),
                         ("upper", np.array(upper))):
        path = out / f"{name}.cgrid"
        write_grid_stack(FieldSeries(spec, times, frames, state.units, state.variable), path)
        report.add(path)
    report.metrics["predict"] = {"count": int(times.size), "level": cfg.level}
    return 0


def _decade_windows(times):
    years = np.asarray(times) // 100
    blocks = decadal_blocks(int(years[0]), int(years[-1]), allow_partial=True)
    wins = [(decade_label(b), np.flatnonzero((years >= b[0]) & (years <= b[1]))) for b in blocks]
    return [(lab, idx) for lab, idx in wins if idx.size]


def cmd_evaluate(cfg: RunConfig, out: Path, report: RunReport) -> int:
    _, ens = _dataset(cfg)
    if ens.target is None:
        raise ConfigError("manifest has no target")
    pdir = Path(cfg.predictions)
    mean = read_grid_stack(pdir / "mean.cgrid")
    var = read_grid_stack(pdir / "variance.cgrid")
    target = ens.target
    keep = np.isin(target.times, mean.times)
    if keep.sum() != len(mean) or mean.spec != target.spec:
        raise ConfigError("predictions do not match the target grid or time axis")
    truth = target.select(keep)
    ref = _subset(target, cfg.train_range) if cfg.train_range else target
    cfg_ssim = SSIMConfig(cfg.ssim.window, cfg.ssim.sigma, cfg.ssim.k1, cfg.ssim.k2,
                          cfg.ssim.data_range or float(ref.frames.max() - ref.frames.min()))
    cfg_ssim = fit_window(cfg_ssim, truth.spec.shape)
    w = latitude_weights(truth.spec)
    sd = np.sqrt(np.maximum(var.frames, 1e-24))
    err = mean.frames - truth.frames
    mse_t = err ** 2 @ w / w.size
    crps_t = crps_gaussian(mean.frames, sd, truth.frames) @ w / w.size
    hits = interval_hits(mean.frames, sd, truth.frames, cfg.level)
    shape = truth.spec.shape
    ssim_t = np.array([ssim(mean.frames[t].reshape(shape), truth.frames[t].reshape(shape),
                            cfg_ssim) for t in range(len(truth))])
    table = ScoreTable()
    for lab, idx in _decade_windows(truth.times):
        table.add("NN-GPR", lab, mse_t[idx].mean(), ssim_t[idx].mean(), crps_t[idx].mean(),
                  hits[idx].mean())
    path = out / "scores.csv"
    table.to_csv(path)
    report.add(path)
    report.metrics["scores"] = {f"{m}|{win}": v for (m, win), v in table.rows.items()}
    return 0


def cmd_perfect_model(cfg: RunConfig, out: Path, report: RunReport) -> int:
    _, ens = _dataset(cfg)
    if ens.m < 2:
        raise ConfigError("perfect-model tests need at least 2 members")
    held = cfg.held_out if cfg.held_out is not None else tuple(range(ens.m))
    bad = [i for i in held if i >= ens.m]
    if bad:
        raise ConfigError(f"held_out indices {bad} outside 0..{ens.m - 1}")
    settings = cfg.experiment_settings()
    split = (cfg.train_range, cfg.test_range)
    pooled = ["held_out,method,window,mse,ssim,crps,coverage"]

    def one(i):
        t0 = time.perf_counter()
        try:
            # member-level parallelism only; each run is single-threaded inside
            return i, run_perfect_model(ens, i, cfg.methods, split,
                                        _single_thread(settings)), time.perf_counter() - t0
        except NNGPRError as exc:
            return i, exc, time.perf_counter() - t0

    if cfg.threads > 1 and len(held) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(one, held))
    else:
        results = [one(i) for i in held]
    for i, run, dt in results:
        name = ens.names[i]
        report.timings[f"heldout_{name}"] = dt
        if isinstance(run, Exception):
            report.failures[name] = f"{type(run).__name__}: {run}"
            continue
        sub = out / f"heldout_{name}"
        sub.mkdir(exist_ok=True)
        run.scores.to_csv(sub / "scores.csv")
        report.add(sub / "scores.csv")
        bv_lines = []
        for j, (method, bv) in enumerate(run.bias_variance.items()):
            text = bv.to_csv(method=method)
            bv_lines.append(text if j == 0 else text.split("\n", 1)[1])
        (sub / "bias_variance.csv").write_text("".join(bv_lines), encoding="utf-8")
        report.add(sub / "bias_variance.csv")
        for method, reason in run.skipped.items():
            report.failures[f"{name}/{method}"] = reason
        for (method, win), v in run.scores.rows.items():
            pooled.append(",".join([name, method, win] + [repr(v[k]) for k in
                                                          ("mse", "ssim", "crps", "coverage")]))
        for method, (mean, std) in run.result.predictions.items():
            path = sub / f"{method}_mean.cgrid"
            write_grid_stack(FieldSeries(run.result.target_spec, run.result.test_times, mean),
                             path)
            report.add(path)
        report.timings.update({f"{name}/{m}": t for m, t in run.result.timings.items()})
    path = out / "pooled_scores.csv"
    path.write_text("\n".join(pooled) + "\n", encoding="utf-8")
    report.add(path)
    report.metrics["runs"] = len(held) - sum(1 for _, r, _ in results if isinstance(r, Exception))
    if report.failures:
        raise PartialFailure(f"{len(report.failures)} failures; see report.json")
    return 0


def _single_thread(settings: ExperimentSettings) -> ExperimentSettings:
    return replace(settings, threads=1)


def cmd_diagnose_shift(cfg: RunConfig, out: Path, report: RunReport) -> int:
    _, ens = _dataset(cfg)
    train = [_subset(s, cfg.train_range) for s in ens.members]
    future = [_subset(s, cfg.test_range) for s in ens.members]
    if len(future[0]) == 0:
        raise ConfigError("test_range selects no time steps")
    standardizers = compute_standardizers(train)
    xt = np.array([s.x_vec for s in snapshots_from_series(train, standardizers)])
    xf = np.array([s.x_vec for s in snapshots_from_series(future, standardizers)])
    ft = future[0].times
    split = cfg.split_time if cfg.split_time is not None else int(ft[len(ft) // 2])
    diag = pca_shift(xt, xf, ft, split, cfg.granularity, [s.spec.size for s in train])
    path = out / "projections.csv"
    diag.to_csv(path)
    report.add(path)
    summary = {"near_displacement": diag.near_displacement,
               "long_displacement": diag.long_displacement,
               "relative_displacement": diag.relative_displacement,
               "eigenvalues": [float(v) for v in diag.eigenvalues], "split_time": split}
    spath = out / "shift_summary.json"
    spath.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    report.add(spath)
    report.metrics["shift"] = summary
    return 0


HANDLERS = {"synth": cmd_synth, "fit": cmd_fit, "predict": cmd_predict,
            "perfect-model": cmd_perfect_model, "evaluate": cmd_evaluate,
            "diagnose-shift": cmd_diagnose_shift}


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nngpr", description=__doc__.split("\n", 1)[0])
    p.add_argument("--version", action="version", version=f"nngpr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", "-c", help="JSON run configuration")
        s.add_argument("--output-dir", "-o", dest="output_dir")
        s.add_argument("--manifest")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--depth", type=int)
        s.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
        s.add_argument("--train-range", dest="train_range", nargs=2, metavar=("START", "END"))
        s.add_argument("--test-range", dest="test_range", nargs=2, metavar=("START", "END"))
        s.add_argument("--range", dest="predict_range", nargs=2, metavar=("START", "END"))
        s.add_argument("--fit")
        s.add_argument("--predictions")
        s.add_argument("--split-time", dest="split_time")
        s.add_argument("--verbose", "-v", action="store_true")
    return p


def load_config(args) -> dict:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
    for key in ("output_dir", "manifest", "seed", "threads", "depth", "train_range",
                "test_range", "predict_range", "fit", "predictions", "split_time"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = list(value) if isinstance(value, list) else value
    if args.methods:
        doc["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    return doc


def run(command: str, doc: dict) -> int:
    """Validate ``doc`` and run ``command``; returns the exit status."""
    cfg = build_config(doc, command)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(command, cfg)
    status = 0
    try:
        # BLAS stays single-threaded so results never depend on the thread count
        with threadpool_limits(limits=1):
            status = HANDLERS[command](cfg, out, report)
    except NNGPRError as exc:
        report.failures.setdefault("error", f"{type(exc).__name__}: {exc}")
        report.write(out)
        raise
    report.write(out)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args.command, load_config(args))
    except NNGPRError as exc:
        print(f"nngpr {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nngpr {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
