"""Gridded field containers, the CGRID binary format, ensemble manifests,
latitude area weights and the vectorization that builds kernel inputs.

CGRID layout (little-endian)::

    b"CGR1"  u32 n_lat  u32 n_lon  u32 n_time
    f64 lats[n_lat]  f64 lons[n_lon]
    i32 time_codes[n_time]            # year * 100 + month
    f64 payload[n_time * n_lat * n_lon]  # time-outermost, lat-major, lon-minor
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateGridError, FormatError

MAGIC = b"CGR1"
_HEADER = struct.Struct("<4sIII")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def time_code(year: int, month: int) -> int:
    if not 1 <= month <= 12:
        raise DataError(f"month {month} outside 1..12")
    return int(year) * 100 + int(month)


def decode_time(code: int) -> tuple[int, int]:
    return int(code) // 100, int(code) % 100


def month_range(start: tuple[int, int], count: int) -> np.ndarray:
    """``count`` consecutive monthly time codes starting at ``(year, month)``."""
    y0, m0 = start
    k = np.arange(count) + (m0 - 1)
    return (y0 + k // 12) * 100 + (k % 12) + 1


def _strictly_monotone(a):
    if a.size < 2:
        return True
    d = np.diff(a)
    return bool(np.all(d > 0) or np.all(d < 0))


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Latitude/longitude axes of a regular grid, in degrees.

    Longitudes are wrapped into [0, 360) on construction.
    """

    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=np.float64).ravel()
        lons = np.asarray(self.lons, dtype=np.float64).ravel()
        if lats.size == 0 or lons.size == 0:
            raise FormatError("grid needs at least one latitude and longitude",
                              field="n_lat" if lats.size == 0 else "n_lon")
        if not np.all(np.isfinite(lats)) or np.any(np.abs(lats) > 90):
            raise FormatError("latitudes must be finite and within [-90, 90]", field="lats")
        if not _strictly_monotone(lats):
            raise FormatError("latitudes must be strictly monotone", field="lats")
        if not np.all(np.isfinite(lons)):
            raise FormatError("longitudes must be finite", field="lons")
        lons = np.mod(lons, 360.0)
        if np.unique(lons).size != lons.size:
            raise FormatError("duplicate (wrapped) longitude", field="lons")
        if not _strictly_monotone(lons):
            raise FormatError("longitudes must be strictly monotone in [0, 360)", field="lons")
        object.__setattr__(self, "lats", _frozen(lats))
        object.__setattr__(self, "lons", _frozen(lons))

    @classmethod
    def regular(cls, n_lat, n_lon, lat_extent=80.0):
        """Equally spaced grid with latitudes spanning +/- ``lat_extent``."""
        return cls(np.linspace(-lat_extent, lat_extent, n_lat),
                   np.arange(n_lon) * (360.0 / n_lon))

    @property
    def n_lat(self) -> int:
        return self.lats.size

    @property
    def n_lon(self) -> int:
        return self.lons.size

    @property
    def size(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_lat, self.n_lon

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (np.array_equal(self.lats, other.lats)
                and np.array_equal(self.lons, other.lons))

    def __hash__(self):
        return hash((self.lats.tobytes(), self.lons.tobytes()))

    def __repr__(self):
        return (f"GridSpec(n_lat={self.n_lat}, n_lon={self.n_lon}, "
                f"lat=[{self.lats[0]:g}..{self.lats[-1]:g}])")


@dataclass(frozen=True, eq=False)
class GridField:
    spec: GridSpec
    values: np.ndarray
    units: str = ""
    variable: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != self.spec.size:
            raise DataError(f"field has {v.size} values, grid expects {self.spec.size}")
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise DataError(f"non-finite value at index {bad[0]}", index=int(bad[0]))
        object.__setattr__(self, "values", _frozen(v))

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.spec.shape)


@dataclass(frozen=True, eq=False)
class FieldSeries:
    """Time-stacked fields on one grid; ``frames`` has shape (n_time, d)."""

    spec: GridSpec
    times: np.ndarray
    frames: np.ndarray
    units: str = ""
    variable: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64).ravel()
        frames = np.asarray(self.frames, dtype=np.float64)
        frames = frames.reshape(times.size, self.spec.size)
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise DataError("time codes must be strictly increasing")
        months = times % 100
        if np.any((months < 1) | (months > 12)):
            raise DataError("time code with month outside 1..12")
        bad = np.flatnonzero(~np.isfinite(frames.ravel()))
        if bad.size:
            raise DataError(f"non-finite payload at index {bad[0]}", index=int(bad[0]))
        object.__setattr__(self, "times", _frozen(times, np.int64))
        object.__setattr__(self, "frames", _frozen(frames))

    def __len__(self):
        return self.times.size

    def field(self, i) -> GridField:
        return GridField(self.spec, self.frames[i], self.units, self.variable)

    def select(self, mask) -> "FieldSeries":
        mask = np.asarray(mask)
        return FieldSeries(self.spec, self.times[mask], self.frames[mask],
                           self.units, self.variable)

    def between(self, start: int, end: int) -> "FieldSeries":
        """Frames with ``start <= time_code <= end``."""
        return self.select((self.times >= start) & (self.times <= end))

    def __eq__(self, other):
        if not isinstance(other, FieldSeries):
            return NotImplemented
        return (self.spec == other.spec and np.array_equal(self.times, other.times)
                and self.frames.tobytes() == other.frames.tobytes())


def write_grid_stack(series: FieldSeries, path) -> None:
    spec = series.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, spec.n_lat, spec.n_lon, len(series)))
        fh.write(spec.lats.astype("<f8").tobytes())
        fh.write(spec.lons.astype("<f8").tobytes())
        fh.write(series.times.astype("<i4").tobytes())
        fh.write(series.frames.astype("<f8").tobytes())


def read_grid_stack(path, units: str = "", variable: str = "") -> FieldSeries:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", field="magic")
    magic, n_lat, n_lon, n_time = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", field="magic")
    if n_lat == 0:
        raise FormatError(f"{path}: n_lat is zero", field="n_lat")
    if n_lon == 0:
        raise FormatError(f"{path}: n_lon is zero", field="n_lon")
    off = _HEADER.size
    need_lat = off + 8 * n_lat
    need_lon = need_lat + 8 * n_lon
    need_all = need_lon + 4 * n_time + 8 * n_time * n_lat * n_lon
    if len(raw) < need_lat:
        raise FormatError(f"{path}: file too short for n_lat={n_lat}", field="n_lat")
    if len(raw) < need_lon:
        raise FormatError(f"{path}: file too short for n_lon={n_lon}", field="n_lon")
    if len(raw) != need_all:
        raise FormatError(
            f"{path}: size {len(raw)} does not match header "
            f"(n_lat={n_lat}, n_lon={n_lon}, n_time={n_time} -> {need_all})",
            field="n_time")
    lats = np.frombuffer(raw, "<f8", n_lat, off)
    lons = np.frombuffer(raw, "<f8", n_lon, need_lat)
    times = np.frombuffer(raw, "<i4", n_time, need_lon)
    payload = np.frombuffer(raw, "<f8", n_time * n_lat * n_lon, need_lon + 4 * n_time)
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise DataError(f"{path}: non-finite payload at index {bad[0]}", index=int(bad[0]))
    spec = GridSpec(lats, lons)
    return FieldSeries(spec, times, payload.reshape(n_time, n_lat * n_lon), units, variable)


def latitude_weights(spec: GridSpec) -> np.ndarray:
    """Cosine-latitude weights, one per grid point, normalized to sum to d."""
    c = np.cos(np.deg2rad(spec.lats))
    c[np.abs(spec.lats) == 90.0] = 0.0
    c = np.clip(c, 0.0, None)
    total = c.sum() * spec.n_lon
    if total <= 0.0:
        raise DegenerateGridError("all grid latitudes are polar; weights undefined")
    w = np.repeat(c, spec.n_lon) * (spec.size / total)
    w.setflags(write=False)
    return w


def weighted_mean(values, spec: GridSpec) -> np.ndarray:
    """Area-weighted spatial mean along the last axis."""
    return np.asarray(values) @ latitude_weights(spec) / spec.size


@dataclass(frozen=True, eq=False)
class EnsembleSnapshot:
    time: int
    member_fields: tuple
    x_vec: np.ndarray
    member_means: np.ndarray

    @property
    def m(self) -> int:
        return self.member_means.size

    @property
    def d_in(self) -> int:
        return self.x_vec.size

    @property
    def layout(self) -> tuple:
        return tuple((f.spec.n_lat, f.spec.n_lon) for f in self.member_fields)


def vectorize_ensemble(members: Sequence[GridField], standardizers, time: int = 0) -> EnsembleSnapshot:
    """Concatenate standardized member fields into one kernel input vector.

    ``standardizers`` holds one ``(mean, std)`` pair per member. Member means
    are latitude-weighted averages of the raw values on each member's grid.
    """
    members = tuple(members)
    if not members:
        raise DataError("ensemble has no members")
    if len(standardizers) != len(members):
        raise DataError(f"{len(standardizers)} standardizers for {len(members)} members")
    parts, means = [], []
    for i, (f, (mu, sd)) in enumerate(zip(members, standardizers)):
        if not sd > 0:
            raise DataError(f"member {i}: standard deviation must be positive, got {sd}", index=i)
        parts.append((f.values - mu) / sd)
        means.append(weighted_mean(f.values, f.spec))
    return EnsembleSnapshot(int(time), members, _frozen(np.concatenate(parts)), _frozen(means))


def compute_standardizers(series: Sequence[FieldSeries]) -> list[tuple[float, float]]:
    """Per-member latitude-weighted mean and pooled standard deviation."""
    out = []
    for s in series:
        if len(s) == 0:
            raise DataError("cannot standardize an empty series")
        w = latitude_weights(s.spec)
        mu = float(np.mean(s.frames @ w) / s.spec.size)
        var = float(np.mean(((s.frames - mu) ** 2) @ w) / s.spec.size)
        out.append((mu, float(np.sqrt(var))))
    return out


def snapshots_from_series(members: Sequence[FieldSeries], standardizers) -> list[EnsembleSnapshot]:
    """Vectorize time-aligned member series frame by frame."""
    members = list(members)
    if not members:
        raise DataError("ensemble has no members")
    times = members[0].times
    for i, s in enumerate(members[1:], 1):
        if not np.array_equal(s.times, times):
            raise DataError(f"member {i} is not time-aligned with member 0", index=i)
    return [vectorize_ensemble([s.field(t) for s in members], standardizers, times[t])
            for t in range(times.size)]


@dataclass(frozen=True, eq=False)
class TrainingSet:
    snapshots: tuple
    targets: FieldSeries
    standardizers: tuple = ()

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        object.__setattr__(self, "snapshots", snaps)
        object.__setattr__(self, "standardizers",
                           tuple((float(a), float(b)) for a, b in self.standardizers))
        if len(snaps) != len(self.targets):
            raise DataError(f"{len(snaps)} snapshots but {len(self.targets)} target frames")
        for i, s in enumerate(snaps):
            if s.time != self.targets.times[i]:
                raise DataError(f"snapshot {i} time {s.time} != target time "
                                f"{self.targets.times[i]}", index=i)
        if snaps:
            d_in, m = snaps[0].d_in, snaps[0].m
            for i, s in enumerate(snaps):
                if s.d_in != d_in or s.m != m:
                    raise DataError(f"snapshot {i} has inconsistent layout", index=i)
        object.__setattr__(self, "_x", _frozen([s.x_vec for s in snaps]) if snaps
                           else np.zeros((0, 0)))
        object.__setattr__(self, "_means", _frozen([s.member_means for s in snaps]) if snaps
                           else np.zeros((0, 0)))

    @property
    def n(self) -> int:
        return len(self.snapshots)

    @property
    def d(self) -> int:
        return self.targets.spec.size

    @property
    def inputs(self) -> np.ndarray:
        """(n, d_in) matrix of stacked kernel inputs."""
        return self._x

    @property
    def member_means(self) -> np.ndarray:
        """(n, m) matrix of raw member spatial means."""
        return self._means

    @property
    def target_means(self) -> np.ndarray:
        return weighted_mean(self.targets.frames, self.targets.spec)


@dataclass(frozen=True)
class Manifest:
    """Ensemble manifest: member files plus an optional target file.

    Paths are stored as written and resolved against ``base_dir``.
    """

    variable: str
    units: str
    members: tuple  # of (name, path)
    target: str | None = None
    base_dir: str = "."

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def member_names(self) -> list[str]:
        return [name for name, _ in self.members]

    def load_members(self) -> list[FieldSeries]:
        return [read_grid_stack(self.resolve(p), self.units, self.variable)
                for _, p in self.members]

    def load_target(self) -> FieldSeries:
        if self.target is None:
            raise FormatError("manifest has no target entry", field="target")
        return read_grid_stack(self.resolve(self.target), self.units, self.variable)

    def to_json(self) -> dict:
        doc = {"variable": self.variable, "units": self.units,
               "members": [{"name": n, "path": str(p)} for n, p in self.members]}
        if self.target is not None:
            doc["target"] = str(self.target)
        return doc


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})", field="manifest") from exc
    for key in ("variable", "units", "members"):
        if key not in doc:
            raise FormatError(f"{path}: manifest missing '{key}'", field=key)
    unknown = set(doc) - {"variable", "units", "members", "target"}
    if unknown:
        raise FormatError(f"{path}: unknown manifest keys {sorted(unknown)}", field=sorted(unknown)[0])
    members = []
    for i, mem in enumerate(doc["members"]):
        if not isinstance(mem, dict) or "name" not in mem or "path" not in mem:
            raise FormatError(f"{path}: member {i} needs 'name' and 'path'", field="members")
        members.append((str(mem["name"]), str(mem["path"])))
    names = [n for n, _ in members]
    if len(set(names)) != len(names):
        raise FormatError(f"{path}: duplicate member names", field="members")
    return Manifest(str(doc["variable"]), str(doc["units"]), tuple(members),
                    doc.get("target"), str(path.parent))


def write_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
