"""Traffic/user/POI grids, their binary file format, normalization and a
synthetic city generator.

File layout: one UTF-8 JSON header line, then a little-endian payload.
Traffic and user grids carry float64 values ordered t-major, then h, then v
(flat index ``t*H*V + h*V + v``). POI maps carry int32 counts ordered h, v,
category.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Category order is part of the POI file format; do not reorder.
POI_CATEGORIES = (
    "shopping",
    "enterprise",
    "restaurant",
    "local_living",
    "transportation",
    "public_health",
    "automobile",
    "physical_facilities",
    "accommodation",
    "finance",
    "government",
    "education",
    "business",
    "public_facilities",
    "scenic_spot",
)
N_POI = len(POI_CATEGORIES)

# Hour of the daily peak and relative amplitude per category.
# Restaurants get a two-peak profile (lunch and evening), see category_profiles.
_PEAK_HOUR = np.array(
    [16.0, 11.0, 12.5, 19.0, 8.5, 10.0, 15.0, 18.0, 22.0, 11.0, 10.5, 9.5, 14.0, 15.5, 14.5]
)
_AMPLITUDE = np.array(
    [0.9, 1.0, 1.4, 0.8, 1.1, 0.4, 0.3, 0.6, 0.7, 0.5, 0.4, 0.8, 0.9, 0.3, 0.6]
)
_RESTAURANT = POI_CATEGORIES.index("restaurant")


class GridFormatError(ValueError):
    """Malformed grid file. ``category`` names the failure class."""

    def __init__(self, category: str, detail: str):
        super().__init__(f"{category}: {detail}")
        self.category = category


def _check_values(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value in grid")
    if np.any(values < 0):
        raise ValueError("negative value in grid")


@dataclass(frozen=True, eq=False)
class TrafficGrid:
    """H x V x T nonnegative volumes. ``kind`` is ``"traffic"`` or ``"users"``."""

    values: np.ndarray
    interval_minutes: int = 60
    kind: str = "traffic"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"invalid dimension: grid shape {values.shape}")
        if self.interval_minutes < 1:
            raise ValueError("interval_minutes must be positive")
        if self.kind not in ("traffic", "users"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        _check_values(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def V(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrafficGrid):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.interval_minutes == other.interval_minutes
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def window(self, t_start: int, length: int) -> "TrafficGrid":
        return TrafficGrid(
            self.values[:, :, t_start : t_start + length], self.interval_minutes, self.kind
        )

    def crop(self, h: int, v: int, size_h: int, size_v: int) -> "TrafficGrid":
        return TrafficGrid(
            self.values[h : h + size_h, v : v + size_v], self.interval_minutes, self.kind
        )


def UserGrid(values, interval_minutes: int = 60) -> TrafficGrid:
    return TrafficGrid(values, interval_minutes, kind="users")


@dataclass(frozen=True, eq=False)
class PoiMap:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.ndim != 3 or counts.shape[2] != N_POI:
            raise ValueError(f"POI map must be H x V x {N_POI}, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.mod(counts, 1) == 0):
                raise ValueError("POI counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ValueError("negative POI count")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def H(self) -> int:
        return self.counts.shape[0]

    @property
    def V(self) -> int:
        return self.counts.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoiMap):
            return NotImplemented
        return bool(np.array_equal(self.counts, other.counts))

    def crop(self, h: int, v: int, size_h: int, size_v: int) -> "PoiMap":
        return PoiMap(self.counts[h : h + size_h, v : v + size_v])


@dataclass(frozen=True)
class NormStats:
    minimum: float
    maximum: float

    def to_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum}


# ---------------------------------------------------------------- file I/O


def _write(path: Path, header: dict, payload: bytes) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write grid file {path}: {exc}") from exc


def _read(path: Path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read grid file {path}: {exc}") from exc
    line, sep, payload = raw.partition(b"\n")
    if not sep:
        raise GridFormatError("malformed header", f"{path}: no header line")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFormatError("malformed header", f"{path}: {exc}") from exc
    if not isinstance(header, dict):
        raise GridFormatError("malformed header", f"{path}: header is not an object")
    return header, payload


def _dims(header: dict, keys: tuple[str, ...], path) -> list[int]:
    dims = []
    for key in keys:
        value = header.get(key)
        if not isinstance(value, int) or isinstance(value, bool):
            raise GridFormatError("malformed header", f"{path}: missing integer {key!r}")
        if value < 1:
            raise GridFormatError("invalid dimension", f"{path}: {key}={value}")
        dims.append(value)
    return dims


def save_grid(grid: TrafficGrid, path) -> None:
    _check_values(grid.values)
    header = {
        "H": grid.H,
        "V": grid.V,
        "T": grid.T,
        "interval_minutes": grid.interval_minutes,
        "kind": grid.kind,
    }
    payload = np.ascontiguousarray(grid.values.transpose(2, 0, 1)).astype("<f8").tobytes()
    _write(path, header, payload)


def load_grid(path) -> TrafficGrid:
    header, payload = _read(path)
    H, V, T, interval = _dims(header, ("H", "V", "T", "interval_minutes"), path)
    kind = header.get("kind")
    if kind not in ("traffic", "users"):
        raise GridFormatError("malformed header", f"{path}: kind={kind!r}")
    if len(payload) != 8 * H * V * T:
        raise GridFormatError(
            "payload length mismatch", f"{path}: expected {H * V * T} float64 values"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(T, H, V).transpose(1, 2, 0)
    if not np.all(np.isfinite(values)):
        raise GridFormatError("non-finite value", str(path))
    if np.any(values < 0):
        raise GridFormatError("negative value", str(path))
    return TrafficGrid(values.astype(np.float64), interval, kind)


def save_poi(poi: PoiMap, path) -> None:
    header = {"H": poi.H, "V": poi.V, "P_cat": N_POI}
    if poi.counts.max(initial=0) > np.iinfo(np.int32).max:
        raise ValueError("POI count exceeds int32 range")
    _write(path, header, np.ascontiguousarray(poi.counts).astype("<i4").tobytes())


def load_poi(path) -> PoiMap:
    header, payload = _read(path)
    H, V, P = _dims(header, ("H", "V", "P_cat"), path)
    if P != N_POI:
        raise GridFormatError("malformed header", f"{path}: P_cat={P}, expected {N_POI}")
    if len(payload) != 4 * H * V * P:
        raise GridFormatError("payload length mismatch", f"{path}: expected {H * V * P} int32")
    counts = np.frombuffer(payload, dtype="<i4").reshape(H, V, P)
    if np.any(counts < 0):
        raise GridFormatError("negative value", str(path))
    return PoiMap(counts.astype(np.int64))


# ----------------------------------------------------------- normalization


def compute_stats(values: np.ndarray) -> NormStats:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        hi = lo + 1.0
    return NormStats(lo, hi)


def apply_norm(grid: TrafficGrid, stats: NormStats) -> TrafficGrid:
    """Min-max scale with given stats. Values outside the stats' range are
    clipped at 0 from below so the grid stays a valid TrafficGrid."""
    scaled = (grid.values - stats.minimum) / (stats.maximum - stats.minimum)
    return TrafficGrid(np.maximum(scaled, 0.0), grid.interval_minutes, grid.kind)


def normalize(grid: TrafficGrid) -> tuple[TrafficGrid, NormStats]:
    stats = compute_stats(grid.values)
    return apply_norm(grid, stats), stats


def denormalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values) * (stats.maximum - stats.minimum) + stats.minimum


def denormalize(grid: TrafficGrid, stats: NormStats) -> TrafficGrid:
    return TrafficGrid(
        np.maximum(denormalize_values(grid.values, stats), 0.0), grid.interval_minutes, grid.kind
    )


# --------------------------------------------------------- synthetic city


@dataclass(frozen=True)
class SynthOptions:
    """Knobs of the synthetic generator. Defaults are what every test uses."""

    base: float = 2.0
    noise_std: float = 0.5
    poi_mean: float = 1.5
    phase_shift_hours: float = 0.0
    amplitude_scale: float = 1.0
    user_scale: float = 40.0
    user_noise: float = 0.05
    zero_poi: bool = False


def diurnal(t: np.ndarray, peak_hour: np.ndarray, interval_minutes: int) -> np.ndarray:
    """Unit daily profile peaking at ``peak_hour``; period is one day in steps.

    Returns shape ``t.shape + peak_hour.shape``.
    """
    hours = np.asarray(t, dtype=np.float64) * interval_minutes / 60.0
    phase = 2 * np.pi * (hours[..., None] - np.asarray(peak_hour)) / 24.0
    return 0.5 * (1.0 + np.cos(phase))


def category_profiles(T: int, interval_minutes: int, phase_shift_hours: float = 0.0) -> np.ndarray:
    """T x 15 daily profiles, one per POI category."""
    t = np.arange(T)
    profile = diurnal(t, _PEAK_HOUR + phase_shift_hours, interval_minutes)
    meals = diurnal(t, np.array([12.5, 19.0]) + phase_shift_hours, interval_minutes)
    profile[:, _RESTAURANT] = meals.mean(axis=1)
    return profile


def synth_city(
    seed: int,
    H: int,
    V: int,
    T: int,
    interval_minutes: int = 60,
    options: SynthOptions | None = None,
) -> tuple[TrafficGrid, TrafficGrid, PoiMap]:
    """Deterministic synthetic city: traffic, attached users and POI counts.

    traffic[h, v, t] = base + sum_p count[h, v, p] * amp[p] * profile[t, p] + noise,
    clipped at 0. Users are a saturating monotone transform of traffic with
    independent multiplicative noise.
    """
    if min(H, V, T) < 1 or interval_minutes < 1:
        raise ValueError(f"invalid dimension: H={H}, V={V}, T={T}, interval={interval_minutes}")
    opt = options or SynthOptions()
    rng = np.random.default_rng(seed)

    # POI intensity: a few hotspots with their own category mix over a flat floor.
    hh, vv = np.meshgrid(np.arange(H), np.arange(V), indexing="ij")
    intensity = np.full((H, V, N_POI), 0.3)
    for _ in range(3):
        ch, cv = rng.uniform(0, H), rng.uniform(0, V)
        width = rng.uniform(1.0, max(1.5, 0.4 * max(H, V)))
        mix = rng.dirichlet(np.full(N_POI, 0.5))
        bump = np.exp(-((hh - ch) ** 2 + (vv - cv) ** 2) / (2 * width**2))
        intensity += opt.poi_mean * N_POI * bump[..., None] * mix
    counts = rng.poisson(intensity)
    if opt.zero_poi:
        counts = np.zeros_like(counts)

    profile = category_profiles(T, interval_minutes, opt.phase_shift_hours)
    amp = _AMPLITUDE * opt.amplitude_scale * 4.0 / N_POI
    signal = np.einsum("hvp,tp->hvt", counts * amp, profile)
    noise = rng.normal(0.0, opt.noise_std, size=(H, V, T))
    traffic = np.maximum(opt.base + signal + noise, 0.0)

    user_noise = rng.normal(0.0, opt.user_noise, size=(H, V, T))
    users = np.maximum(opt.user_scale * np.log1p(traffic) * (1.0 + user_noise), 0.0)

    return (
        TrafficGrid(traffic, interval_minutes, "traffic"),
        TrafficGrid(users, interval_minutes, "users"),
        PoiMap(counts),
    )
