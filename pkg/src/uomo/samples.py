"""Cutting a city into normalized (crop x window) training samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_store import NormStats, PoiMap, TrafficGrid, compute_stats
from .tokenizer import TokenSpec, tokenize_array


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Stacked samples. ``traffic`` and ``users`` are normalized (S, H, V, T)."""

    traffic: np.ndarray
    users: np.ndarray
    poi: np.ndarray  # (S, H, V, P_cat) raw counts
    t_start: np.ndarray  # (S,) absolute step index of each window start
    interval_minutes: int
    traffic_stats: NormStats
    user_stats: NormStats

    def __len__(self) -> int:
        return self.traffic.shape[0]

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.traffic.shape[1:]

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(
            self.traffic[index],
            self.users[index],
            self.poi[index],
            self.t_start[index],
            self.interval_minutes,
            self.traffic_stats,
            self.user_stats,
        )

    def tokens(self, spec: TokenSpec) -> np.ndarray:
        return tokenize_array(self.traffic, spec)


def city_samples(
    traffic: TrafficGrid,
    users: TrafficGrid,
    poi: PoiMap,
    crop: tuple[int, int],
    length: int,
    traffic_stats: NormStats | None = None,
    user_stats: NormStats | None = None,
    stride: int | None = None,
) -> SampleSet:
    """Non-overlapping spatial crops times time windows starting every
    ``stride`` steps (default: back to back), ordered window-major. Stats
    default to the min/max of the given grids."""
    H, V, T = traffic.shape
    ch, cv = crop
    if users.shape != traffic.shape or (poi.H, poi.V) != (H, V):
        raise ValueError("traffic, users and POI grids must share H x V (x T)")
    if ch > H or cv > V or length > T:
        raise ValueError(f"crop {crop} x {length} larger than city {traffic.shape}")
    stride = stride or length
    if stride < 1:
        raise ValueError("stride must be positive")
    traffic_stats = traffic_stats or compute_stats(traffic.values)
    user_stats = user_stats or compute_stats(users.values)
    tv = (traffic.values - traffic_stats.minimum) / (traffic_stats.maximum - traffic_stats.minimum)
    uv = (users.values - user_stats.minimum) / (user_stats.maximum - user_stats.minimum)
    out_t, out_u, out_p, starts = [], [], [], []
    for t in range(0, T - length + 1, stride):
        for h in range(0, H - ch + 1, ch):
            for v in range(0, V - cv + 1, cv):
                out_t.append(tv[h : h + ch, v : v + cv, t : t + length])
                out_u.append(uv[h : h + ch, v : v + cv, t : t + length])
                out_p.append(poi.counts[h : h + ch, v : v + cv])
                starts.append(t)
    return SampleSet(
        np.stack(out_t),
        np.stack(out_u),
        np.stack(out_p),
        np.asarray(starts, dtype=np.int64),
        traffic.interval_minutes,
        traffic_stats,
        user_stats,
    )


def split_city(
    traffic: TrafficGrid,
    users: TrafficGrid,
    poi: PoiMap,
    crop: tuple[int, int],
    length: int,
    train_windows: int,
    stride: int | None = None,
) -> tuple[SampleSet, SampleSet]:
    """Train on the first ``train_windows * length`` steps, hold out the
    rest. Windows start on one global grid of ``stride`` steps, so both
    splits share the same phase. Normalization stats come from the training
    span only."""
    cut = train_windows * length
    stride = stride or length
    start = cut + (-cut) % stride
    if not 0 < cut < traffic.T or start + length > traffic.T:
        raise ValueError(f"train_windows={train_windows} leaves no train or held-out span")
    head_t, head_u = traffic.window(0, cut), users.window(0, cut)
    ts, us = compute_stats(head_t.values), compute_stats(head_u.values)
    train = city_samples(head_t, head_u, poi, crop, length, ts, us, stride)
    rest = traffic.T - start
    tail = city_samples(
        traffic.window(start, rest), users.window(start, rest), poi, crop, length, ts, us, stride
    )
    tail = SampleSet(
        tail.traffic, tail.users, tail.poi, tail.t_start + start, tail.interval_minutes, ts, us
    )
    return train, tail
