"""Context tokens from attached users and POI counts.

Users go through the traffic tokenizer with their own embedding. POI counts
become a static per-cell feature, which is fused with a calendar embedding
of each time step into one scalar per (h, v, t); that scalar field is then
tokenized and embedded like traffic.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .tokenizer import TokenSpec, tokenize_array

MINUTES_PER_DAY = 24 * 60


def _leaf(params, name):
    v = params[name]
    return v if isinstance(v, ag.Tensor) else ag.Tensor(v)


def calendar(t, interval_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    """(day-of-week, hour-of-day) for step indices; step 0 is Monday 00:00."""
    minutes = np.asarray(t, dtype=np.int64) * interval_minutes
    return (minutes // MINUTES_PER_DAY) % 7, (minutes // 60) % 24


def tokenize_tensor(field: ag.Tensor, spec: TokenSpec) -> ag.Tensor:
    """Differentiable twin of :func:`tokenizer.tokenize_array` for (B, H, V, T)."""
    B, H, V, T = field.shape
    Hp, Vp, Tp = spec.lattice(H, V, T)
    x = ag.reshape(field, (B, Hp, spec.h0, Vp, spec.v0, Tp, spec.t0))
    x = ag.transpose(x, (0, 5, 1, 3, 2, 4, 6))
    return ag.reshape(x, (B, Hp * Vp * Tp, spec.size))


def tokenize_users(users: np.ndarray, spec: TokenSpec, params) -> ag.Tensor:
    """(B, H, V, T) user counts -> (B, N, C) user tokens."""
    tokens = tokenize_array(np.asarray(users, dtype=np.float64), spec)
    W, b = _leaf(params, "ctx.user.W"), _leaf(params, "ctx.user.b")
    if tokens.shape[-1] != W.shape[0]:
        raise ValueError(f"shape mismatch: user tokens {tokens.shape} vs weight {W.shape}")
    return ag.as_tensor(tokens) @ W + b


def poi_static(counts: np.ndarray, params) -> ag.Tensor:
    """sigmoid(W_s counts + B_s) per cell: (..., P_cat) -> (..., d)."""
    W = _leaf(params, "ctx.poi.W")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape[-1] != W.shape[0]:
        raise ValueError(f"category mismatch: {counts.shape[-1]} vs {W.shape[0]}")
    return ag.sigmoid(ag.as_tensor(counts) @ W + _leaf(params, "ctx.poi.b"))


def time_embed(t, interval_minutes: int, params) -> ag.Tensor:
    """Calendar embedding tau(t): day and hour tables fused by affine + sigmoid."""
    t = np.asarray(t)
    if np.any(t < 0):
        raise ValueError("timestamps must be nonnegative")
    day, hour = calendar(t, interval_minutes)
    both = ag.concat([ag.take(_leaf(params, "ctx.day"), day), ag.take(_leaf(params, "ctx.hour"), hour)])
    return ag.sigmoid(both @ _leaf(params, "ctx.time.W") + _leaf(params, "ctx.time.b"))


def poi_dynamic(h_static: ag.Tensor, t: np.ndarray, interval_minutes: int, params) -> ag.Tensor:
    """sigmoid(W_l [h_s ; tau(t)] + B_l): (B, H, V, d) x (B, T) -> (B, H, V, T).

    The concatenation is applied as the sum of the two halves of W_l so the
    (H, V, T, 2d) tensor is never materialized.
    """
    h_static = ag.as_tensor(h_static)
    t = np.atleast_2d(t)
    B, H, V, d = h_static.shape
    if t.shape[0] != B:
        raise ValueError(f"shape mismatch: {B} POI maps vs {t.shape[0]} timestamp rows")
    W_s, W_t = ag.split(_leaf(params, "ctx.dyn.W"), 2, axis=0)
    tau = time_embed(t, interval_minutes, params)  # B, T, d
    static_part = ag.reshape(h_static @ W_s, (B, H, V, 1))
    time_part = ag.reshape(tau @ W_t, (B, 1, 1, t.shape[1]))
    return ag.sigmoid(static_part + time_part + _leaf(params, "ctx.dyn.b"))


def poi_tokens(poi_counts, t, interval_minutes: int, spec: TokenSpec, params) -> ag.Tensor:
    dyn = poi_dynamic(poi_static(poi_counts, params), t, interval_minutes, params)
    tokens = tokenize_tensor(dyn, spec)
    return tokens @ _leaf(params, "ctx.poitok.W") + _leaf(params, "ctx.poitok.b")


def fuse_context(c_user, c_poi) -> ag.Tensor:
    c_user, c_poi = ag.as_tensor(c_user), ag.as_tensor(c_poi)
    if c_user.shape != c_poi.shape:
        raise ValueError(f"shape mismatch: {c_user.shape} vs {c_poi.shape}")
    return c_user + c_poi


def context_tokens(
    params,
    spec: TokenSpec,
    users: np.ndarray,
    poi_counts: np.ndarray,
    t_start: np.ndarray,
    interval_minutes: int,
    use_users: bool = True,
    use_poi: bool = True,
) -> ag.Tensor | None:
    """y = c_u + c_p for a batch. Dropping a stream reproduces the
    without-users / without-POI ablations; dropping both returns None."""
    users = np.asarray(users, dtype=np.float64)
    B, H, V, T = users.shape
    parts = []
    if use_users:
        parts.append(tokenize_users(users, spec, params))
    if use_poi:
        t = np.asarray(t_start)[:, None] + np.arange(T)[None, :]
        parts.append(poi_tokens(poi_counts, t, interval_minutes, spec, params))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else fuse_context(*parts)
