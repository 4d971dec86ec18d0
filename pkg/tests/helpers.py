"""Shared test utilities: central finite differences and small fixtures."""
from __future__ import annotations

import numpy as np

from uomo.denoiser import ModelConfig, random_params
from uomo.diffusion import make_schedule
from uomo.netopt import DeploymentInstance, SleepInstance
from uomo.tokenizer import TokenSpec

FD_STEP = 1e-5


def small_config() -> ModelConfig:
    """L=2, C=16, 16 tokens on an 8x8x64 grid."""
    return ModelConfig(TokenSpec(4, 4, 16, 16), (8, 8, 64), layers=2, heads=2, d_poi=4)


def block_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference relative to the block's gradient scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn, params, grads, n_coords=12, seed=0, step=FD_STEP):
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    For each block: ``n_coords`` single coordinates (always including the
    largest analytic entry) plus one random direction over the whole block.
    Returns ``{block: relative error}``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, value in params.items():
        g = np.asarray(grads[name])
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        picks = np.unique(np.append(picks, int(np.argmax(np.abs(g)))))
        num = np.empty(len(picks))
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            num[j] = (up - down) / (2 * step)
        direction = rng.standard_normal(value.shape)
        base = value.copy()
        params[name] = base + step * direction
        up = loss_fn(params)
        params[name] = base - step * direction
        down = loss_fn(params)
        params[name] = base
        dir_num = (up - down) / (2 * step)
        dir_ana = float(np.sum(g * direction))
        coord = block_error(g.reshape(-1)[picks], num)
        denom = max(abs(dir_ana), abs(dir_num))
        directional = 0.0 if denom == 0.0 else abs(dir_ana - dir_num) / denom
        out[name] = max(coord, directional)
    return out


def dense_model(seed=0):
    cfg = small_config()
    return cfg, random_params(cfg, seed), make_schedule()


def synthetic_tokens(cfg, B, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(B, cfg.n_tokens, cfg.token.size))


def synthetic_context(cfg, B, seed=0):
    """Users, POI counts and window starts for a batch of B samples."""
    rng = np.random.default_rng(seed + 1)
    H, V, T = cfg.grid
    users = rng.uniform(0.0, 1.0, size=(B, H, V, T))
    poi = rng.integers(0, 5, size=(B, H, V, 15))
    starts = rng.integers(0, 500, size=B)
    return users, poi, starts


def random_deployment(seed, at_most=False):
    rng = np.random.default_rng(seed)
    N, M, T = rng.integers(1, 5), rng.integers(0, 5), rng.integers(1, 4)
    # quarter-C0 demands make lattice y values exact, integer-ish ones make ties
    demand = rng.integers(0, 9, size=(N, T)) * 25.0 if seed % 2 else rng.uniform(0, 300, size=(N, T))
    return DeploymentInstance(demand, int(M), 100.0, float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), at_most)


def random_sleep(seed):
    rng = np.random.default_rng(seed)
    load = rng.uniform(10, 250, size=(2, 4)) if seed % 2 else rng.integers(1, 5, size=(2, 4)) * 50.0
    return SleepInstance(load, 100.0, 2, float(rng.uniform(0, 0.05)), float(rng.uniform(0, 0.5)),
                         rng.integers(0, 3, size=2))
