"""Noise schedule, forward corruption, masked denoising loss, ancestral
sampler and the Adam pretraining loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import autograd as ag
from .context import context_tokens
from .denoiser import ModelConfig, Params, as_leaves, decode_output, predict_noise
from .masking import TASK_NAMES, flatten_mask, pretraining_mask
from .samples import SampleSet
from .tokenizer import embed, fit_embedding

log = logging.getLogger(__name__)

# predict(e_k, k, o, y) -> eps_hat; lets tests inject oracle networks.
Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None], np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    linear_noise_coef: bool = False  # noise scaled by (1 - abar) rather than sqrt(1 - abar)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("need at least one diffusion step")
        if np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) < 0):
            raise ValueError("betas must be nondecreasing inside (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def K(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sigmas(self) -> np.ndarray:
        """Posterior std per step; index 0 (k=1) is 0 by convention."""
        ab = self.alpha_bars
        prev = np.concatenate([[1.0], ab[:-1]])
        s = np.sqrt((1.0 - prev) / (1.0 - ab) * self.betas)
        s[0] = 0.0
        return s

    def at(self, k):
        """(alpha_bar_k, noise coefficient) for 1-based step(s) ``k``."""
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise ValueError(f"diffusion step out of range: {k} not in [1, {self.K}]")
        ab = self.alpha_bars[k - 1]
        coef = (1.0 - ab) if self.linear_noise_coef else np.sqrt(1.0 - ab)
        return ab, coef


def make_schedule(
    K: int = 50, beta_min: float = 1e-4, beta_max: float = 0.05, linear_noise_coef: bool = False
) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(np.linspace(beta_min, beta_max, K), linear_noise_coef)


def q_sample(e, k, noise, sched: NoiseSchedule):
    """Corrupt ``e`` to step ``k``. ``k`` is a scalar or one step per batch row.

    Works on arrays or Tensors (the result is differentiable in ``e``).
    """
    ab, coef = sched.at(k)
    ab, coef = np.asarray(ab, dtype=np.float64), np.asarray(coef, dtype=np.float64)
    shape = np.shape(ab) + (1,) * (np.ndim(noise) - np.ndim(ab))
    a, c = np.sqrt(ab).reshape(shape), coef.reshape(shape)
    if isinstance(e, ag.Tensor):
        return e * a + noise * c
    return np.asarray(e) * a + np.asarray(noise) * c


# ------------------------------------------------------------------ losses


@dataclass(frozen=True)
class LossOptions:
    """``recon_weight`` scales the decoder reconstruction term (0 disables it)."""

    recon_weight: float = 1.0


def _per_sample_mask(m, B: int, N: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3:
        m = flatten_mask(m)
    m = np.broadcast_to(m, (B, N)) if m.ndim == 1 else m
    if m.shape != (B, N):
        raise ValueError(f"shape mismatch: mask {m.shape} for batch ({B}, {N})")
    if np.any(m.sum(axis=1) == 0):
        raise ValueError("empty mask: a sample has no target tokens")
    return m


def masked_mse(err: ag.Tensor, m: np.ndarray) -> ag.Tensor:
    """Squared error averaged over masked entries per sample, then over the batch."""
    B, N, W = err.shape
    weights = m[:, :, None] / (m.sum(axis=1)[:, None, None] * W * B)
    return ag.sum(ag.square(err) * weights)


def draw_noise(rng: np.random.Generator, B: int, N: int, C: int, K: int):
    """k ~ U{1..K} per sample and eps ~ N(0, I); one fixed draw order."""
    k = rng.integers(1, K + 1, size=B)
    eps = rng.standard_normal((B, N, C))
    return k, eps


def denoising_term(
    params, e, o, m, y, k, eps, sched: NoiseSchedule, cfg: ModelConfig, predict: Predictor | None
) -> ag.Tensor:
    # Noise only the targets: observed slots stay 0, as they do when sampling.
    e_k = q_sample(e, k, eps * np.asarray(m)[:, :, None], sched)
    if predict is None:
        eps_hat = predict_noise(e_k, k, o, y, params, cfg, sched)
    else:
        y_arr = None if y is None else ag.as_tensor(y).data
        eps_hat = ag.as_tensor(predict(ag.as_tensor(e_k).data, k, ag.as_tensor(o).data, y_arr))
    return masked_mse(ag.as_tensor(eps) - eps_hat, m)


def recon_term(params, tokens: np.ndarray, emb: ag.Tensor, m: np.ndarray) -> ag.Tensor:
    """Decoder fit on target tokens: decode(E_x(X)) vs X."""
    return masked_mse(decode_output(emb, params) - tokens, m)


def pretrain_objective(
    params,
    tokens: np.ndarray,
    m,
    sched: NoiseSchedule,
    cfg: ModelConfig,
    rng: np.random.Generator,
    y=None,
    options: LossOptions = LossOptions(),
    predict: Predictor | None = None,
) -> ag.Tensor:
    """Scalar Tensor: masked noise-prediction MSE (+ weighted reconstruction)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    B, N, _ = tokens.shape
    m = _per_sample_mask(m, B, N)
    emb = embed(tokens, params["emb.W"], params["emb.b"])
    col = m[:, :, None]
    e, o = emb * col, emb * (1.0 - col)
    k, eps = draw_noise(rng, B, N, cfg.C, sched.K)
    loss = denoising_term(params, e, o, m, y, k, eps, sched, cfg, predict)
    if options.recon_weight:
        loss = loss + recon_term(params, tokens, emb, m) * options.recon_weight
    return loss


def grads_of(loss: ag.Tensor, leaves: Mapping[str, ag.Tensor]) -> dict[str, np.ndarray]:
    loss.backward()
    return {
        k: (v.grad if v.grad is not None else np.zeros_like(v.data))
        for k, v in leaves.items()
        if v.requires_grad
    }


def pretrain_loss(
    params: Params,
    tokens: np.ndarray,
    m,
    sched: NoiseSchedule,
    cfg: ModelConfig,
    seed: int,
    y=None,
    options: LossOptions = LossOptions(),
    predict: Predictor | None = None,
    trainable=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and analytic gradients for every (trainable) parameter block.

    ``y`` may be an array, or a callable ``leaves -> Tensor`` when the context
    itself depends on trainable parameters.
    """
    leaves = as_leaves(params, trainable)
    rng = np.random.default_rng(seed)
    y_val = y(leaves) if callable(y) else y
    loss = pretrain_objective(leaves, tokens, m, sched, cfg, rng, y_val, options, predict)
    if not loss.requires_grad:
        return float(loss.data), {k: np.zeros_like(v) for k, v in params.items()}
    return float(loss.data), grads_of(loss, leaves)


# ----------------------------------------------------------------- sampling


def sample_latent(
    o: np.ndarray,
    m,
    y: np.ndarray | None,
    params,
    sched: NoiseSchedule,
    cfg: ModelConfig,
    seed: int,
    predict: Predictor | None = None,
) -> np.ndarray:
    """Ancestral sampling of the target tokens in embedding space.

    Observed positions stay 0 throughout; their content reaches the network
    only through ``o``.
    """
    o = np.asarray(o, dtype=np.float64)
    B, N, C = o.shape
    m = _per_sample_mask(m, B, N)[:, :, None]
    rng = np.random.default_rng(seed)
    if predict is None:

        def predict(e_k, k, o_, y_):
            return predict_noise(e_k, k, o_, y_, params, cfg, sched).data

    betas, alphas, abar, sigmas = sched.betas, sched.alphas, sched.alpha_bars, sched.sigmas
    e = rng.standard_normal((B, N, C)) * m
    for k in range(sched.K, 0, -1):
        kk = np.full(B, k)
        eps_hat = np.asarray(predict(e, kk, o, y))
        mu = (e - betas[k - 1] / np.sqrt(1.0 - abar[k - 1]) * eps_hat) / np.sqrt(alphas[k - 1])
        if k > 1:
            mu = mu + sigmas[k - 1] * rng.standard_normal((B, N, C))
        e = mu * m
    return e


def sample(
    o: np.ndarray,
    m,
    y: np.ndarray | None,
    params,
    sched: NoiseSchedule,
    cfg: ModelConfig,
    seed: int,
    predict: Predictor | None = None,
) -> np.ndarray:
    """Decoded token values (B, N, h0*v0*t0) for every position; callers keep
    only the target positions."""
    latent = sample_latent(o, m, y, params, sched, cfg, seed, predict)
    return decode_output(latent, params).data


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    tasks: tuple[str, ...] = TASK_NAMES
    random_ratio: float = 0.5
    recon_weight: float = 1.0
    fit_embedding: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


class Adam:
    def __init__(self, params: Params, names, cfg: TrainConfig):
        self.cfg = cfg
        self.names = [n for n in params if n in set(names)]
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = c.beta1 * self.m[n] + (1.0 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1.0 - c.beta2) * g * g
            update = c.lr * (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + c.eps)
            params[n] = params[n] - update


class DivergenceError(RuntimeError):
    pass


def check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became non-finite ({loss}) at step {step}")


def pretrain_trainable(params) -> list[str]:
    """Blocks updated by pretraining: everything but the token embedding
    (fitted to data, kept fixed) and the context streams."""
    return [n for n in params if not n.startswith(("ctx.", "emb."))]


def train(
    params: Params,
    data: SampleSet,
    cfg: ModelConfig,
    sched: NoiseSchedule,
    tcfg: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[Params, list[float]]:
    """Self-supervised masked pretraining (no context). Returns new params
    and the per-step loss trace; ``params`` is not modified."""
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    tokens = data.tokens(cfg.token)
    if tcfg.fit_embedding:
        params.update(fit_embedding(tokens, cfg.C))
    trainable = pretrain_trainable(params)
    opt = Adam(params, trainable, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    options = LossOptions(tcfg.recon_weight)
    trace: list[float] = []
    B = min(tcfg.batch_size, len(data))
    for step in range(tcfg.steps):
        idx = rng.choice(len(data), size=B, replace=False)
        m = pretraining_mask(rng, cfg.lattice, tcfg.tasks, tcfg.random_ratio)
        loss, grads = pretrain_loss(
            params, tokens[idx], m, sched, cfg, int(rng.integers(2**63)), options=options,
            trainable=trainable,
        )
        check_finite(loss, step)
        opt.step(params, grads)
        trace.append(loss)
        log.debug("pretrain step %d loss %.6f", step, loss)
        if on_step:
            on_step(step, loss)
    return params, trace


def batch_context(params, data: SampleSet, idx, cfg: ModelConfig, use_users=True, use_poi=True):
    return context_tokens(
        params,
        cfg.token,
        data.users[idx],
        data.poi[idx],
        data.t_start[idx],
        data.interval_minutes,
        use_users,
        use_poi,
    )
