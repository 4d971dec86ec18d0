"""Context-aware contrastive fine-tuning with a partial freeze.

The objective rewards predicting the noise of a target given its own context
and penalizes (with a clamp) predicting it when the same context is paired
with targets taken from other samples of the batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .denoiser import ModelConfig, Params, as_leaves
from .diffusion import (
    Adam,
    LossOptions,
    NoiseSchedule,
    Predictor,
    TrainConfig,
    _per_sample_mask,
    batch_context,
    check_finite,
    denoising_term,
    draw_noise,
    grads_of,
    q_sample,
    recon_term,
)
from .masking import pretraining_mask
from .samples import SampleSet
from .tokenizer import embed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    n_neg: int = 1
    lam: float | None = None  # None: log(n_neg + 1) / (10 n_neg)
    clamp: float = 10.0

    def __post_init__(self):
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.clamp > 0:
            raise ValueError("clamp must be positive")

    @property
    def weight(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return math.log(self.n_neg + 1) / (self.n_neg * 10.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lam"] = self.weight
        return d


# Freeze profiles, as predicates on block names: True means frozen.
_ADAPTIVE = ("ada.W", "ada.b")
_DECODER = ("head.", "dec.", "ctx.")


def _is_trainable_default(name: str) -> bool:
    return name.endswith(_ADAPTIVE) or name.startswith(_DECODER)


PROFILES: dict[str, Callable[[str], bool]] = {
    "default": _is_trainable_default,
    "decoder_only": lambda n: n.startswith(_DECODER),
    "none": lambda n: True,
}


@dataclass(frozen=True)
class FreezePolicy:
    frozen: frozenset

    @classmethod
    def profile(cls, name: str, params) -> "FreezePolicy":
        """``default`` trains the adaptive-conditioning maps, the output head,
        decoder and context streams and freezes attention, feed-forward,
        norms, embeddings and positional tables. ``none`` freezes nothing."""
        if name not in PROFILES:
            raise ValueError(f"unknown freeze profile {name!r}; choose from {sorted(PROFILES)}")
        keep = PROFILES[name]
        return cls(frozenset(n for n in params if not keep(n)))

    def trainable(self, params) -> list[str]:
        return [n for n in params if n not in self.frozen]


def sample_pairs(batch_size: int, n_neg: int, seed: int) -> np.ndarray:
    """(B, n_neg) indices of negative targets: for each sample, distinct
    other samples of the batch drawn without replacement."""
    if batch_size < n_neg + 1:
        raise ValueError(f"batch of {batch_size} too small for {n_neg} distinct negatives")
    rng = np.random.default_rng(seed)
    out = np.empty((batch_size, n_neg), dtype=np.int64)
    for i in range(batch_size):
        others = np.delete(np.arange(batch_size), i)
        out[i] = rng.choice(others, size=n_neg, replace=False)
    return out


def _per_sample_mse(err: ag.Tensor, m: np.ndarray) -> ag.Tensor:
    """(B,) masked mean squared error of each sample."""
    B, N, W = err.shape
    weights = m[:, :, None] / (m.sum(axis=1)[:, None, None] * W)
    return ag.sum(ag.reshape(ag.square(err) * weights, (B, N * W)), axis=1)


def contrastive_objective(
    params,
    tokens: np.ndarray,
    m,
    y,
    sched: NoiseSchedule,
    cfg: ModelConfig,
    ccfg: ContrastiveConfig,
    rng: np.random.Generator,
    negatives: np.ndarray,
    options: LossOptions = LossOptions(),
    predict: Predictor | None = None,
) -> ag.Tensor:
    tokens = np.asarray(tokens, dtype=np.float64)
    B, N, _ = tokens.shape
    m = _per_sample_mask(m, B, N)
    emb = embed(tokens, params["emb.W"], params["emb.b"])
    col = m[:, :, None]
    e, o = emb * col, emb * (1.0 - col)
    # Positive term first with the exact draws pretraining would make.
    k, eps = draw_noise(rng, B, N, cfg.C, sched.K)
    loss = denoising_term(params, e, o, m, y, k, eps, sched, cfg, predict)
    if options.recon_weight:
        loss = loss + recon_term(params, tokens, emb, m) * options.recon_weight
    neg_total = None
    for j in range(negatives.shape[1]):
        k_j, eps_j = draw_noise(rng, B, N, cfg.C, sched.K)
        e_neg = ag.take(ag.reshape(e, (B, N * cfg.C)), negatives[:, j])
        e_neg = ag.reshape(e_neg, (B, N, cfg.C)) * col
        e_k = q_sample(e_neg, k_j, eps_j * col, sched)
        if predict is None:
            from .denoiser import predict_noise

            eps_hat = predict_noise(e_k, k_j, o, y, params, cfg, sched)
        else:
            y_arr = None if y is None else ag.as_tensor(y).data
            eps_hat = ag.as_tensor(predict(ag.as_tensor(e_k).data, k_j, ag.as_tensor(o).data, y_arr))
        term = _per_sample_mse(ag.as_tensor(eps_j) - eps_hat, m)
        neg_total = term if neg_total is None else neg_total + term
    clamped = ag.minimum(neg_total, ccfg.clamp)
    return loss - ag.mean(clamped) * ccfg.weight


def contrastive_loss(
    params: Params,
    tokens: np.ndarray,
    m,
    sched: NoiseSchedule,
    cfg: ModelConfig,
    ccfg: ContrastiveConfig,
    seed: int,
    y=None,
    negatives: np.ndarray | None = None,
    options: LossOptions = LossOptions(),
    predict: Predictor | None = None,
    trainable=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and gradients; frozen blocks (not in ``trainable``) get
    exact zeros. ``y`` may be a callable ``leaves -> Tensor``. Uses the same
    seed stream as pretraining for the positive term, so with lambda = 0 the
    value and gradients equal the pretraining loss."""
    tokens = np.asarray(tokens)
    B = tokens.shape[0]
    if negatives is None:
        negatives = sample_pairs(B, ccfg.n_neg, seed + 1)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.shape != (B, ccfg.n_neg):
        raise ValueError(f"shape mismatch: negatives {negatives.shape} for batch {B}, n_neg {ccfg.n_neg}")
    leaves = as_leaves(params, trainable)
    rng = np.random.default_rng(seed)
    y_val = y(leaves) if callable(y) else y
    loss = contrastive_objective(
        leaves, tokens, m, y_val, sched, cfg, ccfg, rng, negatives, options, predict
    )
    value = float(loss.data)
    check_finite(value, -1)
    grads = grads_of(loss, leaves) if loss.requires_grad else {}
    return value, {n: grads.get(n, np.zeros_like(params[n])) for n in params}


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    profile: str = "default"
    use_users: bool = True
    use_poi: bool = True
    recon_weight: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def finetune(
    params: Params,
    data: SampleSet,
    cfg: ModelConfig,
    sched: NoiseSchedule,
    ccfg: ContrastiveConfig = ContrastiveConfig(),
    fcfg: FinetuneConfig = FinetuneConfig(),
    policy: FreezePolicy | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[Params, list[float]]:
    """Contrastive descent over the unfrozen blocks with the pretraining
    optimizer. Frozen blocks come back bitwise unchanged."""
    policy = policy or FreezePolicy.profile(fcfg.profile, params)
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    trainable = policy.trainable(out)
    opt = Adam(out, trainable, TrainConfig(lr=fcfg.lr))
    tokens = data.tokens(cfg.token)
    B = min(fcfg.batch_size, len(data))
    rng = np.random.default_rng(fcfg.seed)
    options = LossOptions(fcfg.recon_weight)
    trace: list[float] = []
    for step in range(fcfg.steps):
        idx = rng.choice(len(data), size=B, replace=False)
        m = pretraining_mask(rng, cfg.lattice)
        seed = int(rng.integers(2**62))

        def y(leaves, idx=idx):
            return batch_context(leaves, data, idx, cfg, fcfg.use_users, fcfg.use_poi)

        loss, grads = contrastive_loss(
            out, tokens[idx], m, sched, cfg, ccfg, seed, y=y, options=options, trainable=trainable
        )
        check_finite(loss, step)
        opt.step(out, grads)
        trace.append(loss)
        log.debug("finetune step %d loss %.6f", step, loss)
        if on_step:
            on_step(step, loss)
    return out, trace
