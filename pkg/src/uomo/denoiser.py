"""Transformer noise predictor with adaptive (scale/shift/gate) conditioning.

Parameters live in a flat ``dict[str, np.ndarray]`` whose insertion order is
the checkpoint order. Forward functions take the same dict with values that
may be :class:`~uomo.autograd.Tensor` leaves, which is how training gets
gradients. Every forward function is batched: tokens are ``(B, N, C)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .grid_store import N_POI
from .tokenizer import TokenSpec

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    token: TokenSpec = field(default_factory=lambda: TokenSpec(4, 4, 16, 16))
    grid: tuple[int, int, int] = (8, 8, 64)
    layers: int = 2
    heads: int = 2
    d_poi: int = 16
    max_period: float = 10000.0

    def __post_init__(self):
        if self.token.C % self.heads:
            raise ValueError(f"heads={self.heads} must divide C={self.token.C}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        self.token.lattice(*self.grid)

    @property
    def C(self) -> int:
        return self.token.C

    @property
    def lattice(self) -> tuple[int, int, int]:
        return self.token.lattice(*self.grid)

    @property
    def n_tokens(self) -> int:
        Hp, Vp, Tp = self.lattice
        return Hp * Vp * Tp

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["token"] = TokenSpec(**d["token"])
        d["grid"] = tuple(d["grid"])
        return cls(**d)


# Desk tiers. "5M" matches the 12-layer / 128-wide configuration.
MODEL_SIZES = {
    "test": dict(layers=2, C=16, heads=2),
    "small": dict(layers=4, C=32, heads=4),
    "5M": dict(layers=12, C=128, heads=8),
}


def block_names(cfg: ModelConfig) -> list[str]:
    return list(param_shapes(cfg))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    C, P, N, d = cfg.C, cfg.token.size, cfg.n_tokens, cfg.d_poi
    shapes: dict[str, tuple[int, ...]] = {
        "emb.W": (P, C),
        "emb.b": (C,),
        "pos": (N, C),
        "temb.W": (C, C),
        "temb.b": (C,),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ada.W": (C, 3 * C),
                p + "ada.b": (3 * C,),
                p + "ln.g": (C,),
                p + "ln.b": (C,),
                p + "attn.q": (C, C),
                p + "attn.k": (C, C),
                p + "attn.v": (C, C),
                p + "attn.o": (C, C),
                p + "ffn.W1": (C, 4 * C),
                p + "ffn.b1": (4 * C,),
                p + "ffn.W2": (4 * C, C),
                p + "ffn.b2": (C,),
            }
        )
    shapes.update(
        {
            "final.ada.W": (C, 2 * C),
            "final.ada.b": (2 * C,),
            "head.W": (C, C),
            "head.b": (C,),
            "dec.W": (C, P),
            "dec.b": (P,),
            # context streams
            "ctx.user.W": (P, C),
            "ctx.user.b": (C,),
            "ctx.poi.W": (N_POI, d),
            "ctx.poi.b": (d,),
            "ctx.day": (7, d),
            "ctx.hour": (24, d),
            "ctx.time.W": (2 * d, d),
            "ctx.time.b": (d,),
            "ctx.dyn.W": (2 * d, 1),
            "ctx.dyn.b": (1,),
            "ctx.poitok.W": (P, C),
            "ctx.poitok.b": (C,),
        }
    )
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Fresh parameters.

    Conditioning gates start at zero so each block is initially the identity,
    and the context token maps start at zero so a pretrained model is
    unchanged until fine-tuning moves them.
    """
    rng = np.random.default_rng(seed)
    C = cfg.C
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln.g",)):
            value = np.ones(shape)
        elif name in ("ctx.user.W", "ctx.poitok.W"):
            value = np.zeros(shape)
        elif name.endswith("ada.W"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("ada.b"):
            value = np.zeros(shape)
            # layout (alpha, beta, gamma) or (beta, gamma) for the final norm
            value[(C if shape[0] == 3 * C else 0) : (2 * C if shape[0] == 3 * C else C)] = 1.0
        elif name == "pos":
            value = rng.normal(0.0, 1.0, size=shape)
        elif name in ("ctx.day", "ctx.hour"):
            value = rng.normal(0.0, 0.1, size=shape)
        elif len(shape) == 2:
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            value = np.zeros(shape)
        params[name] = value
    return params


def random_params(cfg: ModelConfig, seed: int, scale: float = 0.3) -> Params:
    """Dense random parameters (no zero gates); used for gradient checks."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        fan = shape[0] if len(shape) == 2 else 1
        out[name] = rng.normal(0.0, scale / np.sqrt(fan), size=shape)
        if name.endswith("ln.g"):
            out[name] += 1.0
    return out


def as_leaves(params: Mapping[str, np.ndarray], trainable=None) -> dict[str, ag.Tensor]:
    """Wrap arrays as Tensor leaves; ``trainable`` limits which ones need grads."""
    return {
        k: ag.Tensor(v, requires_grad=trainable is None or k in trainable)
        for k, v in params.items()
    }


def _leaf(params, name):
    v = params[name]
    return v if isinstance(v, ag.Tensor) else ag.Tensor(v)


# ------------------------------------------------------------------ layers


def sinusoid(k, C: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed cos/sin ladder for integer steps ``k`` (any shape) -> (..., C)."""
    k = np.asarray(k, dtype=np.float64)
    half = C // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = k[..., None] * freqs
    out = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if C % 2:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (1,))], axis=-1)
    return out


def timestep_embed(k, params, C: int, K: int | None = None, max_period: float = 10000.0) -> ag.Tensor:
    """Diffusion-step embedding: sinusoid followed by a learned affine."""
    k = np.asarray(k)
    if np.any(k < 1) or (K is not None and np.any(k > K)):
        raise ValueError(f"diffusion step out of range: {k} not in [1, {K}]")
    return ag.as_tensor(sinusoid(k, C, max_period)) @ _leaf(params, "temb.W") + _leaf(
        params, "temb.b"
    )


def _attention(z: ag.Tensor, params, prefix: str, heads: int) -> ag.Tensor:
    B, N, C = z.shape
    dh = C // heads

    def proj(name):
        x = z @ _leaf(params, prefix + name)
        return ag.transpose(ag.reshape(x, (B, N, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("attn.q"), proj("attn.k"), proj("attn.v")
    scores = ag.mul(q @ ag.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    mixed = ag.softmax(scores, axis=-1) @ v
    merged = ag.reshape(ag.transpose(mixed, (0, 2, 1, 3)), (B, N, C))
    return merged @ _leaf(params, prefix + "attn.o")


def _ffn(x: ag.Tensor, params, prefix: str) -> ag.Tensor:
    hidden = ag.gelu(x @ _leaf(params, prefix + "ffn.W1") + _leaf(params, prefix + "ffn.b1"))
    return hidden @ _leaf(params, prefix + "ffn.W2") + _leaf(params, prefix + "ffn.b2")


def adaln_block(e_k, cond, params, layer: int, heads: int) -> ag.Tensor:
    """``e + alpha * F(beta * norm(e) + gamma)`` with (alpha, beta, gamma) an
    affine function of ``cond`` per token and F = attention then feed-forward
    (with its own residual)."""
    e_k, cond = ag.as_tensor(e_k), ag.as_tensor(cond)
    if e_k.shape != cond.shape:
        raise ValueError(f"shape mismatch: tokens {e_k.shape} vs conditioning {cond.shape}")
    p = f"layers.{layer}."
    mod = cond @ _leaf(params, p + "ada.W") + _leaf(params, p + "ada.b")
    alpha, beta, gamma = ag.split(mod, 3, axis=-1)
    normed = ag.layer_norm(e_k) * _leaf(params, p + "ln.g") + _leaf(params, p + "ln.b")
    z = beta * normed + gamma
    u = _attention(z, params, p, heads)
    u = u + _ffn(u, params, p)
    return e_k + alpha * u


def predict_noise(e_k, k, o, y, params, cfg: ModelConfig, sched) -> ag.Tensor:
    """Noise estimate for target tokens ``e_k`` at step ``k`` given observation
    ``o`` and optional context ``y``. Shapes ``(B, N, C)``; ``k`` is ``(B,)``.

    The estimate is the network output plus ``coef_k * e_k``, where coef_k is
    the noise coefficient of ``sched`` at step k. That skip term alone is the
    best guess for unit-variance latents, so the transformer only has to learn
    the correction.
    """
    e_k, o = ag.as_tensor(e_k), ag.as_tensor(o)
    if e_k.shape != o.shape or e_k.ndim != 3:
        raise ValueError(f"shape mismatch: e_k {e_k.shape} vs o {o.shape}")
    if y is not None and tuple(ag.as_tensor(y).shape) != e_k.shape:
        raise ValueError(f"shape mismatch: context {ag.as_tensor(y).shape} vs {e_k.shape}")
    B, N, C = e_k.shape
    pos = _leaf(params, "pos")
    if pos.shape != (N, C):
        raise ValueError(f"shape mismatch: {N} tokens but positional table {pos.shape}")
    k = np.broadcast_to(np.asarray(k), (B,))
    temb = ag.reshape(timestep_embed(k, params, C, sched.K, cfg.max_period), (B, 1, C))
    cond = o + temb + pos
    if y is not None:
        cond = cond + y
    h = e_k + pos
    for layer in range(cfg.layers):
        h = adaln_block(h, cond, params, layer, cfg.heads)
    mod = cond @ _leaf(params, "final.ada.W") + _leaf(params, "final.ada.b")
    beta, gamma = ag.split(mod, 2, axis=-1)
    h = beta * ag.layer_norm(h) + gamma
    out = h @ _leaf(params, "head.W") + _leaf(params, "head.b")
    _, coef = sched.at(k)
    return out + e_k * np.asarray(coef, dtype=np.float64)[:, None, None]


def decode_output(hidden, params) -> ag.Tensor:
    hidden = ag.as_tensor(hidden)
    W = _leaf(params, "dec.W")
    if hidden.shape[-1] != W.shape[0]:
        raise ValueError(f"shape mismatch: hidden {hidden.shape} vs decoder {W.shape}")
    return hidden @ W + _leaf(params, "dec.b")


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: Params, cfg: ModelConfig, extra: dict | None = None) -> None:
    manifest = {
        "model": cfg.to_dict(),
        "blocks": [[name, list(np.shape(v))] for name, v in params.items()],
        **(extra or {}),
    }
    payload = b"".join(np.asarray(v, dtype="<f8").tobytes() for v in params.values())
    with open(Path(path), "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    line, _, payload = raw.partition(b"\n")
    manifest = json.loads(line)
    cfg = ModelConfig.from_dict(manifest["model"])
    params: Params = {}
    offset = 0
    for name, shape in manifest["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(payload, "<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    if offset != len(payload):
        raise ValueError(f"checkpoint {path}: payload length mismatch")
    return params, cfg, manifest
