"""Block tokenization of H x V x T grids and the token embedding layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .grid_store import TrafficGrid


@dataclass(frozen=True)
class TokenSpec:
    h0: int = 2
    v0: int = 2
    t0: int = 8
    C: int = 16

    def __post_init__(self):
        if min(self.h0, self.v0, self.t0, self.C) < 1:
            raise ValueError("token spec entries must be positive")

    @property
    def size(self) -> int:
        """Scalars per token, h0*v0*t0."""
        return self.h0 * self.v0 * self.t0

    def lattice(self, H: int, V: int, T: int) -> tuple[int, int, int]:
        if H % self.h0 or V % self.v0 or T % self.t0:
            raise ValueError(
                f"token spec incompatible: ({self.h0},{self.v0},{self.t0}) does not divide "
                f"grid ({H},{V},{T})"
            )
        return H // self.h0, V // self.v0, T // self.t0


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Tokens ordered t'-major, then h', then v'; each token flattened (h, v, t)."""

    dims: tuple[int, int, int]
    tokens: np.ndarray

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def index(self, h: int, v: int, t: int) -> int:
        Hp, Vp, _ = self.dims
        return t * Hp * Vp + h * Vp + v


def token_index(dims: tuple[int, int, int]) -> np.ndarray:
    """Array ``idx[h', v', t']`` giving the flat token position."""
    Hp, Vp, Tp = dims
    t, h, v = np.meshgrid(np.arange(Tp), np.arange(Hp), np.arange(Vp), indexing="ij")
    flat = t * Hp * Vp + h * Vp + v
    return flat.transpose(1, 2, 0)


def tokenize_array(values: np.ndarray, spec: TokenSpec) -> np.ndarray:
    """(..., H, V, T) -> (..., H'V'T', h0 v0 t0)."""
    *lead, H, V, T = values.shape
    Hp, Vp, Tp = spec.lattice(H, V, T)
    x = values.reshape(*lead, Hp, spec.h0, Vp, spec.v0, Tp, spec.t0)
    n = len(lead)
    # -> lead, T', H', V', h0, v0, t0
    axes = list(range(n)) + [n + 4, n + 0, n + 2, n + 1, n + 3, n + 5]
    return x.transpose(axes).reshape(*lead, Hp * Vp * Tp, spec.size)


def detokenize_array(tokens: np.ndarray, dims: tuple[int, int, int], spec: TokenSpec) -> np.ndarray:
    *lead, N, P = tokens.shape
    Hp, Vp, Tp = dims
    if N != Hp * Vp * Tp or P != spec.size:
        raise ValueError(
            f"shape mismatch: tokens {tokens.shape} vs lattice {dims} x token size {spec.size}"
        )
    n = len(lead)
    x = tokens.reshape(*lead, Tp, Hp, Vp, spec.h0, spec.v0, spec.t0)
    # -> lead, H', h0, V', v0, T', t0
    axes = list(range(n)) + [n + 1, n + 3, n + 2, n + 4, n + 0, n + 5]
    return x.transpose(axes).reshape(*lead, Hp * spec.h0, Vp * spec.v0, Tp * spec.t0)


def tokenize(grid: TrafficGrid, spec: TokenSpec) -> TokenGrid:
    dims = spec.lattice(*grid.shape)
    return TokenGrid(dims, tokenize_array(grid.values, spec))


def detokenize(
    tokens: TokenGrid, spec: TokenSpec, interval_minutes: int = 60, kind: str = "traffic"
) -> TrafficGrid:
    values = detokenize_array(tokens.tokens, tokens.dims, spec)
    return TrafficGrid(values, interval_minutes, kind)


def embed(tokens, weight, bias) -> ag.Tensor:
    """Per-token affine map ``tokens @ weight + bias`` to width C.

    Accepts raw arrays or :class:`~uomo.autograd.Tensor` so gradients can
    reach ``weight`` and ``bias``.
    """
    x = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    x, weight, bias = ag.as_tensor(x), ag.as_tensor(weight), ag.as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(
            f"shape mismatch: tokens {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def fit_embedding(tokens: np.ndarray, C: int) -> dict[str, np.ndarray]:
    """Affine embedding fitted to data plus its inverse decoder.

    Projects centered tokens onto their top-``C`` principal directions, scaled
    by one common factor so the embedded tokens have unit mean variance per
    channel. Returns ``emb.W, emb.b, dec.W, dec.b``. If C exceeds the token
    size the extra channels are zero.
    """
    X = np.asarray(tokens, dtype=np.float64).reshape(-1, tokens.shape[-1])
    P = X.shape[1]
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    r = min(C, vt.shape[0])
    basis = np.zeros((P, C))
    basis[:, :r] = vt[:r].T
    var = (s[:r] ** 2) / max(X.shape[0] - 1, 1)
    scale = float(np.sqrt(var.sum() / C)) or 1.0
    W = basis / scale
    return {
        "emb.W": W,
        "emb.b": -mean @ W,
        "dec.W": basis.T * scale,
        "dec.b": mean.copy(),
    }
