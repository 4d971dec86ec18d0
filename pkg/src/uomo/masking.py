"""Task-oriented masks over the token lattice and the target/observation split.

Convention: a mask entry of 1 marks a TARGET token (hidden, reconstructed by
the model); 0 marks an OBSERVED token.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .tokenizer import token_index


@dataclass(frozen=True)
class ShortTerm:
    t0: int


@dataclass(frozen=True)
class LongTerm:
    t0: int


@dataclass(frozen=True)
class Generation:
    cells: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Random:
    ratio: float = 0.5
    seed: int = 0


MaskKind = ShortTerm | LongTerm | Generation | Random

TASK_NAMES = ("short", "long", "gen", "random")


def make_mask(kind: MaskKind, dims: tuple[int, int, int]) -> np.ndarray:
    """Binary H' x V' x T' mask for ``kind``."""
    Hp, Vp, Tp = dims
    if min(dims) < 1:
        raise ValueError(f"invalid lattice dims {dims}")
    m = np.zeros(dims, dtype=np.float64)
    if isinstance(kind, (ShortTerm, LongTerm)):
        if not 0 < kind.t0 < Tp:
            raise ValueError(f"t0={kind.t0} must lie strictly inside (0, {Tp})")
        m[:, :, kind.t0 :] = 1.0
    elif isinstance(kind, Generation):
        if not kind.cells:
            raise ValueError("generation mask needs at least one target cell")
        for h, v in kind.cells:
            if not (0 <= h < Hp and 0 <= v < Vp):
                raise ValueError(f"generation cell {(h, v)} outside lattice {dims}")
            m[h, v, :] = 1.0
    elif isinstance(kind, Random):
        if not 0 < kind.ratio < 1:
            raise ValueError(f"random mask ratio {kind.ratio} outside (0, 1)")
        total = Hp * Vp * Tp
        count = max(1, int(round(kind.ratio * total)))
        rng = np.random.default_rng(kind.seed)
        chosen = rng.choice(total, size=count, replace=False)
        m.reshape(-1)[chosen] = 1.0
    else:
        raise TypeError(f"unknown mask kind {kind!r}")
    return m


def all_cells(dims: tuple[int, int, int]) -> tuple[tuple[int, int], ...]:
    return tuple((h, v) for h in range(dims[0]) for v in range(dims[1]))


def flatten_mask(m: np.ndarray) -> np.ndarray:
    """Lattice mask -> per-token vector in token order."""
    out = np.empty(m.size)
    out[token_index(m.shape).reshape(-1)] = m.reshape(-1)
    return out


@dataclass(frozen=True, eq=False)
class TokenSplit:
    e: ag.Tensor
    o: ag.Tensor
    m: np.ndarray  # per-token 0/1, shape (N,)


def split(tokens, m: np.ndarray) -> TokenSplit:
    """``e = tokens * m`` and ``o = tokens * (1 - m)`` with m broadcast over C.

    ``m`` may be a lattice mask (H', V', T') or an already flattened (N,) vector.
    """
    tokens = ag.as_tensor(tokens)
    flat = flatten_mask(m) if np.ndim(m) == 3 else np.asarray(m, dtype=np.float64)
    if flat.shape[0] != tokens.shape[-2]:
        raise ValueError(f"shape mismatch: mask of {flat.shape[0]} tokens vs {tokens.shape}")
    col = flat[:, None]
    return TokenSplit(tokens * col, tokens * (1.0 - col), flat)


def pretraining_mask(
    rng: np.random.Generator,
    dims: tuple[int, int, int],
    kinds: Sequence[str] = TASK_NAMES,
    random_ratio: float = 0.5,
) -> np.ndarray:
    """Draw one of the four mask kinds uniformly; used once per training batch."""
    Hp, Vp, Tp = dims
    name = kinds[int(rng.integers(len(kinds)))]
    if name == "short":
        kind = ShortTerm(max(1, (3 * Tp) // 4))
    elif name == "long":
        kind = LongTerm(max(1, Tp // 4))
    elif name == "gen":
        cell = int(rng.integers(Hp * Vp))
        kind = Generation(((cell // Vp, cell % Vp),))
    elif name == "random":
        kind = Random(random_ratio, int(rng.integers(2**31)))
    else:
        raise ValueError(f"unknown task {name!r}")
    return make_mask(kind, dims)
