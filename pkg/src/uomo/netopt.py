"""Downstream network optimizers: base-station deployment and RRU sleep
control, each with an exhaustive oracle used by the tests.

Deployment maximizes served demand minus a shortfall penalty and a station
cost. Sleep control minimizes unserved-load ratio + switching + energy per
cell. Deployment ties go to the lexicographically smallest sorted list of
station grids (stations pile into low grid indices); sleep ties go to the
smaller RRU count at each step in turn.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

SEARCH_LIMIT = 10**6
# Relative tolerance for treating two objective values as tied.
TIE_RTOL = 1e-9


class SearchTooLarge(ValueError):
    pass


def _tied(a: float, b: float) -> bool:
    return abs(a - b) <= TIE_RTOL * max(1.0, abs(a), abs(b))


# --------------------------------------------------------------- deployment


@dataclass(frozen=True, eq=False)
class DeploymentInstance:
    demand: np.ndarray  # (N, T) estimated users per step
    M: int
    C0: float = 100.0
    alpha: float = 0.0
    beta: float = 1.0
    at_most: bool = False  # relax sum(x) == M to sum(x) <= M

    def __post_init__(self):
        d = np.asarray(self.demand, dtype=np.float64)
        if d.ndim == 1:
            d = d[:, None]
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"demand must be (N, T), got shape {np.shape(self.demand)}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("demand must be finite and nonnegative")
        if self.M < 0 or int(self.M) != self.M:
            raise ValueError("M must be a nonnegative integer")
        if not self.C0 > 0:
            raise ValueError("C0 must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        object.__setattr__(self, "demand", d)

    @property
    def N(self) -> int:
        return self.demand.shape[0]

    @property
    def T(self) -> int:
        return self.demand.shape[1]

    def search_size(self) -> int:
        if self.at_most:
            return math.comb(self.N + self.M, self.M)
        return math.comb(self.N + self.M - 1, self.M)

    def to_json(self) -> str:
        d = asdict(self)
        d["demand"] = self.demand.tolist()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DeploymentInstance":
        d = json.loads(text)
        return cls(np.asarray(d.pop("demand"), dtype=np.float64), **d)


@dataclass
class DeploymentResult:
    x: list
    y: list
    objective: float
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def deployment_objective(inst: DeploymentInstance, x, y) -> float:
    """sum_t sum_i [y - beta (U - y)^+] - alpha * T * sum_i x_i."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    served = y - inst.beta * np.maximum(inst.demand - y, 0.0)
    return float(served.sum() - inst.alpha * inst.T * x.sum())


def best_service(inst: DeploymentInstance, x) -> np.ndarray:
    """Optimal y for fixed x: serve everything the stations can carry."""
    cap = np.asarray(x, dtype=np.float64)[:, None] * inst.C0
    return np.minimum(cap, inst.demand)


def _guard(size: int):
    if size > SEARCH_LIMIT:
        raise SearchTooLarge(f"search size {size} exceeds guard {SEARCH_LIMIT}")


def compositions(total: int, parts: int, at_most: bool = False):
    """Nonnegative integer vectors of length ``parts`` summing to ``total``
    (or at most ``total``), in ascending lexicographic order."""
    if parts == 1:
        for v in range(total + 1) if at_most else (total,):
            yield (v,)
        return
    for first in range(total + 1):
        for rest in compositions(total - first, parts - 1, at_most):
            yield (first,) + rest


def solve_deployment(inst: DeploymentInstance) -> DeploymentResult:
    _guard(inst.search_size())
    # Objective separates over grids once y is optimal, so score x by a table.
    levels = np.arange(inst.M + 1, dtype=np.float64)
    cap = levels[:, None, None] * inst.C0
    y = np.minimum(cap, inst.demand[None])
    gain = (y - inst.beta * np.maximum(inst.demand[None] - y, 0.0)).sum(axis=2)  # (M+1, N)
    gain -= inst.alpha * inst.T * levels[:, None]
    # Descending lex order on x = ascending order of the sorted station-grid list.
    cand = np.array(list(compositions(inst.M, inst.N, inst.at_most))[::-1], dtype=np.int64)
    scores = gain[cand, np.arange(inst.N)].sum(axis=1)
    near = np.flatnonzero(scores >= scores.max() - 1e-6 * max(1.0, abs(scores.max())))
    # Settle near-ties with the literal objective, first candidate wins.
    exact = [deployment_objective(inst, cand[i], best_service(inst, cand[i])) for i in near]
    top = max(exact)
    pick = next(i for i, v in zip(near, exact) if _tied(v, top))
    x = cand[pick]
    yb = best_service(inst, x)
    obj = deployment_objective(inst, x, yb)
    return DeploymentResult(x.tolist(), yb.tolist(), obj, {"solver": "exact", "candidates": len(cand)})


def brute_force_deployment(inst: DeploymentInstance) -> DeploymentResult:
    """Exhaustive oracle: every x, and for each (i, t) every y on a 0.25*C0
    lattice below the serviceable bound plus the closed-form candidate."""
    _guard(inst.search_size())
    N, T = inst.demand.shape
    best = []
    for x in itertools.product(range(inst.M, -1, -1), repeat=N):
        s = sum(x)
        if s > inst.M or (s < inst.M and not inst.at_most):
            continue
        y = np.zeros((N, T))
        for i in range(N):
            for t in range(T):
                bound = min(x[i] * inst.C0, inst.demand[i, t])
                grid = np.arange(0.0, bound + 1e-12, 0.25 * inst.C0)
                options = np.append(grid[grid <= bound], bound)
                vals = options - inst.beta * np.maximum(inst.demand[i, t] - options, 0.0)
                y[i, t] = options[int(np.argmax(vals))]
        best.append((x, y, deployment_objective(inst, x, y)))
    top = max(v for _, _, v in best)
    x, y, obj = next(b for b in best if _tied(b[2], top))
    return DeploymentResult(list(x), y.tolist(), obj, {"solver": "brute_force"})


# -------------------------------------------------------------------- sleep


@dataclass(frozen=True, eq=False)
class SleepInstance:
    load: np.ndarray  # (M, T), strictly positive
    c0: float = 100.0
    R_max: int = 4
    alpha_E: float = 0.01
    beta_E: float = 0.1
    x0: np.ndarray | None = None  # (M,), defaults to R_max (all on)

    def __post_init__(self):
        L = np.asarray(self.load, dtype=np.float64)
        if L.ndim == 1:
            L = L[None, :]
        if L.ndim != 2 or L.size == 0:
            raise ValueError(f"load must be (M, T), got shape {np.shape(self.load)}")
        if not np.all(np.isfinite(L)) or np.any(L <= 0):
            raise ValueError("load must be finite and strictly positive")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not 1 <= self.R_max <= 16 or int(self.R_max) != self.R_max:
            raise ValueError("R_max must be an integer in [1, 16]")
        if self.alpha_E < 0 or self.beta_E < 0:
            raise ValueError("energy coefficients must be nonnegative")
        x0 = np.full(L.shape[0], self.R_max, dtype=np.int64) if self.x0 is None else np.asarray(self.x0, dtype=np.int64)
        if x0.shape != (L.shape[0],) or np.any(x0 < 0) or np.any(x0 > self.R_max):
            raise ValueError("x0 must hold one state in [0, R_max] per cell")
        object.__setattr__(self, "load", L)
        object.__setattr__(self, "x0", x0)

    @property
    def M(self) -> int:
        return self.load.shape[0]

    @property
    def T(self) -> int:
        return self.load.shape[1]

    def to_json(self) -> str:
        d = asdict(self)
        d["load"] = self.load.tolist()
        d["x0"] = self.x0.tolist()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SleepInstance":
        d = json.loads(text)
        return cls(np.asarray(d.pop("load"), dtype=np.float64), **d)


@dataclass
class SleepResult:
    x: list
    Q: float
    W: float
    E: float
    meta: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return self.Q + self.W + self.E

    def to_json(self) -> str:
        d = asdict(self)
        d["objective"] = self.objective
        return json.dumps(d, sort_keys=True, indent=2)


def energy(load, coef_a: float, coef_b: float, c0: float):
    """P[L] = a L + b L / c0."""
    return (coef_a + coef_b / c0) * np.asarray(load, dtype=np.float64)


def sleep_terms(inst: SleepInstance, x) -> tuple[float, float, float]:
    """(Q, W, E) of a schedule x (M, T)."""
    x = np.asarray(x, dtype=np.float64).reshape(inst.M, inst.T)
    cap = x * inst.c0
    Q = np.maximum(inst.load - cap, 0.0) / inst.load
    prev = np.concatenate([inst.x0[:, None].astype(np.float64), x[:, :-1]], axis=1)
    W = np.abs(x - prev)
    E = energy(np.minimum(inst.load, cap), inst.alpha_E, inst.beta_E, inst.c0)
    return float(Q.sum()), float(W.sum()), float(E.sum())


def _step_costs(inst: SleepInstance, m: int) -> np.ndarray:
    """(T, R_max+1) per-step QoS + energy cost for cell m."""
    states = np.arange(inst.R_max + 1, dtype=np.float64)
    L = inst.load[m][:, None]
    cap = states[None, :] * inst.c0
    return np.maximum(L - cap, 0.0) / L + energy(np.minimum(L, cap), inst.alpha_E, inst.beta_E, inst.c0)


def _cell_dp(inst: SleepInstance, m: int) -> np.ndarray:
    cost = _step_costs(inst, m)
    T, S = cost.shape
    states = np.arange(S)
    switch = np.abs(states[:, None] - states[None, :]).astype(np.float64)
    togo = np.zeros((T + 1, S))
    for t in range(T - 1, -1, -1):
        # togo[t][s] = cost of being in s at t plus the best continuation
        nxt = (switch + togo[t + 1][None, :]).min(axis=1) if t < T - 1 else np.zeros(S)
        togo[t] = cost[t] + nxt
    path = np.empty(T, dtype=np.int64)
    prev = int(inst.x0[m])
    for t in range(T):
        vals = switch[prev] + togo[t]
        best = vals.min()
        prev = int(next(s for s in states if _tied(vals[s], best)))
        path[t] = prev
    return path


def solve_sleep(inst: SleepInstance) -> SleepResult:
    x = np.stack([_cell_dp(inst, m) for m in range(inst.M)])
    Q, W, E = sleep_terms(inst, x)
    return SleepResult(x.tolist(), Q, W, E, {"solver": "dp"})


def brute_force_sleep(inst: SleepInstance) -> SleepResult:
    size = (inst.R_max + 1) ** (inst.M * inst.T)
    _guard(size)
    X = np.array(list(itertools.product(range(inst.R_max + 1), repeat=inst.M * inst.T)), dtype=np.float64)
    X = X.reshape(-1, inst.M, inst.T)
    cap = X * inst.c0
    L = inst.load[None]
    prev = np.concatenate([np.broadcast_to(inst.x0[None, :, None], (len(X), inst.M, 1)), X[:, :, :-1]], axis=2)
    total = (
        (np.maximum(L - cap, 0.0) / L).sum(axis=(1, 2))
        + np.abs(X - prev).sum(axis=(1, 2))
        + energy(np.minimum(L, cap), inst.alpha_E, inst.beta_E, inst.c0).sum(axis=(1, 2))
    )
    best = total.min()
    pick = int(next(i for i in range(len(total)) if _tied(total[i], best)))
    x = X[pick].astype(np.int64)
    Q, W, E = sleep_terms(inst, x)
    return SleepResult(x.tolist(), Q, W, E, {"solver": "brute_force", "candidates": size})


# ------------------------------------------------------------ demand inputs


DEMAND_MODES = ("generation", "long_term")
LOAD_FLOOR = 1e-6


def estimate_demand(model, grid, users, poi, mode: str, seed: int, traffic_stats, user_stats, t_start: int = 0):
    """Forecast a region and flatten it to per-grid demand (H*V, T_pred).

    ``generation`` forecasts the whole horizon from context alone (deployment
    planning); ``long_term`` forecasts the unobserved span from the first
    quarter (sleep control). Loads are floored at a tiny positive value so
    they are valid sleep inputs.
    """
    from .evalkit import TaskSpec, run_task

    if mode not in DEMAND_MODES:
        raise ValueError(f"unknown demand mode {mode!r}; expected one of {DEMAND_MODES}")
    kind = "gen" if mode == "generation" else "long"
    task = TaskSpec.standard(kind, grid.T)
    forecast, report = run_task(model, grid, users, poi, task, seed, traffic_stats, user_stats, t_start)
    values = forecast.values[..., task.t_obs :]
    demand = values.reshape(-1, values.shape[-1])
    if mode == "long_term":
        demand = np.maximum(demand, LOAD_FLOOR)
    return demand, report
