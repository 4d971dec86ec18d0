"""Forecasting tasks, metrics, the historical-average baseline and the
zero/few-shot protocol."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .context import context_tokens
from .denoiser import ModelConfig, Params
from .diffusion import NoiseSchedule, sample
from .grid_store import NormStats, PoiMap, TrafficGrid, denormalize_values
from .masking import Generation, LongTerm, ShortTerm, all_cells, flatten_mask, make_mask
from .samples import SampleSet
from .tokenizer import detokenize_array, embed, tokenize_array

TASKS = ("short", "long", "gen")


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "short" | "long" | "gen"
    t_obs: int
    t_pred: int

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")
        if self.t_obs < 0 or self.t_pred < 1:
            raise ValueError("t_obs must be >= 0 and t_pred >= 1")
        if self.kind == "short" and not self.t_obs > self.t_pred:
            raise ValueError("short-term task needs t_obs > t_pred")
        if self.kind == "long" and not (0 < self.t_obs < self.t_pred):
            raise ValueError("long-term task needs 0 < t_obs < t_pred")
        if self.kind == "gen" and self.t_obs != 0:
            raise ValueError("generation task observes nothing (t_obs = 0)")

    @property
    def T(self) -> int:
        return self.t_obs + self.t_pred

    @classmethod
    def standard(cls, kind: str, T: int = 64) -> "TaskSpec":
        """48/16 short-term, 16/48 long-term, 0/64 generation for T=64."""
        if kind == "short":
            return cls("short", 3 * T // 4, T - 3 * T // 4)
        if kind == "long":
            return cls("long", T // 4, T - T // 4)
        return cls("gen", 0, T)


@dataclass
class EvalReport:
    task: str
    rmse: float
    mae: float
    jsd: float | None
    per_cell_rmse: list
    runtime_s: float
    seed: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def csv_rows(self, city: str) -> list[tuple]:
        rows = [(city, self.task, "rmse", self.rmse, self.seed), (city, self.task, "mae", self.mae, self.seed)]
        rows.append((city, self.task, "jsd", "" if self.jsd is None else self.jsd, self.seed))
        return rows


# ------------------------------------------------------------------ metrics


def metric_rmse_mae(pred, truth, region=None) -> tuple[float, float]:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    region = np.ones(pred.shape, bool) if region is None else np.broadcast_to(region, pred.shape)
    if not region.any():
        raise ValueError("empty scoring region")
    diff = (pred - truth)[region.astype(bool)]
    # Correctly rounded sums: results do not depend on summation order.
    n = diff.size
    return math.sqrt(math.fsum(diff * diff) / n), math.fsum(np.abs(diff)) / n


def histogram(values, bins: int) -> np.ndarray:
    """Add-one smoothed probabilities over ``bins`` equal bins on [0, 1]."""
    values = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    counts = np.histogram(values, bins=bins, range=(0.0, 1.0))[0].astype(np.float64)
    return (counts + 1.0) / (counts.sum() + bins)


def jsd_from_probs(p: np.ndarray, q: np.ndarray) -> float:
    mid = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log(p / mid)) + 0.5 * np.sum(q * np.log(q / mid)))


def metric_jsd(pred, truth, bins: int = 50) -> float:
    """Jensen-Shannon divergence (natural log) between value histograms."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.size == 0 or truth.size == 0:
        raise ValueError("empty input to JSD")
    jsd = jsd_from_probs(histogram(pred, bins), histogram(truth, bins))
    return min(max(jsd, 0.0), math.log(2.0))


# ----------------------------------------------------------------- baseline


def steps_per_day(interval_minutes: int) -> int:
    return max(1, (24 * 60) // interval_minutes)


def ha_baseline(values: np.ndarray, task: TaskSpec, period: int) -> np.ndarray:
    """Historical average forecast for the predicted steps.

    Uses the same-phase mean when the observation window holds at least one
    full period, otherwise each cell's mean over the observation window.
    ``values`` is (..., T); returns (..., t_pred).
    """
    if task.kind == "gen":
        raise ValueError("HA baseline requires history; generation task has none")
    hist = np.asarray(values, dtype=np.float64)[..., : task.t_obs]
    steps = np.arange(task.t_obs, task.T)
    if task.t_obs >= period:
        out = np.empty(hist.shape[:-1] + (task.t_pred,))
        phases = np.arange(task.t_obs) % period
        for i, t in enumerate(steps):
            out[..., i] = hist[..., phases == t % period].mean(axis=-1)
        return out
    return np.repeat(hist.mean(axis=-1, keepdims=True), task.t_pred, axis=-1)


# ---------------------------------------------------------------- the model


@dataclass(frozen=True, eq=False)
class Forecaster:
    """A parameter set plus everything needed to run it."""

    params: Params
    cfg: ModelConfig
    sched: NoiseSchedule
    use_users: bool = False
    use_poi: bool = False
    n_samples: int = 8

    @property
    def uses_context(self) -> bool:
        return self.use_users or self.use_poi

    def with_params(self, params: Params, **kw) -> "Forecaster":
        return replace(self, params=params, **kw)


def task_mask(task: TaskSpec, cfg: ModelConfig) -> np.ndarray:
    """Lattice mask for a task; prediction tasks must be token-aligned."""
    Hp, Vp, Tp = cfg.lattice
    T = cfg.grid[2]
    if task.T != T:
        raise ValueError(f"task horizon {task.T} != model horizon {T}")
    if task.kind == "gen":
        return make_mask(Generation(all_cells(cfg.lattice)), cfg.lattice)
    if task.t_obs % cfg.token.t0:
        raise ValueError(f"t_obs={task.t_obs} not token-aligned (t0={cfg.token.t0})")
    t0 = task.t_obs // cfg.token.t0
    kind = ShortTerm(t0) if task.kind == "short" else LongTerm(t0)
    return make_mask(kind, cfg.lattice)


def forecast_batch(
    model: Forecaster, data: SampleSet, task: TaskSpec, seed: int
) -> np.ndarray:
    """Normalized forecasts (S, H, V, T): observed steps copied from the
    input, predicted steps from the ensemble mean of ``n_samples`` draws."""
    m = task_mask(task, model.cfg)
    o, y = model_inputs(model, data, m)
    S = o.shape[0]
    reps = model.n_samples
    o_rep = np.repeat(o, reps, axis=0)
    y_rep = None if y is None else np.repeat(y, reps, axis=0)
    tokens = sample(o_rep, flatten_mask(m), y_rep, model.params, model.sched, model.cfg, seed)
    tokens = tokens.reshape(S, reps, *tokens.shape[1:]).mean(axis=1)
    pred = detokenize_array(tokens, model.cfg.lattice, model.cfg.token)
    region = prediction_region(task, data.traffic.shape[1:])
    return np.where(region, pred, data.traffic)


def model_inputs(model: Forecaster, data: SampleSet, m):
    """Observation tokens o and context y for a batch of normalized samples.

    Target positions are zeroed before embedding, so nothing inside the
    predicted region can reach the model.
    """
    tokens = tokenize_array(data.traffic, model.cfg.token)
    col = flatten_mask(m)[None, :, None]
    o = embed(tokens * (1.0 - col), model.params["emb.W"], model.params["emb.b"]).data * (1.0 - col)
    y = None
    if model.uses_context:
        y = context_tokens(
            model.params,
            model.cfg.token,
            data.users,
            data.poi,
            data.t_start,
            data.interval_minutes,
            model.use_users,
            model.use_poi,
        ).data
    return o, y


def prediction_region(task: TaskSpec, shape: tuple[int, int, int]) -> np.ndarray:
    region = np.zeros(shape, dtype=bool)
    region[..., task.t_obs :] = True
    return region


def evaluate_set(model: Forecaster, data: SampleSet, task: TaskSpec, seed: int) -> EvalReport:
    start = time.perf_counter()
    pred = forecast_batch(model, data, task, seed)
    return score(pred, data.traffic, task, seed, time.perf_counter() - start)


def score(pred, truth, task: TaskSpec, seed: int, runtime: float = 0.0, meta=None) -> EvalReport:
    """Pointwise metrics on the predicted region (normalized scale)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    region = np.broadcast_to(prediction_region(task, truth.shape[-3:]), truth.shape)
    rmse, mae = metric_rmse_mae(pred, truth, region)
    jsd = None
    if task.kind == "gen":
        jsd = metric_jsd(pred[region], truth[region])
    sq = np.where(region, (pred - truth) ** 2, 0.0)
    per_cell = np.sqrt(sq.sum(axis=-1) / task.t_pred)
    while per_cell.ndim > 2:
        per_cell = np.sqrt(np.mean(per_cell**2, axis=0))
    meta = {"scale": "normalized", "scoring": "pointwise on predicted steps", **(meta or {})}
    return EvalReport(task.kind, rmse, mae, jsd, per_cell.tolist(), runtime, seed, meta)


def run_task(
    model: Forecaster,
    grid: TrafficGrid,
    users: TrafficGrid,
    poi: PoiMap,
    task: TaskSpec,
    seed: int,
    traffic_stats: NormStats,
    user_stats: NormStats,
    t_start: int = 0,
) -> tuple[TrafficGrid, EvalReport]:
    """Forecast one region window and score it against ``grid``.

    The returned grid is in raw units; the report is on the normalized scale
    defined by ``traffic_stats`` (which must not come from the predicted
    span).
    """
    if grid.shape != tuple(model.cfg.grid):
        raise ValueError(f"grid {grid.shape} does not match model grid {model.cfg.grid}")
    tn = (grid.values - traffic_stats.minimum) / (traffic_stats.maximum - traffic_stats.minimum)
    un = (users.values - user_stats.minimum) / (user_stats.maximum - user_stats.minimum)
    data = SampleSet(
        tn[None], un[None], poi.counts[None], np.array([t_start]), grid.interval_minutes,
        traffic_stats, user_stats,
    )
    start = time.perf_counter()
    pred = forecast_batch(model, data, task, seed)[0]
    report = score(pred, tn, task, seed, time.perf_counter() - start)
    raw = np.maximum(denormalize_values(pred, traffic_stats), 0.0)
    return TrafficGrid(raw, grid.interval_minutes, "traffic"), report


# ------------------------------------------------------------ zero/few-shot

FEWSHOT_FRACTIONS = (0.0, 0.05, 0.10)


def fewshot_split(n: int, fraction: float, max_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the fine-tuning prefix for ``fraction`` and of the shared
    held-out remainder (everything past the largest prefix)."""
    if not 0.0 <= fraction <= max_fraction < 1.0:
        raise ValueError(f"fraction {fraction} out of range [0, {max_fraction}]")
    cut = math.ceil(max_fraction * n)
    if cut >= n:
        raise ValueError(f"{n} samples leave no held-out remainder at fraction {max_fraction}")
    return np.arange(math.ceil(fraction * n)), np.arange(cut, n)


def fewshot_protocol(
    model: Forecaster,
    data: SampleSet,
    task: TaskSpec,
    seed: int,
    fractions=FEWSHOT_FRACTIONS,
    fcfg=None,
    ccfg=None,
    eval_limit: int | None = None,
) -> dict[float, EvalReport]:
    """Zero-shot (fraction 0) and few-shot reports on a city the model never
    saw. Every fraction is scored on the same held-out samples; a nonzero
    fraction first fine-tunes a copy of the parameters on the leading
    ``fraction`` of ``data`` with the context streams switched on."""
    from .finetune import ContrastiveConfig, FinetuneConfig, finetune

    fractions = tuple(float(f) for f in fractions)
    if not fractions or min(fractions) < 0.0 or max(fractions) >= 1.0:
        raise ValueError(f"fractions must lie in [0, 1): {fractions}")
    fcfg = fcfg or FinetuneConfig(seed=seed)
    ccfg = ccfg or ContrastiveConfig()
    top = max(fractions)
    _, held = fewshot_split(len(data), 0.0, top)
    if eval_limit is not None:
        held = held[:eval_limit]
    test = data.subset(held)
    out = {}
    for frac in fractions:
        head, _ = fewshot_split(len(data), frac, top)
        if frac == 0.0:
            tuned = model
        else:
            if len(head) < ccfg.n_neg + 1:
                raise ValueError(f"fraction {frac} gives {len(head)} samples, too few to fine-tune")
            params, _ = finetune(model.params, data.subset(head), model.cfg, model.sched, ccfg, fcfg)
            tuned = model.with_params(params, use_users=fcfg.use_users, use_poi=fcfg.use_poi)
        report = evaluate_set(tuned, test, task, seed)
        report.meta.update({"fraction": frac, "train_samples": int(len(head)), "test_samples": int(len(held))})
        out[frac] = report
    return out
