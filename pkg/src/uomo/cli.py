"""Command-line runs: one subcommand per pipeline stage.

Every run writes into its own fresh directory (``$UOMO_RUN_ROOT`` or
``./runs``, named ``<timestamp>-<config hash>-<command>`` unless ``--out``
is given). Stages read the artifacts of earlier runs through ``--from``.
Each directory gets ``config.json`` (resolved config, its hash and the seed)
and ``manifest.json`` (sha256 of every artifact, tagged with hash and seed).
Timings go to ``timing.json`` so the remaining outputs are reproducible.

Exit status: 0 ok, 1 configuration error, 2 runtime error; errors are also
printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .denoiser import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .diffusion import TrainConfig, make_schedule, train
from .evalkit import (
    FEWSHOT_FRACTIONS,
    EvalReport,
    Forecaster,
    TaskSpec,
    evaluate_set,
    fewshot_protocol,
    forecast_batch,
    ha_baseline,
    score,
    steps_per_day,
)
from .finetune import ContrastiveConfig, FinetuneConfig, FreezePolicy, PROFILES, finetune
from .grid_store import (
    SynthOptions,
    TrafficGrid,
    compute_stats,
    denormalize_values,
    load_grid,
    load_poi,
    save_grid,
    save_poi,
    synth_city,
)
from .netopt import (
    DeploymentInstance,
    SleepInstance,
    deployment_objective,
    best_service,
    estimate_demand,
    solve_deployment,
    solve_sleep,
)
from .samples import city_samples, split_city
from .tokenizer import TokenSpec

log = logging.getLogger("uomo")

COMMANDS = (
    "synth",
    "train",
    "finetune",
    "forecast",
    "generate",
    "evaluate",
    "optimize-deploy",
    "optimize-sleep",
    "report",
    "pipeline",
)

# Flat config: key -> default. The default's type is the key's type.
DEFAULTS: dict = {
    "seed": 0,
    # synthetic city
    "city_seed": 0,
    "H": 8,
    "V": 8,
    "days": 32,
    "interval_minutes": 15,
    "phase_shift_hours": 0.0,
    # samples
    "crop": 8,
    "length": 64,
    "train_windows": 28,
    "stride": 96,
    # model
    "token": [4, 4, 16],
    "C": 16,
    "layers": 2,
    "heads": 2,
    "d_poi": 16,
    # diffusion
    "K": 50,
    "beta_min": 1e-4,
    "beta_max": 0.05,
    "linear_noise_coef": False,
    # pretraining
    "steps": 200,
    "batch_size": 32,
    "lr": 1e-3,
    "recon_weight": 1.0,
    # fine-tuning
    "ft_steps": 200,
    "ft_batch_size": 8,
    "ft_lr": 1e-3,
    "lambda": "auto",
    "n_neg": 1,
    "clamp": 10.0,
    "freeze": "default",
    "use_users": True,
    "use_poi": True,
    "fraction": 1.0,
    # evaluation
    "task": "short",
    "tasks": ["short", "long", "gen"],
    "n_samples": 16,
    "eval_limit": 0,
    "transfer_seed": 1000,
    "transfer_phase_hours": 3.0,
    "transfer_size": 16,
    "transfer_days": 40,
    "fewshot": False,
    # deployment
    "deploy_M": 3,
    "deploy_C0": 4.0,
    "deploy_alpha": 0.0,
    "deploy_beta": 1.0,
    "deploy_at_most": False,
    # sleep control
    "sleep_c0": 2.5,
    "sleep_R_max": 4,
    "sleep_alpha_E": 0.01,
    "sleep_beta_E": 0.1,
}



class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _coerce(key: str, value, default):
    """Cast ``value`` (TOML value or override string) to the type of ``default``."""
    try:
        if key == "lambda":
            if value == "auto":
                return "auto"
            out = float(value)
            if out < 0:
                raise ValueError
            return out
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("true", "1", "yes"):
                return True
            if str(value).lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            items = value if isinstance(value, list) else [v for v in str(value).split(",") if v]
            kind = type(default[0])
            return [kind(v) for v in items]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def resolve_config(path=None, overrides=()) -> dict:
    """Defaults, then the TOML file, then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                loaded = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, DEFAULTS[key])
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.lstrip("-").replace("-", "_")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value, DEFAULTS[key])
    validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_config(cfg: dict) -> ModelConfig:
    h0, v0, t0 = cfg["token"]
    return ModelConfig(
        TokenSpec(h0, v0, t0, cfg["C"]),
        (cfg["crop"], cfg["crop"], cfg["length"]),
        cfg["layers"],
        cfg["heads"],
        cfg["d_poi"],
    )


def schedule(cfg: dict):
    return make_schedule(cfg["K"], cfg["beta_min"], cfg["beta_max"], cfg["linear_noise_coef"])


def contrastive_config(cfg: dict) -> ContrastiveConfig:
    lam = None if cfg["lambda"] == "auto" else cfg["lambda"]
    return ContrastiveConfig(cfg["n_neg"], lam, cfg["clamp"])


def finetune_config(cfg: dict) -> FinetuneConfig:
    return FinetuneConfig(
        cfg["ft_steps"], cfg["ft_batch_size"], cfg["ft_lr"], cfg["seed"], cfg["freeze"],
        cfg["use_users"], cfg["use_poi"], cfg["recon_weight"],
    )


def validate(cfg: dict) -> None:
    """Build every module's config object up front so bad values fail
    before any work starts."""
    try:
        if len(cfg["token"]) != 3:
            raise ValueError("token must be [h0, v0, t0]")
        mcfg = model_config(cfg)
        schedule(cfg)
        TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"])
        contrastive_config(cfg)
        for kind in [cfg["task"], *cfg["tasks"]]:
            if kind not in ("short", "long", "gen"):
                raise ValueError(f"unknown task {kind!r}")
            if kind != "gen":
                t_obs = TaskSpec.standard(kind, cfg["length"]).t_obs
                if t_obs % mcfg.token.t0:
                    raise ValueError(f"{kind} task t_obs={t_obs} not token-aligned")
        if cfg["freeze"] not in PROFILES:
            raise ValueError(f"unknown freeze profile {cfg['freeze']!r}")
        if not 0.0 < cfg["fraction"] <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if min(cfg["H"], cfg["V"], cfg["days"], cfg["interval_minutes"]) < 1:
            raise ValueError("city dimensions must be positive")
        if cfg["crop"] > min(cfg["H"], cfg["V"]):
            raise ValueError("crop larger than the city")
        if min(cfg["steps"], cfg["ft_steps"]) < 0 or min(cfg["batch_size"], cfg["ft_batch_size"]) < 1:
            raise ValueError("steps must be >= 0 and batch sizes >= 1")
        if cfg["n_samples"] < 1 or cfg["eval_limit"] < 0:
            raise ValueError("n_samples must be >= 1 and eval_limit >= 0")
        if cfg["deploy_M"] < 0 or cfg["deploy_C0"] <= 0 or cfg["sleep_c0"] <= 0:
            raise ValueError("deployment/sleep capacities must be positive, M >= 0")
        if not 1 <= cfg["sleep_R_max"] <= 16:
            raise ValueError("sleep_R_max must lie in [1, 16]")
        if min(cfg["deploy_alpha"], cfg["deploy_beta"], cfg["sleep_alpha_E"], cfg["sleep_beta_E"]) < 0:
            raise ValueError("cost weights must be nonnegative")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -------------------------------------------------------------------- runs


class Run:
    """A fresh output directory plus bookkeeping for its artifacts."""

    def __init__(self, command: str, cfg: dict, out: str | None = None):
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        if out:
            self.dir = Path(out)
        else:
            root = Path(os.environ.get("UOMO_RUN_ROOT", "runs"))
            stamp = time.strftime("%Y%m%dT%H%M%S")
            self.dir = root / f"{stamp}-{self.hash[:8]}-{command}"
            n = 1
            while self.dir.exists():
                self.dir = root / f"{stamp}-{self.hash[:8]}-{command}-{n}"
                n += 1
        if self.dir.exists() and any(self.dir.iterdir()):
            raise ConfigError(f"run directory {self.dir} is not empty; runs never overwrite")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.timing: dict[str, float] = {}
        self.write_json("config.json", {"command": command, "config": cfg})

    def stamp(self, payload: dict) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, **payload}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_json(self, name: str, payload) -> Path:
        path = self.path(name)
        if isinstance(payload, dict):
            payload = self.stamp(payload)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text)
        return path

    def finish(self) -> None:
        (self.dir / "timing.json").write_text(json.dumps(self.timing, sort_keys=True, indent=2) + "\n")
        entries = {}
        for name in sorted(set(self.files)):
            digest = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
            entries[name] = digest
        manifest = self.stamp({"command": self.command, "artifacts": entries})
        (self.dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _find(sources, name: str) -> Path:
    for src in sources:
        p = Path(src) / name
        if p.exists():
            return p
    where = ", ".join(str(s) for s in sources) or "(no --from given)"
    raise FileNotFoundError(f"artifact {name!r} not found in {where}")


# ----------------------------------------------------------------- stages


def do_synth(run: Run, sources) -> None:
    cfg = run.cfg
    T = cfg["days"] * steps_per_day(cfg["interval_minutes"])
    opts = SynthOptions(phase_shift_hours=cfg["phase_shift_hours"])
    traffic, users, poi = synth_city(cfg["city_seed"], cfg["H"], cfg["V"], T, cfg["interval_minutes"], opts)
    save_grid(traffic, run.path("traffic.grid"))
    save_grid(users, run.path("users.grid"))
    save_poi(poi, run.path("city.poi"))
    run.write_json("city.json", {"city_seed": cfg["city_seed"], "shape": list(traffic.shape)})


def _load_city(sources):
    return (
        load_grid(_find(sources, "traffic.grid")),
        load_grid(_find(sources, "users.grid")),
        load_poi(_find(sources, "city.poi")),
    )


def _splits(cfg, sources):
    traffic, users, poi = _load_city(sources)
    crop = (cfg["crop"], cfg["crop"])
    return split_city(traffic, users, poi, crop, cfg["length"], cfg["train_windows"], cfg["stride"])


def _trace_payload(trace) -> dict:
    return {"loss": [float(v) for v in trace], "initial": float(np.mean(trace[:5])) if trace else None,
            "final": float(np.mean(trace[-10:])) if trace else None}


def do_train(run: Run, sources) -> None:
    cfg = run.cfg
    train_set, _ = _splits(cfg, sources)
    mcfg = model_config(cfg)
    tcfg = TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
        recon_weight=cfg["recon_weight"],
    )
    params, trace = train(init_params(mcfg, cfg["seed"]), train_set, mcfg, schedule(cfg), tcfg)
    save_checkpoint(run.path("pretrained.ckpt"), params, mcfg, run.stamp({"stage": "pretrain"}))
    run.write_json("train_trace.json", _trace_payload(trace))


def _checkpoint(sources, prefer=("finetuned.ckpt", "pretrained.ckpt")):
    for name in prefer:
        for src in sources:
            p = Path(src) / name
            if p.exists():
                params, mcfg, extra = load_checkpoint(p)
                return name.split(".")[0], params, mcfg
    raise FileNotFoundError(f"no checkpoint ({', '.join(prefer)}) in {', '.join(map(str, sources))}")


def do_finetune(run: Run, sources) -> None:
    cfg = run.cfg
    train_set, _ = _splits(cfg, sources)
    _, params, mcfg = _checkpoint(sources, ("pretrained.ckpt",))
    n = max(2, int(np.ceil(cfg["fraction"] * len(train_set))))
    data = train_set.subset(np.arange(min(n, len(train_set))))
    fcfg = finetune_config(cfg)
    policy = FreezePolicy.profile(cfg["freeze"], params)
    tuned, trace = finetune(params, data, mcfg, schedule(cfg), contrastive_config(cfg), fcfg, policy)
    extra = run.stamp({"stage": "finetune", "frozen": sorted(policy.frozen), "train_samples": len(data)})
    save_checkpoint(run.path("finetuned.ckpt"), tuned, mcfg, extra)
    run.write_json("finetune_trace.json", _trace_payload(trace))


def _forecaster(cfg, sources, prefer=("finetuned.ckpt", "pretrained.ckpt")):
    name, params, mcfg = _checkpoint(sources, prefer)
    ctx = name == "finetuned"
    model = Forecaster(
        params, mcfg, schedule(cfg), ctx and cfg["use_users"], ctx and cfg["use_poi"], cfg["n_samples"]
    )
    return name, model


def _held_out(cfg, sources):
    _, held = _splits(cfg, sources)
    if cfg["eval_limit"]:
        held = held.subset(np.arange(min(cfg["eval_limit"], len(held))))
    return held


def _report_payload(report: EvalReport, model: str) -> dict:
    d = json.loads(report.to_json())
    d.pop("runtime_s")
    d["model"] = model
    return d


def _forecast_stage(run: Run, sources, kind: str, stem: str) -> None:
    cfg = run.cfg
    held = _held_out(cfg, sources)
    name, model = _forecaster(cfg, sources)
    task = TaskSpec.standard(kind, cfg["length"])
    start = time.perf_counter()
    pred = forecast_batch(model, held, task, cfg["seed"])
    run.timing[kind] = time.perf_counter() - start
    report = score(pred, held.traffic, task, cfg["seed"])
    raw = np.maximum(denormalize_values(pred[0], held.traffic_stats), 0.0)
    save_grid(TrafficGrid(raw, held.interval_minutes, "traffic"), run.path(f"{stem}.grid"))
    np.save(run.path(f"{stem}.npy"), pred)
    run.write_json("report.json", _report_payload(report, name))


def do_forecast(run: Run, sources) -> None:
    if run.cfg["task"] == "gen":
        raise ConfigError("forecast takes --task short or long; use generate for generation")
    _forecast_stage(run, sources, run.cfg["task"], "forecast")


def do_generate(run: Run, sources) -> None:
    _forecast_stage(run, sources, "gen", "generated")


def evaluate_rows(cfg, sources, timing=None) -> list[dict]:
    """Reports for every available checkpoint and the HA baseline."""
    held = _held_out(cfg, sources)
    period = steps_per_day(held.interval_minutes)
    rows = []
    models = []
    for prefer in (("pretrained.ckpt",), ("finetuned.ckpt",)):
        try:
            models.append(_forecaster(cfg, sources, prefer))
        except FileNotFoundError:
            continue
    if not models:
        raise FileNotFoundError("evaluate needs at least one checkpoint in --from")
    for kind in cfg["tasks"]:
        task = TaskSpec.standard(kind, cfg["length"])
        for name, model in models:
            start = time.perf_counter()
            report = evaluate_set(model, held, task, cfg["seed"])
            if timing is not None:
                timing[f"{name}/{kind}"] = time.perf_counter() - start
            rows.append(_report_payload(report, name))
        if kind != "gen":
            ha = ha_baseline(held.traffic, task, period)
            pred = np.concatenate([held.traffic[..., : task.t_obs], ha], axis=-1)
            rows.append(_report_payload(score(pred, held.traffic, task, cfg["seed"]), "HA"))
    return rows


def do_evaluate(run: Run, sources) -> None:
    cfg = run.cfg
    rows = evaluate_rows(cfg, sources, run.timing)
    if cfg["fewshot"]:
        _, model = _forecaster(cfg, sources, ("pretrained.ckpt",))
        for frac, report in do_fewshot(cfg, model).items():
            rows.append(_report_payload(report, f"fewshot-{frac:.2f}"))
    run.write_json("metrics.json", {"city": f"city{cfg['city_seed']}", "reports": rows})


def _first_window(cfg, sources):
    """Raw grids of the first held-out window and the training stats."""
    traffic, users, poi = _load_city(sources)
    train_set, held = split_city(
        traffic, users, poi, (cfg["crop"], cfg["crop"]), cfg["length"], cfg["train_windows"], cfg["stride"]
    )
    t0 = int(held.t_start[0])
    L, c = cfg["length"], cfg["crop"]
    crop = lambda g: g.window(t0, L).crop(0, 0, c, c)
    return crop(traffic), crop(users), poi.crop(0, 0, c, c), held.traffic_stats, held.user_stats, t0


def do_optimize_deploy(run: Run, sources) -> None:
    cfg = run.cfg
    traffic, users, poi, ts, us, t0 = _first_window(cfg, sources)
    name, model = _forecaster(cfg, sources)
    demand, report = estimate_demand(model, traffic, users, poi, "generation", cfg["seed"], ts, us, t0)
    inst = DeploymentInstance(
        demand, cfg["deploy_M"], cfg["deploy_C0"], cfg["deploy_alpha"], cfg["deploy_beta"], cfg["deploy_at_most"]
    )
    res = solve_deployment(inst)
    truth = traffic.values.reshape(-1, traffic.T)
    true_inst = DeploymentInstance(truth, inst.M, inst.C0, inst.alpha, inst.beta, inst.at_most)
    x = np.asarray(res.x)
    realized = deployment_objective(true_inst, x, best_service(true_inst, x))
    oracle = solve_deployment(true_inst)
    run.write_text("deploy_instance.json", inst.to_json() + "\n")
    run.write_json(
        "deploy.json",
        {
            "model": name,
            "x": res.x,
            "objective_estimated": res.objective,
            "objective_realized": realized,
            "objective_real_based": oracle.objective,
            "x_real_based": oracle.x,
            "meta": res.meta,
        },
    )


def do_optimize_sleep(run: Run, sources) -> None:
    cfg = run.cfg
    traffic, users, poi, ts, us, t0 = _first_window(cfg, sources)
    name, model = _forecaster(cfg, sources)
    load, _ = estimate_demand(model, traffic, users, poi, "long_term", cfg["seed"], ts, us, t0)
    inst = SleepInstance(load, cfg["sleep_c0"], cfg["sleep_R_max"], cfg["sleep_alpha_E"], cfg["sleep_beta_E"])
    res = solve_sleep(inst)
    run.write_text("sleep_instance.json", inst.to_json() + "\n")
    run.write_json("sleep.json", {"model": name, **json.loads(res.to_json())})


# ------------------------------------------------------------------ report

REPORT_FIELDS = ("city_seed", "task", "model", "metric", "value", "seed")
_TASK_ORDER = {"short": 0, "long": 1, "gen": 2}
_METRICS = ("rmse", "mae", "jsd")


def collect_rows(dirs) -> list[dict]:
    """One row per (city-seed, task, model, metric); JSD is empty, not zero,
    for prediction tasks."""
    rows = []
    for d in dirs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise FileNotFoundError(f"no metrics.json in {d}")
        data = json.loads(path.read_text())
        for rep in data["reports"]:
            for metric in _METRICS:
                value = rep.get(metric)
                rows.append(
                    {
                        "city_seed": f"{data['city']}-s{data['seed']}",
                        "task": rep["task"],
                        "model": rep["model"],
                        "metric": metric,
                        "value": "" if value is None else repr(float(value)),
                        "seed": rep["seed"],
                    }
                )
    rows.sort(key=lambda r: (r["city_seed"], _TASK_ORDER.get(r["task"], 9), r["task"], r["model"],
                             _METRICS.index(r["metric"]), r["seed"]))
    return rows


def render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def render_markdown(rows) -> str:
    """One table per task, models as rows."""
    lines = []
    for task in sorted({r["task"] for r in rows}, key=lambda t: (_TASK_ORDER.get(t, 9), t)):
        sub = [r for r in rows if r["task"] == task]
        cities = sorted({r["city_seed"] for r in sub})
        header = ["model"] + [f"{c} {m}" for c in cities for m in _METRICS]
        lines += [f"### {task}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for model in sorted({r["model"] for r in sub}):
            cells = [model]
            for c in cities:
                for m in _METRICS:
                    hit = [r["value"] for r in sub if (r["model"], r["city_seed"], r["metric"]) == (model, c, m)]
                    cells.append(f"{float(hit[0]):.4f}" if hit and hit[0] != "" else "")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def do_report(run: Run, sources) -> None:
    rows = collect_rows(sources)
    run.write_text("report.csv", render_csv(rows))
    run.write_text("report.md", render_markdown(rows))


def do_fewshot(cfg, model) -> dict:
    """Zero/few-shot reports on a phase-shifted city from a different seed."""
    interval = cfg["interval_minutes"]
    size = cfg["transfer_size"]
    T = cfg["transfer_days"] * steps_per_day(interval)
    opts = SynthOptions(phase_shift_hours=cfg["transfer_phase_hours"])
    traffic, users, poi = synth_city(cfg["transfer_seed"], size, size, T, interval, opts)
    n_windows = (T - cfg["length"]) // cfg["stride"] + 1
    head = (int(np.ceil(max(FEWSHOT_FRACTIONS) * n_windows)) - 1) * cfg["stride"] + cfg["length"]
    ts, us = compute_stats(traffic.values[..., :head]), compute_stats(users.values[..., :head])
    data = city_samples(traffic, users, poi, (cfg["crop"], cfg["crop"]), cfg["length"], ts, us, cfg["stride"])
    fcfg = finetune_config(cfg)
    return fewshot_protocol(
        model, data, TaskSpec.standard(cfg["task"], cfg["length"]), cfg["seed"], FEWSHOT_FRACTIONS,
        fcfg, contrastive_config(cfg), cfg["eval_limit"] or None,
    )


# ---------------------------------------------------------------- pipeline


def do_pipeline(run: Run, sources) -> None:
    """synth -> train -> finetune -> evaluate -> optimize-deploy -> report,
    each stage in a subdirectory of this run."""
    cfg = run.cfg
    stages = [
        ("synth", do_synth, []),
        ("train", do_train, ["synth"]),
        ("finetune", do_finetune, ["synth", "train"]),
        ("evaluate", do_evaluate, ["synth", "train", "finetune"]),
        ("optimize-deploy", do_optimize_deploy, ["synth", "finetune"]),
        ("report", do_report, ["evaluate"]),
    ]
    for name, fn, deps in stages:
        start = time.perf_counter()
        sub = Run(name, cfg, run.dir / name)
        fn(sub, [run.dir / d for d in deps])
        sub.timing["total"] = time.perf_counter() - start
        sub.finish()
        run.timing[name] = sub.timing["total"]
        log.info("stage %s done in %.1fs", name, sub.timing["total"])


HANDLERS = {
    "synth": do_synth,
    "train": do_train,
    "finetune": do_finetune,
    "forecast": do_forecast,
    "generate": do_generate,
    "evaluate": do_evaluate,
    "optimize-deploy": do_optimize_deploy,
    "optimize-sleep": do_optimize_sleep,
    "report": do_report,
    "pipeline": do_pipeline,
}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uomo", description="Masked-diffusion traffic forecasting runs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("sources", nargs="*", help="run directories to read (report); same as --from")
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=("short", "long", "gen"))
    p.add_argument("--fraction", type=float)
    p.add_argument("--out", help="run directory (default: new directory under $UOMO_RUN_ROOT)")
    p.add_argument("--from", dest="inputs", action="append", default=[], help="earlier run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, kind: str, exc: BaseException, run_dir=None) -> int:
    payload = {"error": kind, "message": str(exc), "exit_code": code, "type": type(exc).__name__}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    if run_dir is not None and Path(run_dir).is_dir():
        (Path(run_dir) / "error.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    overrides = list(extra)
    for key in ("seed", "task", "fraction"):
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"{key}={value}")
    run = None
    try:
        bad = [o for o in extra if not o.startswith("--") or "=" not in o]
        if bad:
            raise ConfigError(f"unrecognized arguments: {' '.join(bad)}")
        cfg = resolve_config(args.config, overrides)
        run = Run(args.command, cfg, args.out)
        start = time.perf_counter()
        HANDLERS[args.command](run, [*args.inputs, *args.sources])
        run.timing["total"] = time.perf_counter() - start
        run.finish()
    except ConfigError as exc:
        return _fail(1, "config", exc, run.dir if run else None)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("run failed", exc_info=True)
        return _fail(2, "runtime", exc, run.dir if run else None)
    print(json.dumps({"run_dir": str(run.dir), "config_hash": run.hash, "seed": run.seed}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
