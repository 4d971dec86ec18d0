"""Masked-diffusion mobile-traffic forecasting on a tiny numpy autodiff,
with contrastive context fine-tuning and two network optimizers that
consume the forecasts."""
from .denoiser import ModelConfig, init_params, predict_noise
from .diffusion import TrainConfig, make_schedule, pretrain_loss, sample, train
from .evalkit import Forecaster, TaskSpec, fewshot_protocol, run_task
from .finetune import ContrastiveConfig, FinetuneConfig, FreezePolicy, contrastive_loss
from .grid_store import PoiMap, TrafficGrid, load_grid, normalize, save_grid, synth_city
from .netopt import solve_deployment, solve_sleep
from .tokenizer import TokenSpec, detokenize, tokenize

__all__ = [
    "ContrastiveConfig",
    "FinetuneConfig",
    "Forecaster",
    "FreezePolicy",
    "ModelConfig",
    "PoiMap",
    "TaskSpec",
    "TokenSpec",
    "TrafficGrid",
    "TrainConfig",
    "contrastive_loss",
    "detokenize",
    "fewshot_protocol",
    "init_params",
    "load_grid",
    "make_schedule",
    "normalize",
    "predict_noise",
    "pretrain_loss",
    "run_task",
    "sample",
    "save_grid",
    "solve_deployment",
    "solve_sleep",
    "synth_city",
    "tokenize",
    "train",
]
