import math

import numpy as np
import pytest

import uomo.finetune as ft
from helpers import check_gradients, dense_model, synthetic_context, synthetic_tokens
from uomo.context import context_tokens
from uomo.denoiser import init_params
from uomo.diffusion import LossOptions, pretrain_loss
from uomo.evalkit import Forecaster, TaskSpec, evaluate_set
from uomo.finetune import (
    ContrastiveConfig,
    FinetuneConfig,
    FreezePolicy,
    contrastive_loss,
    finetune,
    sample_pairs,
)
from uomo.masking import Random, ShortTerm, make_mask


def ctx_fn(cfg, B, seed=0):
    users, poi, starts = synthetic_context(cfg, B, seed)

    def y(leaves):
        return context_tokens(leaves, cfg.token, users, poi, starts, 15)

    return y


def test_pairs_for_two_samples_swap():
    assert sample_pairs(2, 1, 0).tolist() == [[1], [0]]


@pytest.mark.parametrize("B,n", [(3, 2), (8, 1), (8, 7), (16, 4)])
def test_pairs_are_distinct_others(B, n):
    pairs = sample_pairs(B, n, 3)
    assert pairs.shape == (B, n)
    for i, row in enumerate(pairs):
        assert i not in row and len(set(row)) == n
    assert np.array_equal(pairs, sample_pairs(B, n, 3))


def test_pairs_need_enough_samples():
    with pytest.raises(ValueError, match="too small"):
        sample_pairs(2, 2, 0)


def test_default_lambda_and_validation():
    assert ContrastiveConfig(3).weight == pytest.approx(math.log(4) / 30)
    assert ContrastiveConfig(lam=0.0).weight == 0.0
    with pytest.raises(ValueError):
        ContrastiveConfig(0)
    with pytest.raises(ValueError):
        ContrastiveConfig(lam=-1.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(clamp=0.0)


def test_lambda_zero_equals_pretraining_exactly():
    cfg, params, sched = dense_model(2)
    tokens = synthetic_tokens(cfg, 4, 2)
    m = make_mask(Random(0.5, 3), cfg.lattice)
    y = ctx_fn(cfg, 4)
    a = contrastive_loss(params, tokens, m, sched, cfg, ContrastiveConfig(2, lam=0.0), 17, y=y)
    b = pretrain_loss(params, tokens, m, sched, cfg, 17, y=y)
    assert a[0] == b[0]
    for n in params:
        assert np.array_equal(a[1][n], b[1][n]), n


def test_identical_pairs_scale_positive_term(monkeypatch):
    cfg, params, sched = dense_model(4)
    one = synthetic_tokens(cfg, 1, 4)
    tokens = np.repeat(one, 3, axis=0)
    m = make_mask(ShortTerm(2), cfg.lattice)
    rng = np.random.default_rng(0)
    k = np.full(3, 20)
    eps = np.repeat(rng.standard_normal((1, cfg.n_tokens, cfg.C)), 3, axis=0)
    monkeypatch.setattr(ft, "draw_noise", lambda *a: (k, eps))
    opts = LossOptions(0.0)
    pos = contrastive_loss(params, tokens, m, sched, cfg, ContrastiveConfig(2, lam=0.0), 1, options=opts)[0]
    lam = 0.05
    val = contrastive_loss(params, tokens, m, sched, cfg, ContrastiveConfig(2, lam=lam), 1, options=opts)[0]
    assert 2 * pos < 10.0
    assert val == pytest.approx((1 - lam * 2) * pos, rel=1e-12)


def test_clamp_caps_the_negative_term(monkeypatch):
    cfg, params, sched = dense_model(4)
    tokens = synthetic_tokens(cfg, 3, 4)
    m = make_mask(ShortTerm(2), cfg.lattice)
    base = contrastive_loss(params, tokens, m, sched, cfg, ContrastiveConfig(1, lam=0.0), 1)[0]
    capped = contrastive_loss(params, tokens, m, sched, cfg, ContrastiveConfig(1, lam=1.0, clamp=1e-6), 1)[0]
    assert capped == pytest.approx(base - 1e-6, abs=1e-12)


def test_gradients_and_frozen_zeros():
    cfg, params, sched = dense_model(5)
    tokens = synthetic_tokens(cfg, 3, 5)
    m = make_mask(Random(0.5, 1), cfg.lattice)
    y = ctx_fn(cfg, 3, 5)
    ccfg = ContrastiveConfig(2, lam=0.2)
    policy = FreezePolicy.profile("default", params)
    trainable = policy.trainable(params)
    _, g = contrastive_loss(params, tokens, m, sched, cfg, ccfg, 3, y=y, trainable=trainable)
    for n in policy.frozen:
        assert not g[n].any(), n
    assert g["layers.0.ada.W"].any()
    _, full = contrastive_loss(params, tokens, m, sched, cfg, ccfg, 3, y=y)
    sub = {n: params[n] for n in ("layers.0.ada.W", "final.ada.b", "ctx.poi.W", "head.W")}

    def loss(p):
        return contrastive_loss({**params, **p}, tokens, m, sched, cfg, ccfg, 3, y=y)[0]

    errors = check_gradients(loss, sub, full, n_coords=6)
    assert max(errors.values()) <= 1e-4


def test_freeze_profiles():
    params = init_params(dense_model()[0], 0)
    default = FreezePolicy.profile("default", params)
    trainable = set(default.trainable(params))
    assert {"layers.0.ada.W", "layers.1.ada.b", "final.ada.W", "head.W", "dec.W", "ctx.user.W"} <= trainable
    assert {"layers.0.attn.q", "layers.0.ffn.W1", "emb.W", "pos"} <= default.frozen
    assert not FreezePolicy.profile("none", params).frozen
    with pytest.raises(ValueError, match="unknown freeze profile"):
        FreezePolicy.profile("bogus", params)


def test_zero_steps_is_identity(pretrained):
    params, cfg, sched, data, _ = pretrained
    out, trace = finetune(params, data, cfg, sched, fcfg=FinetuneConfig(steps=0))
    assert trace == []
    assert all(out[n].tobytes() == params[n].tobytes() for n in params)


def test_frozen_blocks_bitwise_unchanged(pretrained):
    params, cfg, sched, data, _ = pretrained
    before = {n: v.tobytes() for n, v in params.items()}
    policy = FreezePolicy.profile("default", params)
    out, _ = finetune(params, data, cfg, sched, fcfg=FinetuneConfig(steps=20), policy=policy)
    for n in policy.frozen:
        assert out[n].tobytes() == before[n]
    assert any(out[n].tobytes() != before[n] for n in policy.trainable(params))
    assert all(params[n].tobytes() == before[n] for n in params)


def test_long_run_stays_finite(pretrained):
    params, cfg, sched, data, _ = pretrained
    _, trace = finetune(params, data, cfg, sched, fcfg=FinetuneConfig(steps=1000, seed=1))
    assert np.all(np.isfinite(trace))


def test_finetune_beats_pretrain_only_short_term(pretrained):
    params, cfg, sched, data, held = pretrained
    tuned, _ = finetune(params, data, cfg, sched, fcfg=FinetuneConfig(steps=200))
    task = TaskSpec.standard("short")
    base = evaluate_set(Forecaster(params, cfg, sched, n_samples=16), held, task, 0).rmse
    after = evaluate_set(Forecaster(tuned, cfg, sched, True, True, 16), held, task, 0).rmse
    assert after < base
