import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import check_gradients, dense_model, synthetic_tokens
from uomo.diffusion import (
    DivergenceError,
    LossOptions,
    TrainConfig,
    check_finite,
    make_schedule,
    pretrain_loss,
    pretrain_trainable,
    q_sample,
    sample,
    sample_latent,
)
from uomo.masking import Random, ShortTerm, flatten_mask, make_mask


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.1, 0.05)
    s = make_schedule(50)
    assert s.K == 50 and np.all(np.diff(s.alpha_bars) < 0)
    assert s.sigmas[0] == 0.0
    with pytest.raises(ValueError, match="out of range"):
        s.at(51)


@given(st.integers(1, 50), st.floats(-3, 3))
def test_q_sample_mean_and_scale(k, e):
    s = make_schedule()
    ab, coef = s.at(k)
    assert q_sample(np.array([e]), k, np.array([0.0]), s)[0] == pytest.approx(np.sqrt(ab) * e)
    assert q_sample(np.array([0.0]), k, np.array([1.0]), s)[0] == pytest.approx(np.sqrt(1 - ab))


@pytest.mark.parametrize("k", [1, 10, 50])
def test_q_sample_variance_law(k):
    s = make_schedule()
    rng = np.random.default_rng(k)
    e = rng.normal(0.0, 2.0, size=10_000)
    x = q_sample(e, k, rng.standard_normal(10_000), s)
    ab = s.alpha_bars[k - 1]
    expected = ab * 4.0 + (1.0 - ab)
    assert abs(x.var() / expected - 1.0) < 0.05


def test_linear_noise_coefficient_mode():
    s = make_schedule(linear_noise_coef=True)
    ab, coef = s.at(30)
    assert coef == pytest.approx(1.0 - ab)


def oracle_predictor(target, sched):
    def predict(e_k, k, o, y):
        ab, coef = sched.at(k)
        shape = (-1, 1, 1)
        return (e_k - np.sqrt(ab).reshape(shape) * target) / coef.reshape(shape)

    return predict


def test_cheating_oracle_recovers_target():
    cfg, params, sched = dense_model()
    rng = np.random.default_rng(0)
    B, N = 3, cfg.n_tokens
    m = flatten_mask(make_mask(ShortTerm(3), cfg.lattice))
    target = rng.normal(size=(B, N, cfg.C)) * m[None, :, None]
    out = sample_latent(np.zeros_like(target), m, None, params, sched, cfg, 4, oracle_predictor(target, sched))
    assert np.sqrt(np.mean((out - target) ** 2)) < 1e-2


def test_seeded_sampling_is_bitwise_reproducible():
    cfg, params, sched = dense_model()
    m = make_mask(Random(0.5, 1), cfg.lattice)
    o = np.random.default_rng(2).normal(size=(2, cfg.n_tokens, cfg.C))
    a = sample(o, m, None, params, sched, cfg, 9)
    b = sample(o, m, None, params, sched, cfg, 9)
    assert a.tobytes() == b.tobytes()
    c = sample(o, m, None, params, sched, cfg, 10)
    assert a.tobytes() != c.tobytes()


def test_sampler_never_writes_observed_slots():
    cfg, params, sched = dense_model()
    m = flatten_mask(make_mask(ShortTerm(2), cfg.lattice))
    o = np.random.default_rng(0).normal(size=(2, cfg.n_tokens, cfg.C))
    e = sample_latent(o, m, None, params, sched, cfg, 0)
    assert np.all(e[:, m == 0] == 0)


def test_loss_ignores_targets_outside_the_mask():
    cfg, params, sched = dense_model()
    tokens = synthetic_tokens(cfg, 2)
    m = flatten_mask(make_mask(ShortTerm(2), cfg.lattice))
    v = pretrain_loss(params, tokens, m, sched, cfg, 3, options=LossOptions(0.0))[0]
    assert np.isfinite(v) and v > 0
    with pytest.raises(ValueError, match="empty mask"):
        pretrain_loss(params, tokens, np.zeros_like(m), sched, cfg, 3)


def test_loss_is_deterministic_in_seed():
    cfg, params, sched = dense_model()
    tokens = synthetic_tokens(cfg, 2)
    m = make_mask(Random(0.5, 0), cfg.lattice)
    a = pretrain_loss(params, tokens, m, sched, cfg, 11)
    b = pretrain_loss(params, tokens, m, sched, cfg, 11)
    assert a[0] == b[0]
    assert all(np.array_equal(a[1][n], b[1][n]) for n in params)


def test_perfect_stub_gives_zero_denoising_loss():
    cfg, params, sched = dense_model()
    tokens = synthetic_tokens(cfg, 2)
    m = make_mask(Random(0.5, 0), cfg.lattice)
    seed = 5
    rng = np.random.default_rng(seed)
    _, eps = rng.integers(1, 51, size=2), rng.standard_normal((2, cfg.n_tokens, cfg.C))
    value, _ = pretrain_loss(
        params, tokens, m, sched, cfg, seed, options=LossOptions(0.0), predict=lambda e_k, k, o, y: eps
    )
    assert value == 0.0


def test_gradients_match_finite_differences_with_recon():
    cfg, params, sched = dense_model(1)
    tokens = synthetic_tokens(cfg, 2, seed=1)
    m = make_mask(Random(0.5, 2), cfg.lattice)
    value, grads = pretrain_loss(params, tokens, m, sched, cfg, 8)
    errors = check_gradients(lambda p: pretrain_loss(p, tokens, m, sched, cfg, 8)[0], params, grads, n_coords=4)
    assert max(errors.values()) <= 1e-4


def test_trainable_subset_gets_gradients_only_there():
    cfg, params, sched = dense_model()
    tokens = synthetic_tokens(cfg, 2)
    m = make_mask(Random(0.5, 0), cfg.lattice)
    trainable = pretrain_trainable(params)
    assert not any(n.startswith(("emb.", "ctx.")) for n in trainable)
    _, grads = pretrain_loss(params, tokens, m, sched, cfg, 0, trainable=trainable)
    assert set(grads) == set(trainable)


def test_divergence_guard():
    check_finite(1.0, 0)
    with pytest.raises(DivergenceError, match="step 7"):
        check_finite(float("nan"), 7)
    assert TrainConfig().to_dict()["tasks"] == ["short", "long", "gen", "random"]
