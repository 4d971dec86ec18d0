import numpy as np
import pytest

from helpers import dense_model, synthetic_context
from uomo.context import calendar, context_tokens, poi_dynamic, poi_static, time_embed, tokenize_tensor
from uomo import autograd as ag
from uomo.tokenizer import TokenSpec, tokenize_array


def test_calendar_fields():
    day, hour = calendar(np.array([0, 95, 96, 96 * 7]), 15)
    assert day.tolist() == [0, 0, 1, 0]
    assert hour.tolist() == [0, 23, 0, 0]


def test_tokenize_tensor_matches_array_version():
    spec = TokenSpec(2, 2, 4, 4)
    x = np.random.default_rng(0).normal(size=(3, 4, 4, 8))
    np.testing.assert_array_equal(tokenize_tensor(ag.Tensor(x), spec).data, tokenize_array(x, spec))


def test_context_shapes_and_ablations():
    cfg, params, _ = dense_model()
    users, poi, starts = synthetic_context(cfg, 3)
    args = (params, cfg.token, users, poi, starts, 15)
    both = context_tokens(*args).data
    u = context_tokens(*args, use_poi=False).data
    p = context_tokens(*args, use_users=False).data
    assert both.shape == (3, cfg.n_tokens, cfg.C)
    np.testing.assert_allclose(both, u + p)
    assert context_tokens(*args, use_users=False, use_poi=False) is None


def test_poi_features_are_bounded():
    cfg, params, _ = dense_model()
    _, poi, starts = synthetic_context(cfg, 2)
    hs = poi_static(poi, params)
    assert np.all((hs.data > 0) & (hs.data < 1))
    t = starts[:, None] + np.arange(cfg.grid[2])
    dyn = poi_dynamic(hs, t, 15, params).data
    assert dyn.shape == (2, 8, 8, 64)
    assert np.all((dyn > 0) & (dyn < 1))


def test_time_embedding_depends_on_calendar_only():
    cfg, params, _ = dense_model()
    a = time_embed(np.array([5]), 60, params).data
    b = time_embed(np.array([5 + 24 * 7]), 60, params).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        time_embed(np.array([-1]), 60, params)


def test_category_count_checked():
    cfg, params, _ = dense_model()
    with pytest.raises(ValueError, match="category"):
        poi_static(np.zeros((2, 2, 14)), params)
