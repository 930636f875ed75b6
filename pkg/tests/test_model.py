import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sinklab import numerics as nx
from sinklab.model import (ConfigError, ModelConfig, TokenError, attention_weights, checkpoint_meta, forward,
                           init_model, load_checkpoint, rope_tables, save_checkpoint, zero_model)
from sinklab.training import gradient_check

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=20, mlp_hidden=16, precision="double", max_context=16)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(nonlinearity="tanh")
    with pytest.raises(ConfigError):
        ModelConfig(d_model=7, positional="rope")
    assert ModelConfig.bound_compliant_config().bound_compliant
    assert not ModelConfig().bound_compliant


def test_forward_shapes_and_stochastic_attention():
    m = init_model(SMALL, seed=0, std=0.3)
    rec = forward(m, np.arange(7), keep_values=True, keep_logits=True)
    assert rec.hidden.shape == (3, 7, 8)
    assert rec.attention.shape == (2, 2, 7, 7)
    assert rec.values.shape == (2, 2, 7, 8)
    assert rec.logits.shape == (7, 20)
    np.testing.assert_allclose(rec.attention.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(rec.attention, 1) == 0)


def test_batch_matches_single_sequences():
    m = init_model(SMALL, seed=1, std=0.3)
    toks = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    batch = forward(m, toks, keep_logits=True)
    for b in range(2):
        one = forward(m, toks[b], keep_logits=True)
        np.testing.assert_allclose(batch.logits[b], one.logits, atol=1e-12)
        np.testing.assert_allclose(batch.attention[b], one.attention, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 6))
def test_causality_future_tokens_do_not_leak(seed, cut):
    rng = np.random.default_rng(seed)
    m = init_model(SMALL, seed=seed, std=0.3)
    a = rng.integers(0, 20, 8)
    b = a.copy()
    b[cut:] = rng.integers(0, 20, 8 - cut)
    ha, hb = forward(m, a).hidden, forward(m, b).hidden
    np.testing.assert_allclose(ha[:, :cut], hb[:, :cut], atol=1e-12)


def test_rope_scores_depend_only_on_offset():
    rng = np.random.default_rng(3)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    cos, sin = rope_tables(12, 8)

    def score(i, j):
        qi = q * cos[i] + nx.rotate_half(q) * sin[i]
        kj = k * cos[j] + nx.rotate_half(k) * sin[j]
        return qi @ kj

    assert score(5, 2) == pytest.approx(score(9, 6), rel=1e-10)
    assert score(3, 3) == pytest.approx(q @ k, rel=1e-10)


def test_attention_weights_uniform_for_zero_queries():
    a = attention_weights(np.zeros((4, 6)), np.ones((4, 6)))
    np.testing.assert_allclose(a, np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None])


def test_zero_model_is_identity_on_hidden_states():
    m = zero_model(SMALL.replace(normalization="none", positional="none", nonlinearity="relu"))
    m.params["embed"] = np.random.default_rng(0).standard_normal((20, 8))
    rec = forward(m, np.arange(5))
    np.testing.assert_array_equal(rec.hidden[-1], rec.hidden[0])


def test_token_errors():
    m = init_model(SMALL)
    with pytest.raises(TokenError):
        forward(m, np.array([0, 20]))
    with pytest.raises(TokenError):
        forward(m, np.array([0.0, 1.0]))
    with pytest.raises(ConfigError):
        forward(m, np.zeros(17, dtype=int))


@pytest.mark.parametrize("cfg", [
    SMALL,
    SMALL.replace(nonlinearity="relu", normalization="none", positional="none"),
    SMALL.replace(n_layers=1, n_heads=3, d_model=4, mlp_hidden=8),
])
def test_training_loss_gradient_matches_finite_differences(cfg):
    m = init_model(cfg, seed=4, std=0.4)
    errs = gradient_check(m, np.array([[1, 5, 3, 9, 2]]))
    assert max(errs.values()) < 1e-6, errs


def test_checkpoint_round_trip(tmp_path):
    for prec in ("single", "double"):
        m = init_model(SMALL.replace(precision=prec), seed=5)
        save_checkpoint(m, tmp_path / prec, {"step": 12})
        back = load_checkpoint(tmp_path / prec)
        assert back.config == m.config and back.fingerprint() == m.fingerprint()
        for k in m.params:
            assert back.params[k].dtype == m.params[k].dtype
            np.testing.assert_array_equal(back.params[k], m.params[k])
        assert checkpoint_meta(tmp_path / prec)["step"] == "12"


def test_nonfinite_parameters_rejected():
    m = init_model(SMALL)
    bad = dict(m.params)
    bad["embed"] = bad["embed"].copy()
    bad["embed"][0, 0] = np.nan
    with pytest.raises(Exception):
        type(m)(m.config, bad)
