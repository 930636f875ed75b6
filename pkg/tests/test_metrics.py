import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sinklab import metrics as M

from .oracles import harmonic_over, random_causal


def uniform_causal(T):
    a = np.tril(np.ones((T, T)))
    return a / a.sum(axis=1, keepdims=True)


def test_uniform_causal_score_is_harmonic():
    assert M.head_sink_score(uniform_causal(64), 64) == pytest.approx(harmonic_over(64), abs=1e-12)
    # H_64 = 4.7438998..., so the ratio is 0.07412330 to eight places
    assert harmonic_over(64) == pytest.approx(0.07412330, abs=1e-8)


def test_one_hot_to_first_scores_one():
    a = np.zeros((10, 10))
    a[:, 0] = 1.0
    assert M.head_sink_score(a, 10) == 1.0
    rep = M.sink_rate(np.broadcast_to(a, (2, 3, 10, 10)), epsilon=0.3, window=10)
    assert rep.sink_rate == 1.0 and rep.sunk().all()


def test_window_counts_only_the_first_rows():
    a = uniform_causal(8)
    assert M.head_sink_score(a, 4) == pytest.approx((1 + 1 / 2 + 1 / 3 + 1 / 4) / 4)
    with pytest.raises(M.WindowError):
        M.head_sink_score(a, 9)
    with pytest.raises(M.WindowError):
        M.head_scores(a[None, None], 0)


def test_rejects_non_stochastic_and_non_square():
    with pytest.raises(M.MetricInputError):
        M.head_sink_score(np.ones((3, 3)))
    with pytest.raises(M.MetricInputError):
        M.head_sink_score(np.ones((3, 4)) / 4)
    with pytest.raises(M.MetricInputError):
        M.sink_rate(np.ones((3, 3)) / 3)
    with pytest.raises(ValueError):
        M.sink_rate(uniform_causal(4)[None, None], epsilon=1.0, window=4)


def test_head_scores_with_long_sequence_and_short_window():
    rng = np.random.default_rng(0)
    a = random_causal(rng, (2, 3, 20, 20))
    s = M.head_scores(a, 5)
    ref = np.array([[M.head_sink_score(a[l, h], 5) for h in range(3)] for l in range(2)])
    np.testing.assert_allclose(s, ref)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_sink_rate_monotone_in_epsilon(seed, e1, e2):
    a = random_causal(np.random.default_rng(seed), (2, 4, 12, 12))
    lo, hi = sorted((e1, e2))
    assert M.sink_rate(a, lo, 12).sink_rate >= M.sink_rate(a, hi, 12).sink_rate


def test_multi_prompt_average_before_threshold():
    one = np.zeros((1, 1, 4, 4))
    one[..., 0] = 1.0
    uni = uniform_causal(4)[None, None]
    rep = M.sink_rate(np.stack([one, uni]), epsilon=0.6, window=4)
    # mean of 1.0 and 0.52 is above 0.6 although the uniform prompt alone is not
    assert rep.n_prompts == 2 and rep.sink_rate == 1.0
    multi = M.sink_rate_multi([one, uniform_causal(6)[None, None]], epsilon=0.6, window=4)
    assert multi.per_head_score[0, 0] == pytest.approx(rep.per_head_score[0, 0])


def test_report_csv_and_sorting():
    rep = M.report_from_scores(np.array([[0.5, 0.1], [0.1, 0.9]]), 0.3, 64)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "layer,head,score,sunk" and lines[1] == "0,0,0.5,1"
    assert "summary,sink_rate,0.5," in lines
    assert [(l, h) for l, h, _ in rep.sorted_heads()] == [(0, 1), (1, 0), (0, 0), (1, 1)]


def test_collapse_distances_hand_values():
    V = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
    assert M.rank_collapse_distance(V) == pytest.approx(np.sqrt(8.0))
    assert M.rep_collapse_distance(V) == 2.0
    assert M.rank_collapse_distance(np.ones((5, 3))) == 0.0
    with pytest.raises(M.MetricInputError):
        M.rep_collapse_distance(np.ones((1, 3)))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_rep_distance_at_most_twice_mu(V):
    assert M.rep_collapse_distance(V) <= 2 * M.rank_collapse_distance(V) + 1e-9


def test_token_norm_histogram_counts_every_row():
    V = np.random.default_rng(1).standard_normal((50, 4))
    h = M.token_norm_histogram(V, bins=7)
    assert h.counts.sum() == 50 and len(h.edges) == 8
    r = M.collapse_report(np.stack([V, V * 0.5]))
    assert r.layer == 1 and r.norms.shape == (50,)
