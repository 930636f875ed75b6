import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sinklab import numerics as nx


def _fd_check(fn, *arrays, tol=1e-6):
    """Compare tape gradients of sum(fn(...)*w) against central differences."""
    rng = np.random.default_rng(0)
    with nx.Tape() as tape:
        ts = [nx.Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        w = rng.standard_normal(out.shape)
        loss = nx.tsum(out * w)
    grads = nx.grad(tape, loss, ts)
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [x if m == k else arrays[m] for m in range(len(arrays))]
            return float(np.sum(fn(*[nx.Tensor(v) for v in args]).data * w))
        ref = nx.central_difference(f, a)
        np.testing.assert_allclose(grads[k], ref, rtol=tol, atol=tol)


def test_doc_example_square():
    with nx.Tape() as tape:
        x = nx.Tensor(3.0, requires_grad=True)
        y = x * x
    (g,) = nx.grad(tape, y, [x])
    assert g == 6.0


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 3)]),
    ("mul", lambda a, b: a * b, [(3, 1), (1, 5)]),
    ("matmul", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (2, 4, 2)]),
    ("transpose", lambda a: a.transpose(1, 0, 2), [(2, 3, 4)]),
    ("reshape", lambda a: a.reshape(6, 2), [(3, 4)]),
    ("index", lambda a: a[1:, ::2], [(3, 4)]),
    ("relu", lambda a: nx.relu(a), [(4, 5)]),
    ("gelu", lambda a: nx.gelu(a), [(4, 5)]),
    ("rms_norm", lambda a, g: nx.rms_norm(a, g), [(3, 6), (6,)]),
    ("softmax", lambda a: nx.softmax_rows(a, np.tril(np.ones((4, 4), bool))), [(4, 4)]),
    ("sum_axis", lambda a: a.sum(axis=1, keepdims=True), [(3, 4)]),
])
def test_primitive_gradients_match_finite_differences(name, fn, shapes):
    rng = np.random.default_rng(1)
    arrays = [rng.standard_normal(s) + (0.3 if name == "relu" else 0.0) for s in shapes]
    _fd_check(fn, *arrays)


def test_rope_and_embedding_gradients():
    rng = np.random.default_rng(2)
    cos, sin = np.cos(rng.standard_normal((5, 4))), np.sin(rng.standard_normal((5, 4)))
    _fd_check(lambda a: nx.rope(a, cos, sin), rng.standard_normal((5, 4)))
    ids = np.array([0, 2, 2, 1])
    _fd_check(lambda w: nx.embedding(w, ids), rng.standard_normal((3, 4)))


def test_cross_entropy_gradient_and_weights():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((5, 7))
    targets = rng.integers(0, 7, 5)
    weights = np.array([1, 0, 1, 1, 0.0])
    with nx.Tape() as tape:
        x = nx.Tensor(logits, requires_grad=True)
        loss = nx.cross_entropy(x, targets, weights)
    (g,) = nx.grad(tape, loss, [x])
    ref = nx.central_difference(lambda v: float(nx.cross_entropy(nx.Tensor(v), targets, weights).data), logits)
    np.testing.assert_allclose(g, ref, atol=1e-8)
    assert np.all(g[weights == 0] == 0)
    # naive oracle
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    nll = -np.log(p[np.arange(5), targets])
    assert float(loss.data) == pytest.approx(np.sum(nll * weights) / weights.sum(), rel=1e-12)


def test_detach_blocks_gradient_and_is_flagged():
    with nx.Tape() as tape:
        x = nx.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = nx.tsum(nx.detach(x * x) * x)
    (g,) = nx.grad(tape, y, [x])
    np.testing.assert_array_equal(g, [1.0, 4.0])
    assert any(tape.detach_flags)


def test_grad_can_be_called_repeatedly_on_one_tape():
    with nx.Tape() as tape:
        x = nx.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        y = x * x
    rows = [nx.grad(tape, y, [x], seed=np.eye(3)[k])[0] for k in range(3)]
    np.testing.assert_array_equal(np.array(rows), np.diag([2.0, 4.0, 6.0]))


def test_nonfinite_values_raise():
    with pytest.raises(nx.NonFiniteError):
        nx.softmax_rows(np.array([[0.0, np.nan]]))


def test_fully_masked_row_raises():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(nx.RowFullyMasked):
        nx.softmax_rows(np.zeros((2, 2)), mask)


def naive_softmax(x, mask):
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        cols = [c for c in range(x.shape[1]) if mask[r, c]]
        e = [np.exp(x[r, c]) for c in cols]
        for c, v in zip(cols, e):
            out[r, c] = v / sum(e)
    return out


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (5, 5), elements=st.floats(-30, 30)),
       hnp.arrays(bool, (5, 5)))
def test_masked_softmax_matches_naive(x, mask):
    mask = mask.copy()
    mask[:, 0] = True
    p = nx.softmax_rows(x, mask)
    np.testing.assert_allclose(p, naive_softmax(x, mask), rtol=1e-10, atol=1e-300)
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_is_stable_for_large_logits():
    p = nx.softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000))
def test_spectral_norm_matches_svd(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    ref = np.linalg.svd(a, compute_uv=False)[0]
    res = nx.power_iteration(a)
    assert res.value == pytest.approx(ref, rel=1e-6)


def test_spectral_norm_edge_cases():
    assert nx.spectral_norm(np.zeros((3, 3))) == 0.0
    assert nx.spectral_norm(np.diag([3.0, -5.0, 1.0])) == pytest.approx(5.0, rel=1e-12)
    res = nx.power_iteration(np.eye(4))
    assert res.converged and res.value == pytest.approx(1.0)


def test_spectral_norm_warns_when_not_converged():
    a = np.diag([1.0, 0.999999])
    with pytest.warns(RuntimeWarning):
        nx.spectral_norm(a, tol=0.0, max_iter=5)


def test_dtype_of():
    assert nx.dtype_of("double") is np.float64
    assert nx.dtype_of("single") is np.float32
    with pytest.raises(ValueError):
        nx.dtype_of("half")
