import numpy as np
import pytest

from sinklab import traceio as TI
from sinklab.model import ModelConfig, forward, init_model

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=8, mlp_hidden=16, max_context=80)


def records(dtype, T=6, n=3):
    m = init_model(CFG.replace(precision="single" if dtype == "f32" else "double"), seed=0, std=0.2)
    prompts = [np.random.default_rng(k).integers(0, 256, T) for k in range(n)]
    return m, prompts, [forward(m, p, keep_values=True) for p in prompts]


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_round_trip_is_bit_exact(tmp_path, dtype):
    _, prompts, recs = records(dtype)
    TI.write_trace(recs, tmp_path / "t", "toy", prompts, dtype)
    tr = TI.read_trace(tmp_path / "t")
    assert tr.manifest.L == 2 and tr.manifest.H == 2 and tr.manifest.d == 8 and tr.manifest.T == 6
    assert tr.manifest.prompt_ids == [p.tolist() for p in prompts]
    for rec, got in zip(recs, tr.tensors):
        for kind in TI.KINDS:
            want = getattr(rec, kind)
            assert got[kind].dtype == want.dtype
            assert got[kind].tobytes() == want.tobytes()


def test_subset_of_kinds_and_empty_trace(tmp_path):
    _, prompts, recs = records("f64")
    TI.write_trace(recs, tmp_path / "a", kinds=("attention",))
    tr = TI.read_trace(tmp_path / "a")
    assert tr.stack("hidden") is None and tr.stack("attention").shape == (3, 2, 2, 6, 6)
    TI.write_trace([], tmp_path / "e")
    assert not (tmp_path / "e" / "data.bin").exists()
    assert TI.read_trace(tmp_path / "e").tensors == []


def test_truncated_blob_names_the_blob(tmp_path):
    _, prompts, recs = records("f32")
    p = TI.write_trace(recs, tmp_path / "t", dtype="f32")
    data = (p / "data.bin").read_bytes()
    (p / "data.bin").write_bytes(data[:-4])
    with pytest.raises(TI.TraceFormatError, match=r"blob\.8 \(values, prompt 2\)"):
        TI.read_trace(p)


def test_bad_manifest_and_shapes(tmp_path):
    with pytest.raises(TI.TraceFormatError):
        TI.read_trace(tmp_path)
    (tmp_path / "manifest.txt").write_text("format = other\n")
    with pytest.raises(TI.TraceFormatError, match="unsupported format"):
        TI.read_trace(tmp_path)
    with pytest.raises(TI.TraceFormatError):
        TI.write_trace([{"attention": np.ones((1, 1, 2, 2)) / 2, "hidden": np.ones((2, 3, 4))}], tmp_path / "x")
    with pytest.raises(TI.TraceFormatError):
        TI.write_trace([], tmp_path / "y", dtype="f16")


def test_trace_metrics_match_direct_metrics(tmp_path):
    m, _, _ = records("f64")
    prompts = [np.random.default_rng(k).integers(0, 256, 70) for k in range(2)]
    p = TI.record_trace(m, prompts, tmp_path / "t")
    tm = TI.trace_metrics(p, epsilon=0.3, window=64)
    att = np.stack([forward(m, q).attention for q in prompts])
    from sinklab.metrics import sink_rate
    np.testing.assert_allclose(tm.sinks.per_head_score, sink_rate(att, 0.3, 64).per_head_score)
    assert len(tm.collapse) == 2 and tm.heatmap_csv().startswith("rank,layer,head,score\n")


def test_trace_metrics_warn_when_skipping(tmp_path):
    _, prompts, recs = records("f64")
    TI.write_trace(recs, tmp_path / "t", kinds=("hidden",))
    with pytest.warns(RuntimeWarning):
        tm = TI.trace_metrics(tmp_path / "t")
    assert tm.sinks is None and len(tm.collapse) == 3


def test_addition_prompt_and_collapse_scan():
    s = TI.addition_prompt(3, seed=1)
    assert s.startswith(TI.ADDITION_PREFIX) and s.count("+") == 2
    m = init_model(CFG, seed=0, std=0.2)
    pts = TI.collapse_scan(m, [2, 4], bins=5)
    assert [p.n_terms for p in pts] == [2, 4]
    csv = TI.collapse_scan_csv(pts)
    assert len(csv.splitlines()) == 3
