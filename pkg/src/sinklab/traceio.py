"""Portable activation traces and the metrics that run on them.

A trace is a directory::

    manifest.txt   key = value lines (see ``write_trace``)
    data.bin       raw little-endian IEEE-754 blobs, row-major, back to back

Layouts: attention ``[layer][head][query][key]``, hidden ``[layer][token][dim]``
(``L + 1`` states, embedding first), values ``[layer][head][token][dim]``.
Any program that can read text and raw floats can consume it; the recipe
for dumping traces from other runtimes is in ``docs/trace_format.md``.
"""
from __future__ import annotations

import csv
import io
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from . import metrics as M
from .model import ForwardRecord, Model, forward, read_manifest

KINDS = ("attention", "hidden", "values")
FORMAT = "sinklab-trace-1"


class TraceFormatError(ValueError):
    pass


@dataclass
class BlobRef:
    prompt: int
    kind: str
    layer_start: int
    layer_end: int
    offset: int
    nbytes: int


@dataclass
class TraceManifest:
    model: str
    L: int
    H: int
    T: int
    d: int
    dtype: str
    prompt_ids: list[list[int]] = field(default_factory=list)
    blobs: list[BlobRef] = field(default_factory=list)

    def shape_of(self, kind: str, layers: int) -> tuple[int, ...]:
        if kind == "attention":
            return (layers, self.H, self.T, self.T)
        if kind == "hidden":
            return (layers, self.T, self.d)
        if kind == "values":
            return (layers, self.H, self.T, self.d)
        raise TraceFormatError(f"unknown tensor kind {kind!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype("<f4" if self.dtype == "f32" else "<f8")


@dataclass
class Trace:
    manifest: TraceManifest
    tensors: list[dict[str, np.ndarray]]

    def stack(self, kind: str) -> np.ndarray | None:
        if not self.tensors or any(kind not in t for t in self.tensors):
            return None
        return np.stack([t[kind] for t in self.tensors])


def write_trace(records: Sequence[ForwardRecord | dict], path, model: str = "unknown",
                prompt_ids: Sequence[Sequence[int]] | None = None, dtype: str = "f64",
                kinds: Sequence[str] = KINDS) -> Path:
    """Write one entry per prompt; each record contributes every available kind in ``kinds``."""
    if dtype not in ("f32", "f64"):
        raise TraceFormatError("dtype must be 'f32' or 'f64'")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    npdt = np.dtype("<f4" if dtype == "f32" else "<f8")
    per_prompt = []
    for r in records:
        d = r if isinstance(r, dict) else {"attention": r.attention, "hidden": r.hidden, "values": r.values}
        per_prompt.append({k: np.asarray(v) for k, v in d.items() if v is not None and k in kinds})
    L = H = T = dm = 0
    for t in per_prompt:
        if "attention" in t:
            L, H, T = t["attention"].shape[0], t["attention"].shape[1], t["attention"].shape[2]
        if "hidden" in t:
            L, T, dm = t["hidden"].shape[0] - 1, t["hidden"].shape[1], t["hidden"].shape[2]
        if "values" in t:
            H, dm = t["values"].shape[1], t["values"].shape[3]
    man = TraceManifest(model, L, H, T, dm, dtype, [list(map(int, p)) for p in (prompt_ids or [])])
    chunks, off = [], 0
    for p, t in enumerate(per_prompt):
        for kind in KINDS:
            if kind not in t:
                continue
            arr = t[kind]
            n_layers = arr.shape[0]
            want = man.shape_of(kind, n_layers)
            if arr.shape != want:
                raise TraceFormatError(f"prompt {p} {kind}: shape {arr.shape} != {want}")
            raw = np.ascontiguousarray(arr, dtype=npdt).tobytes()
            man.blobs.append(BlobRef(p, kind, 0, n_layers, off, len(raw)))
            chunks.append(raw)
            off += len(raw)
    lines = [f"format = {FORMAT}", f"model = {man.model}", f"L = {man.L}", f"H = {man.H}", f"T = {man.T}",
             f"d = {man.d}", f"dtype = {man.dtype}", "endianness = little", "order = row-major",
             f"n_prompts = {len(per_prompt)}"]
    for k, ids in enumerate(man.prompt_ids):
        lines.append(f"prompt.{k}.ids = {','.join(map(str, ids))}")
    for n, b in enumerate(man.blobs):
        lines.append(f"blob.{n} = {b.prompt} {b.kind} {b.layer_start} {b.layer_end} {b.offset} {b.nbytes}")
    if chunks:
        (path / "data.bin").write_bytes(b"".join(chunks))
    elif (path / "data.bin").exists():
        (path / "data.bin").unlink()
    tmp = path / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / "manifest.txt")
    return path


def read_trace(path) -> Trace:
    path = Path(path)
    try:
        raw = read_manifest(path / "manifest.txt")
    except FileNotFoundError:
        raise TraceFormatError(f"{path}: no manifest.txt") from None
    if raw.get("format") != FORMAT:
        raise TraceFormatError(f"{path}: unsupported format {raw.get('format')!r}")
    if raw.get("endianness", "little") != "little":
        raise TraceFormatError("only little-endian traces are supported")
    dtype = raw["dtype"]
    if dtype not in ("f32", "f64"):
        raise TraceFormatError(f"bad dtype {dtype!r}")
    man = TraceManifest(raw.get("model", "unknown"), int(raw["L"]), int(raw["H"]), int(raw["T"]), int(raw["d"]), dtype)
    n_prompts = int(raw.get("n_prompts", 0))
    for k in range(n_prompts):
        ids = raw.get(f"prompt.{k}.ids")
        if ids is not None:
            man.prompt_ids.append([int(x) for x in ids.split(",")] if ids else [])
    n = 0
    while f"blob.{n}" in raw:
        p, kind, l0, l1, off, nb = raw[f"blob.{n}"].split()
        man.blobs.append(BlobRef(int(p), kind, int(l0), int(l1), int(off), int(nb)))
        n += 1
    data = (path / "data.bin").read_bytes() if man.blobs else b""
    tensors: list[dict[str, np.ndarray]] = [{} for _ in range(n_prompts)]
    item = man.np_dtype.itemsize
    for n, b in enumerate(man.blobs):
        shape = man.shape_of(b.kind, b.layer_end - b.layer_start)
        want = int(np.prod(shape)) * item
        if b.nbytes != want:
            raise TraceFormatError(f"blob.{n} ({b.kind}, prompt {b.prompt}): {b.nbytes} bytes declared, "
                                   f"shape {shape} needs {want}")
        if b.offset + b.nbytes > len(data):
            raise TraceFormatError(f"blob.{n} ({b.kind}, prompt {b.prompt}) runs past the end of data.bin")
        if not 0 <= b.prompt < n_prompts:
            raise TraceFormatError(f"blob.{n} refers to prompt {b.prompt} of {n_prompts}")
        arr = np.frombuffer(data, dtype=man.np_dtype, count=int(np.prod(shape)), offset=b.offset).reshape(shape)
        tensors[b.prompt][b.kind] = arr.astype(man.np_dtype.newbyteorder("="))
    return Trace(man, tensors)


def record_trace(model: Model, prompts: Sequence[Sequence[int]], path, name: str = "sinklab", dtype: str = "f64",
                 kinds: Sequence[str] = KINDS) -> Path:
    """Run ``model`` on equal-length prompts and dump a trace."""
    recs = [forward(model, np.asarray(p), keep_values="values" in kinds) for p in prompts]
    return write_trace(recs, path, name, prompts, dtype, kinds)


# --------------------------------------------------------------------------
# metrics over traces

@dataclass
class TraceMetrics:
    sinks: M.SinkReport | None
    per_prompt_sinks: list[M.SinkReport]
    collapse: list[M.CollapseReport]
    skipped: list[str]

    def heatmap_csv(self) -> str:
        """Heads sorted ascending by score (stable: ties by layer then head)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "layer", "head", "score"])
        if self.sinks is not None:
            for r, (l, h, s) in enumerate(self.sinks.sorted_heads()):
                w.writerow([r, l, h, repr(s)])
        return buf.getvalue()

    def collapse_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["prompt", "layer", "mu", "rep_distance"])
        for p, c in enumerate(self.collapse):
            w.writerow([p, c.layer, repr(c.mu), repr(c.rep_distance)])
        return buf.getvalue()


def trace_metrics(path_or_trace, epsilon: float = 0.3, window: int = 64) -> TraceMetrics:
    """Sink report (scores averaged over prompts) and final-layer collapse per prompt."""
    tr = path_or_trace if isinstance(path_or_trace, Trace) else read_trace(path_or_trace)
    skipped = []
    att = tr.stack("attention")
    sinks, per = None, []
    if att is None:
        skipped.append("sinks: trace has no attention tensors")
    elif tr.manifest.T < window:
        skipped.append(f"sinks: prompts shorter than window {window}")
    else:
        sinks = M.sink_rate(att, epsilon, window)
        per = [M.sink_rate(a, epsilon, window) for a in att]
    hid = tr.stack("hidden")
    coll = []
    if hid is None:
        skipped.append("collapse: trace has no hidden tensors")
    elif tr.manifest.T < 2:
        skipped.append("collapse: prompts need at least two tokens")
    else:
        coll = [M.collapse_report(h) for h in hid]
    for s in skipped:
        warnings.warn(s, RuntimeWarning, stacklevel=2)
    return TraceMetrics(sinks, per, coll, skipped)


# --------------------------------------------------------------------------
# collapse scans

ADDITION_PREFIX = "Could you add these numbers "


def addition_prompt(n_terms: int, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    return ADDITION_PREFIX + "+".join(f"{x:02d}" for x in rng.integers(0, 100, n_terms))


@dataclass
class ScanPoint:
    n_terms: int
    with_bos: M.CollapseReport
    without_bos: M.CollapseReport
    hist_with: M.Histogram
    hist_without: M.Histogram
    truncated: bool = False


def collapse_scan(model: Model, lengths: Sequence[int], template=addition_prompt, bins: int = 20,
                  seed: int = 0, use_bos: bool = True) -> list[ScanPoint]:
    """Final-layer collapse for progressively longer prompts, with and without a leading BOS.

    ``template(n, seed)`` builds the prompt text for ``n`` terms.  Metrics are
    computed over the prompt's own tokens only, so both arms see matrices of
    the same size.  ``use_bos=False`` runs the "with" arm without a BOS too
    (for models never trained with one).
    """
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be ascending")
    cap = model.config.max_context
    out = []
    for n in lengths:
        ids = D.tokenize(template(n, seed))
        truncated = len(ids) + 1 > cap
        if truncated:
            warnings.warn(f"{n}-term prompt truncated to context capacity {cap}", RuntimeWarning, stacklevel=2)
            ids = ids[: cap - 1]
        plain = np.array(ids)
        lead = np.array(([D.BOS] if use_bos else []) + ids)
        off = 1 if use_bos else 0
        hw = forward(model, lead).hidden[-1][off:]
        hn = forward(model, plain).hidden[-1]
        cw = M.CollapseReport(M.rank_collapse_distance(hw), M.rep_collapse_distance(hw), model.config.n_layers,
                              np.linalg.norm(hw, axis=-1))
        cn = M.CollapseReport(M.rank_collapse_distance(hn), M.rep_collapse_distance(hn), model.config.n_layers,
                              np.linalg.norm(hn, axis=-1))
        out.append(ScanPoint(n, cw, cn, M.token_norm_histogram(hw, bins), M.token_norm_histogram(hn, bins), truncated))
    return out


def collapse_scan_trace(trace_with: Trace, trace_without: Trace, bins: int = 20) -> list[ScanPoint]:
    """Collapse scan over externally dumped hidden states (one prompt per length).

    The with-BOS trace's first row is dropped so both arms compare the same tokens.
    """
    hw_all, hn_all = trace_with.stack("hidden"), trace_without.stack("hidden")
    if hw_all is None or hn_all is None:
        raise TraceFormatError("collapse scan needs hidden tensors in both traces")
    out = []
    for hw, hn in zip(hw_all, hn_all):
        a, b = hw[-1][1:], hn[-1]
        out.append(ScanPoint(b.shape[0],
                             M.CollapseReport(M.rank_collapse_distance(a), M.rep_collapse_distance(a), hw.shape[0] - 1,
                                              np.linalg.norm(a, axis=-1)),
                             M.CollapseReport(M.rank_collapse_distance(b), M.rep_collapse_distance(b), hn.shape[0] - 1,
                                              np.linalg.norm(b, axis=-1)),
                             M.token_norm_histogram(a, bins), M.token_norm_histogram(b, bins)))
    return out


def collapse_scan_csv(points: Sequence[ScanPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_terms", "mu_with_bos", "mu_without_bos", "rep_with_bos", "rep_without_bos", "truncated"])
    for p in points:
        w.writerow([p.n_terms, repr(p.with_bos.mu), repr(p.without_bos.mu), repr(p.with_bos.rep_distance),
                    repr(p.without_bos.rep_distance), int(p.truncated)])
    return buf.getvalue()
