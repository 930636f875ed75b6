"""
Portable traces
===============

Activations from any model can be stored as a manifest plus a raw float
blob and analysed later, here or by another tool.
"""
from pathlib import Path

import numpy as np

from sinklab import data as D
from sinklab import traceio as TI
from sinklab.cli import TINY_CHECKPOINT
from sinklab.model import load_checkpoint

out = Path("demo-out")
model = load_checkpoint(TINY_CHECKPOINT)
text = D.tokenize("for index, line in enumerate(lines):\n    if not line.strip():\n        continue\n")[:70]
prompts = [np.array([D.BOS] + text[:69])]
path = TI.record_trace(model, prompts, out / "trace", name="tiny", dtype="f32")
print((path / "manifest.txt").read_text())

trace = TI.read_trace(path)
print("attention blob shape:", trace.tensors[0]["attention"].shape)
tm = TI.trace_metrics(trace, epsilon=0.3, window=64)
print("sink rate:", tm.sinks.sink_rate)
print(tm.heatmap_csv())
print(tm.collapse_csv())
