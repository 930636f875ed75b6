"""
Measuring attention sinks
=========================

A head's sink score is its mean attention to position 0 over the first
``window`` query rows.  The sink rate is the share of heads whose score
exceeds ``epsilon``.
"""
from pathlib import Path

import numpy as np

from sinklab import metrics as M
from sinklab import svg

out = Path("demo-out")
out.mkdir(exist_ok=True)
T = 64

# Uniform causal attention already favours position 0 a little, because
# early rows have few keys to choose from: the score is H_64 / 64.
uniform = np.tril(np.ones((T, T)))
uniform /= uniform.sum(1, keepdims=True)
print("uniform head:", M.head_sink_score(uniform, T))

# A head that parks everything on the first token scores exactly 1.
parked = np.zeros((T, T))
parked[:, 0] = 1.0
print("parked head:", M.head_sink_score(parked, T))

# Mix the two in a 3-layer, 4-head stack with growing sink strength.
mix = np.linspace(0, 1, 12).reshape(3, 4)
att = mix[..., None, None] * parked + (1 - mix[..., None, None]) * uniform
rep = M.sink_rate(att, epsilon=0.3, window=T)
print("per-head scores:\n", rep.per_head_score.round(3))
print("sink rate at epsilon 0.3:", rep.sink_rate)

# The rate can only fall as the threshold rises.
for eps in (0.1, 0.3, 0.5, 0.7, 0.9):
    print(f"  epsilon {eps}: {M.sink_rate(att, eps, T).sink_rate:.3f}")

(out / "sinks.csv").write_text(rep.to_csv())
svg.heatmap(rep.per_head_score, out / "sinks.svg", "sink score per head", "head", "layer", cell=24, vmin=0, vmax=1)
print("wrote", out / "sinks.csv", "and", out / "sinks.svg")
