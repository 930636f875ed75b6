"""
Rank and representational collapse
===================================

Rank collapse measures how far token representations sit from their
mean; representational collapse measures how close the last two tokens
get.  The second is never more than twice the first.
"""
import numpy as np

from sinklab import metrics as M
from sinklab import traceio as TI
from sinklab.cli import TINY_CHECKPOINT
from sinklab.model import load_checkpoint

rng = np.random.default_rng(0)
V = rng.standard_normal((10, 4))
print("mu:", M.rank_collapse_distance(V), " last-two distance:", M.rep_collapse_distance(V))

# Averaging rows repeatedly (what attention does) drives both to zero.
A = np.tril(np.ones((10, 10)))
A /= A.sum(1, keepdims=True)
for step in range(4):
    print(f"  after {step} mixing steps: mu {M.rank_collapse_distance(V):.4f}, rep {M.rep_collapse_distance(V):.4f}")
    V = A @ V

# On the bundled checkpoint: addition prompts of growing length, with and
# without a leading BOS token.
model = load_checkpoint(TINY_CHECKPOINT)
points = TI.collapse_scan(model, [5, 20, 40])
print(TI.collapse_scan_csv(points))
