"""
Training a byte-level model and probing it
==========================================

A short run on a slice of the Python standard library, followed by the
with/without-BOS evaluation and a single-token perturbation.  Real
experiments use the ``sinklab`` command with much longer budgets; this is
sized to finish in about a minute.
"""
import numpy as np

from sinklab import data as D
from sinklab import sensitivity as S
from sinklab import training as Tr
from sinklab.model import ModelConfig

files = D.stdlib_corpus_files()[:40]
docs = D.load_text_corpus(files)
train_docs, valid_docs = D.train_valid_split(docs, 0.05, seed=0)
print(f"{len(train_docs)} training documents, {sum(map(len, train_docs))} bytes")

cfg = Tr.TrainConfig(
    model=ModelConfig(n_layers=2, n_heads=4, d_model=32, mlp_hidden=128, max_context=64),
    strategy=D.regime("causal+fixed-bos", 64),
    tokens_per_step=2048, total_tokens=2048 * 60, peak_lr=2e-3, eval_every=20, eval_sequences=16,
)
art = Tr.train(cfg, train_docs, None, valid_docs)
print(art.timeseries_csv())

texts = Tr.eval_texts(valid_docs, cfg)
for variant in ("bos+text", "text"):
    loss, rep = Tr.evaluate(art.model, texts, cfg.strategy, variant, cfg.window)
    print(f"{variant:9s} loss {loss:.3f}  sink rate {rep.sink_rate:.3f}  max score {rep.per_head_score.max():.3f}")

# Flip one byte and watch the difference travel through the layers.
ids = D.tokenize("def add(a, b):\n    return a + b\n")
alt = list(ids)
alt[8] = ord("c")
for lead, label in (([D.BOS], "with BOS"), ([], "without BOS")):
    pm = S.perturb_propagation(art.model, np.array(lead + ids), np.array(lead + alt))
    print(f"{label:12s} mean final-layer change after the flip: {pm.mean_after():.4f}")
