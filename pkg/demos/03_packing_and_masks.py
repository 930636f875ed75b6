"""
Packing documents into contexts
===============================

Training contexts are cut from a stream of concatenated documents.  The
packing regime decides where BOS/EOS go and which positions may attend to
which.
"""
import numpy as np

from sinklab import data as D

docs = [D.tokenize("abc"), D.tokenize("defg"), D.tokenize("h")]
names = {D.BOS: "B", D.EOS: "E", D.PAD: "."}


def show(tokens):
    return " ".join(names.get(int(t), chr(int(t))) for t in tokens)


for name in D.PACKING_REGIMES:
    s = D.regime(name, 8)
    print(f"\n{s.label}")
    for seq in D.pack_sequences(docs, s):
        print("  tokens:", show(seq.tokens))
    seq = next(iter(D.pack_sequences(docs, s)))
    m = D.build_mask(seq.spans, s).allow
    for row in m.astype(int):
        print("   ", "".join("x" if v else "-" for v in row))

# Loss weights skip targets that are BOS or padding but keep EOS, so the
# model still learns where documents end.
toks = next(iter(D.pack_corpus(docs, D.regime("intra-doc+bos", 12)))).tokens
_, targets, w = D.loss_weights(toks)
print("\ninputs :", show(toks[0]))
print("targets:", show(targets[0]))
print("weights:", " ".join(str(int(x)) for x in w[0]))
