"""
Sensitivity and the path-sum bound
==================================

For a model with ReLU MLPs, no normalisation and attention held fixed,
the Jacobian of output token j with respect to input token i is bounded by
C_max^L times a sum over walks from i to j through the attention graphs.
"""
import numpy as np

from sinklab import sensitivity as S
from sinklab.model import ModelConfig, forward, zero_model

rng = np.random.default_rng(0)
model = S.random_bound_model(rng, L=2, H=2, d=6)
tokens = rng.integers(0, model.config.vocab_size, 6)

lip = S.lipschitz_constants(model)
print("per-layer C:", np.round(lip.C, 3), " C_max:", round(lip.C_max, 3))

rec = forward(model, tokens)
N = S.all_pair_norms(model, tokens)
B = S.bound_matrix(rec.attention, lip.C_max)
print("Jacobian norms (row j, column i):\n", N.round(3))
print("bounds:\n", B.round(2))
print("every pair within its bound:", bool(np.all(N <= B * (1 + 1e-9))))

# Exact reverse-mode Jacobians agree with finite differences.
print("exact vs finite difference for (i=1, j=5):",
      S.jacobian_norm(model, tokens, 1, 5), S.jacobian_norm(model, tokens, 1, 5, mode="finite-difference"))

# Why the constant carries a max(1, .) floor: with every weight at zero the
# blocks are identities, so the Jacobian is I while the bare product of
# weight norms is 0.
cfg = ModelConfig.bound_compliant_config(n_layers=1, n_heads=1, d_model=3, vocab_size=4, mlp_hidden=4)
z = zero_model(cfg)
z.params["embed"] = rng.standard_normal((4, 3))
zl = S.lipschitz_constants(z)
print("zero weights: literal C", zl.C_literal, "floored C", zl.C, "Jacobian norm", S.jacobian_norm(z, [0, 1], 1, 1))

# Moving attention off position 0 spreads walks across tokens, so the path
# sums to the last token grow more uniform.
moved = S.redistribute_sink(rec.attention)
print("walk sums into the last token, original:", S.path_matrix(rec.attention)[-1].round(3))
print("after moving position-0 mass          :", S.path_matrix(moved)[-1].round(3))
