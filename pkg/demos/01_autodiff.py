"""
Reverse-mode autodiff on a tape
===============================

Every operation on a ``Tensor`` inside a ``Tape`` is recorded, and ``grad``
walks the record backwards.  The same tape can be asked for many
gradients, which is how whole Jacobians get built.
"""
import numpy as np

from sinklab import numerics as nx
from sinklab.model import ModelConfig, init_model
from sinklab.training import gradient_check

# A scalar first: d(x*x)/dx at 3 is 6.
with nx.Tape() as tape:
    x = nx.Tensor(3.0, requires_grad=True)
    y = x * x
print("d(x^2)/dx at 3:", nx.grad(tape, y, [x])[0])

# Detached nodes pass values through but block gradients.  Here the first
# factor is treated as a constant, so the derivative is x^2 rather than 3x^2.
with nx.Tape() as tape:
    x = nx.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = nx.tsum(nx.detach(x * x) * x)
print("detached gradient:", nx.grad(tape, y, [x])[0])

# One recorded pass, three seeded backward passes: the rows of a Jacobian.
with nx.Tape() as tape:
    x = nx.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = nx.softmax_rows(x)
J = np.array([nx.grad(tape, y, [x], seed=e)[0] for e in np.eye(3)])
p = y.data
print("softmax Jacobian matches diag(p) - p p^T:", np.allclose(J, np.diag(p) - np.outer(p, p)))

# The full training loss of a small double-precision model, checked
# parameter by parameter against central differences.
cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=12, mlp_hidden=16, precision="double", max_context=8)
errors = gradient_check(init_model(cfg, seed=0, std=0.5), np.array([[3, 1, 4, 1, 5]]))
for name, err in sorted(errors.items(), key=lambda kv: -kv[1])[:5]:
    print(f"  {name:20s} relative error {err:.1e}")

# Spectral norms come from power iteration; the SVD agrees.
M = np.random.default_rng(0).standard_normal((5, 3))
print("power iteration:", nx.spectral_norm(M), " svd:", np.linalg.svd(M, compute_uv=False)[0])
