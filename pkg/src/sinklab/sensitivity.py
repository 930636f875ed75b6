"""Token-to-token sensitivity: Jacobians, per-layer Lipschitz constants and the path-sum bound.

The bound on ``||d v_j^{(L)} / d v_i^{(0)}||`` is

    C_max^L * (Abar_L @ ... @ Abar_1)[j, i],   Abar_l = sum_h alpha^{(l,h)} + I

i.e. a sum over causal walks ``i -> k_1 -> ... -> j`` of products of
head-summed attention weights, where staying put also earns the residual
term.  It only holds with attention treated as a constant (detached) in a
block without normalisation and with a ReLU MLP.

Per-block constants: with ``a_l = ||Wo^{(l)}|| * max_h ||Wv^{(l,h)}||`` and
``m_l = ||W2^{(l)}|| * ||W1^{(l)}||`` the per-step Jacobian obeys

    ||d v_j^{(l)} / d v_i^{(l-1)}|| <= (m_l + 1) * (a_l * sum_h alpha_ji + delta_ij).

Pulling ``a_l`` out in front of the residual ``delta_ij`` is only valid when
``a_l >= 1``, so the constant used by the bound is
``C_l = (m_l + 1) * max(1, a_l)``.  ``(m_l + 1) * a_l`` is reported too as
``C_literal``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import numerics as nx
from .model import Model, ModelConfig, causal_mask, check_tokens, forward, run_blocks
from .numerics import Tape, Tensor


class ModeError(ValueError):
    pass


class PromptError(ValueError):
    pass


@dataclass
class LipschitzReport:
    mlp_gain: list[float]
    out_norm: list[float]
    head_max_norm: list[float]
    C: list[float]
    C_literal: list[float]

    @property
    def attention_gain(self) -> list[float]:
        return [o * h for o, h in zip(self.out_norm, self.head_max_norm)]

    @property
    def C_max(self) -> float:
        return max(self.C)

    @property
    def C_literal_max(self) -> float:
        return max(self.C_literal)


def lipschitz_constants(model: Model, norm=nx.spectral_norm) -> LipschitzReport:
    """Per-layer constants of a bound-compliant model (ReLU MLP, no normalisation)."""
    if not model.config.bound_compliant:
        raise ModeError("Lipschitz constants need nonlinearity='relu' and normalization='none'")
    mlp, out, head = [], [], []
    for l in range(model.config.n_layers):
        W = model.layer(l)
        mlp.append(norm(W["w2"]) * norm(W["w1"]))
        out.append(norm(W["wo"]))
        head.append(max(norm(w) for w in W["wv"]))
    C = [(m + 1.0) * max(1.0, o * h) for m, o, h in zip(mlp, out, head)]
    C_lit = [(m + 1.0) * (o * h) for m, o, h in zip(mlp, out, head)]
    return LipschitzReport(mlp, out, head, C, C_lit)


def bar_attention(attention, delta: str = "proof") -> np.ndarray:
    """``sum_h alpha^{(l,h)} + I`` per layer (``delta="statement"`` uses ``I / H``)."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError("attention must be (L, H, T, T)")
    H, T = a.shape[1], a.shape[-1]
    if delta == "proof":
        eye = np.eye(T)
    elif delta == "statement":
        eye = np.eye(T) / H
    else:
        raise ValueError("delta must be 'proof' or 'statement'")
    return a.sum(axis=1) + eye


def path_matrix(attention, delta: str = "proof") -> np.ndarray:
    """``Abar_L @ ... @ Abar_1``; entry ``[j, i]`` is the walk sum from ``i`` to ``j``."""
    bars = bar_attention(attention, delta)
    P = np.eye(bars.shape[-1])
    for B in bars:
        P = B @ P
    return P


def oversquashing_bound(attention, C_max: float, i: int, j: int, delta: str = "proof") -> float:
    """``C_max^L`` times the weighted walk sum from token ``i`` to token ``j``.

    Returns 0 for ``i > j``: no causal walk exists.
    """
    if i > j:
        return 0.0
    a = np.asarray(attention)
    L = a.shape[0]
    return float(C_max ** L * path_matrix(a, delta)[j, i])


def bound_matrix(attention, C_max: float, delta: str = "proof") -> np.ndarray:
    """All ``(j, i)`` bounds at once, zero above the diagonal."""
    a = np.asarray(attention)
    return np.tril(C_max ** a.shape[0] * path_matrix(a, delta))


# --------------------------------------------------------------------------
# Jacobians

def _as_double(model: Model) -> Model:
    return model if model.config.precision == "double" else model.astype("double")


def _embedded(model: Model, tokens) -> np.ndarray:
    tokens = check_tokens(model, tokens)
    if tokens.ndim != 1:
        raise ValueError("jacobians are per sequence; pass a 1-D token array")
    return model.params["embed"][tokens].astype(np.float64)


def jacobian_blocks(model: Model, x0: np.ndarray, j: int, mask=None, detach_attention: bool = True) -> np.ndarray:
    """``J[i] = d v_j^{(L)} / d v_i^{(0)}`` for every ``i``; shape ``(T, d, d)``.

    Built row by row with reverse-mode passes over one recorded forward.
    Rows index output coordinates, columns input coordinates.
    """
    model = _as_double(model)
    T, d = x0.shape
    with Tape() as tape:
        x = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
        hidden, _, _ = run_blocks(model, x, mask, detach_attention=detach_attention)
        out = hidden[-1]
    J = np.zeros((T, d, d))
    for k in range(d):
        seed = np.zeros((T, d))
        seed[j, k] = 1.0
        (g,) = nx.grad(tape, out, [x], seed=seed)
        J[:, k, :] = g
    return J


def _final_hidden(model: Model, x0: np.ndarray, mask, override) -> np.ndarray:
    hidden, _, _ = run_blocks(model, Tensor(x0), mask, override_attention=override)
    return hidden[-1].data


def jacobian_fd(model: Model, x0: np.ndarray, i: int, j: int, mask=None, detach_attention: bool = True,
                step: float = 1e-5) -> np.ndarray:
    """Central-difference ``d v_j^{(L)} / d v_i^{(0)}``.

    With ``detach_attention`` the attention maps of the unperturbed pass
    are held fixed while the embedding is perturbed.
    """
    model = _as_double(model)
    x0 = np.array(x0, dtype=np.float64)
    override = None
    if detach_attention:
        _, alphas, _ = run_blocks(model, Tensor(x0), mask)
        override = [a.data for a in alphas]
    d = x0.shape[1]
    J = np.zeros((d, d))
    for m in range(d):
        h = step * max(1.0, abs(x0[i, m]))
        xp, xm = x0.copy(), x0.copy()
        xp[i, m] += h
        xm[i, m] -= h
        J[:, m] = (_final_hidden(model, xp, mask, override)[j] - _final_hidden(model, xm, mask, override)[j]) / (2 * h)
    return J


def jacobian_norm(model: Model, tokens, i: int, j: int, mode: str = "exact", detach_attention: bool = True,
                  mask=None) -> float:
    """Spectral norm of ``d v_j^{(L)} / d v_i^{(0)}`` for one token sequence."""
    x0 = _embedded(model, tokens)
    if mode == "exact":
        J = jacobian_blocks(model, x0, j, mask, detach_attention)[i]
    elif mode == "finite-difference":
        J = jacobian_fd(model, x0, i, j, mask, detach_attention)
    else:
        raise ValueError("mode must be 'exact' or 'finite-difference'")
    return nx.spectral_norm(J)


@dataclass
class SensitivityReport:
    jacobian_norm: float
    bound: float
    per_layer_C: list[float]
    i: int
    j: int
    mode: str = "exact"
    attention_detached: bool = True

    @property
    def ratio(self) -> float:
        return self.jacobian_norm / self.bound if self.bound > 0 else (0.0 if self.jacobian_norm == 0 else np.inf)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "mode", "attention_detached", "jacobian_norm", "bound", "ratio"])
        w.writerow([self.i, self.j, self.mode, int(self.attention_detached), repr(self.jacobian_norm),
                    repr(self.bound), repr(self.ratio)])
        w.writerow(["layer", "C"])
        for l, c in enumerate(self.per_layer_C):
            w.writerow([l, repr(c)])
        return buf.getvalue()


def sensitivity_report(model: Model, tokens, i: int, j: int, mode: str = "exact", delta: str = "proof",
                       mask=None) -> SensitivityReport:
    lip = lipschitz_constants(model)
    rec = forward(_as_double(model), tokens, mask)
    J = jacobian_norm(model, tokens, i, j, mode, True, mask)
    return SensitivityReport(J, oversquashing_bound(rec.attention, lip.C_max, i, j, delta), lip.C, i, j, mode, True)


def all_pair_norms(model: Model, tokens, mask=None, detach_attention: bool = True) -> np.ndarray:
    """``N[j, i] = ||d v_j^{(L)} / d v_i^{(0)}||`` for all pairs (spectral)."""
    x0 = _embedded(model, tokens)
    T = x0.shape[0]
    N = np.zeros((T, T))
    for j in range(T):
        J = jacobian_blocks(model, x0, j, mask, detach_attention)
        for i in range(T):
            N[j, i] = nx.spectral_norm(J[i]) if J[i].any() else 0.0
    return N


def random_bound_model(rng: np.random.Generator, L: int, H: int, d: int, vocab: int = 32,
                       mlp_hidden: int | None = None) -> Model:
    """Bound-compliant double-precision model with random weight scales.

    Gains are drawn on both sides of 1 so both regimes of the constant get exercised.
    """
    cfg = ModelConfig.bound_compliant_config(n_layers=L, n_heads=H, d_model=d, vocab_size=vocab,
                                             mlp_hidden=mlp_hidden or 2 * d)
    from .model import param_shapes
    params = {}
    for name, shape in param_shapes(cfg).items():
        scale = float(np.exp(rng.uniform(np.log(0.3), np.log(2.0))))
        fan_in = shape[-2] if len(shape) >= 2 else 1
        params[name] = rng.normal(0.0, scale / np.sqrt(fan_in), shape)
        if name.endswith(("wq", "wk")):
            params[name] *= rng.uniform(0.5, 4.0)
    params["embed"] = rng.normal(0.0, 1.0, (vocab, d))
    return Model(cfg, params)


@dataclass
class BoundCheck:
    n_models: int
    n_pairs: int
    max_ratio: float
    violations: int
    worst: tuple = ()


def bound_check(n_models: int = 100, seed: int = 7, max_L: int = 3, max_H: int = 4, max_T: int = 8,
                max_d: int = 8, slack: float = 1e-9, delta: str = "proof") -> BoundCheck:
    """Compare detached Jacobian norms with the bound on random bound-compliant models."""
    rng = np.random.default_rng(seed)
    worst_ratio, worst, pairs, bad = 0.0, (), 0, 0
    for n in range(n_models):
        L, H = int(rng.integers(1, max_L + 1)), int(rng.integers(1, max_H + 1))
        T, d = int(rng.integers(1, max_T + 1)), int(rng.integers(1, max_d + 1))
        model = random_bound_model(rng, L, H, d)
        tokens = rng.integers(0, model.config.vocab_size, T)
        C = lipschitz_constants(model).C_max
        rec = forward(model, tokens)
        B = bound_matrix(rec.attention, C, delta)
        N = all_pair_norms(model, tokens)
        for j in range(T):
            for i in range(j + 1):
                pairs += 1
                r = N[j, i] / B[j, i] if B[j, i] > 0 else (np.inf if N[j, i] > 0 else 0.0)
                if N[j, i] > B[j, i] * (1 + slack):
                    bad += 1
                if r > worst_ratio:
                    worst_ratio, worst = r, (n, L, H, T, d, i, j)
    return BoundCheck(n_models, pairs, worst_ratio, bad, worst)


def redistribute_sink(attention) -> np.ndarray:
    """Move each causal row's position-0 mass uniformly onto positions ``1..row``.

    Row 0 is left untouched (it can only attend to itself).
    """
    a = np.array(attention, dtype=np.float64)
    T = a.shape[-1]
    for r in range(1, T):
        mass = a[..., r, 0].copy()
        a[..., r, 0] = 0.0
        a[..., r, 1:r + 1] += mass[..., None] / r
    return a


# --------------------------------------------------------------------------
# perturbations and value norms

@dataclass
class PerturbationMap:
    distances: np.ndarray
    perturbed_index: int
    with_bos: bool

    def mean_after(self, layer: int = -1) -> float:
        """Mean distance over tokens strictly after the perturbed position."""
        row = self.distances[layer, self.perturbed_index + 1:]
        return float(row.mean()) if row.size else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "token", "distance"])
        for l in range(self.distances.shape[0]):
            for t in range(self.distances.shape[1]):
                w.writerow([l, t, repr(float(self.distances[l, t]))])
        return buf.getvalue()


def perturb_propagation(model: Model, tokens, tokens_perturbed, mask=None) -> PerturbationMap:
    """Per-layer, per-token distance between two runs differing in one token."""
    a, b = np.asarray(tokens), np.asarray(tokens_perturbed)
    if a.shape != b.shape or a.ndim != 1:
        raise PromptError("prompts must be 1-D and of equal length")
    diff = np.nonzero(a != b)[0]
    if len(diff) > 1:
        raise PromptError(f"prompts differ at {len(diff)} positions; expected at most one")
    ra, rb = forward(model, a, mask), forward(model, b, mask)
    dist = np.linalg.norm(ra.hidden.astype(np.float64) - rb.hidden.astype(np.float64), axis=-1)
    idx = int(diff[0]) if len(diff) else -1
    return PerturbationMap(dist, idx, bool(a[0] == D.BOS))


def head_value_norms(record, layer: int, head: int) -> np.ndarray:
    """L2 norms of the per-head value vectors ``v_j @ Wv^{(l,h)}``."""
    if record.values is None:
        raise ValueError("record has no values; run forward(..., keep_values=True)")
    return np.linalg.norm(np.asarray(record.values[layer, head], dtype=np.float64), axis=-1)
