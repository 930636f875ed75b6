"""Sink and collapse diagnostics.

All norms are Euclidean.  ``head_sink_score`` reads the attention paid *to*
position 0, averaged over query rows: ``(1/T) * sum_j alpha[j, 0]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class MetricInputError(ValueError):
    pass


class WindowError(ValueError):
    pass


@dataclass
class SinkReport:
    per_head_score: np.ndarray
    sink_rate: float
    epsilon: float
    window: int
    n_prompts: int = 1

    @property
    def n_layers(self) -> int:
        return self.per_head_score.shape[0]

    @property
    def n_heads(self) -> int:
        return self.per_head_score.shape[1]

    def sunk(self) -> np.ndarray:
        return self.per_head_score > self.epsilon

    def to_csv(self) -> str:
        """``layer,head,score,sunk`` rows followed by summary rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "score", "sunk"])
        for l in range(self.n_layers):
            for h in range(self.n_heads):
                s = float(self.per_head_score[l, h])
                w.writerow([l, h, repr(s), int(s > self.epsilon)])
        w.writerow(["summary", "sink_rate", repr(float(self.sink_rate)), ""])
        w.writerow(["summary", "epsilon", repr(float(self.epsilon)), ""])
        w.writerow(["summary", "window", self.window, ""])
        w.writerow(["summary", "n_prompts", self.n_prompts, ""])
        return buf.getvalue()

    def sorted_heads(self) -> list[tuple[int, int, float]]:
        """(layer, head, score) ascending by score; ties keep layer-then-head order."""
        items = [(l, h, float(self.per_head_score[l, h]))
                 for l in range(self.n_layers) for h in range(self.n_heads)]
        return sorted(items, key=lambda t: t[2])


@dataclass
class CollapseReport:
    mu: float
    rep_distance: float
    layer: int
    norms: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _check_stochastic(attention: np.ndarray, tol: float = 1e-6, rows: int | None = None) -> None:
    if attention.ndim < 2 or attention.shape[-1] != attention.shape[-2]:
        raise MetricInputError(f"attention must be square in its last two axes, got {attention.shape}")
    if rows is not None:
        attention = attention[..., :rows, :]
    rows = attention.sum(axis=-1)
    if not np.all(np.abs(rows - 1.0) <= tol):
        raise MetricInputError("attention rows are not stochastic")
    if np.any(attention < -tol):
        raise MetricInputError("negative attention weight")


def head_sink_score(attention, window: int | None = None) -> float:
    """Mean attention to position 0 over the first ``window`` query rows."""
    a = np.asarray(attention, dtype=np.float64)
    _check_stochastic(a)
    T = a.shape[-1] if window is None else window
    if T > a.shape[-1]:
        raise WindowError(f"window {T} exceeds sequence length {a.shape[-1]}")
    return float(a[:T, 0].sum() / T)


def head_scores(attention, window: int) -> np.ndarray:
    """Per-head scores for a ``(L, H, T, T)`` tensor (or a leading prompt axis)."""
    a = np.asarray(attention, dtype=np.float64)
    T = a.shape[-1]
    if window > T:
        raise WindowError(f"window {window} exceeds sequence length {T}")
    if window < 1:
        raise WindowError("window must be >= 1")
    _check_stochastic(a, rows=window)
    return a[..., :window, 0].sum(axis=-1) / window


def sink_rate(attention, epsilon: float = 0.3, window: int = 64) -> SinkReport:
    """Fraction of heads whose mean attention to position 0 exceeds ``epsilon``.

    ``attention`` is ``(L, H, T, T)``, or ``(P, L, H, T, T)`` for ``P``
    prompts, in which case per-head scores are averaged over prompts before
    thresholding.  Only the first ``window`` query rows count; no
    renormalisation is applied.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    a = np.asarray(attention)
    if a.ndim not in (4, 5):
        raise MetricInputError(f"expected (L,H,T,T) or (P,L,H,T,T), got shape {a.shape}")
    scores = head_scores(a, window)
    n_prompts = 1
    if a.ndim == 5:
        n_prompts = a.shape[0]
        scores = scores.mean(axis=0)
    return report_from_scores(scores, epsilon, window, n_prompts)


def report_from_scores(scores: np.ndarray, epsilon: float, window: int, n_prompts: int = 1) -> SinkReport:
    scores = np.asarray(scores, dtype=np.float64)
    return SinkReport(scores, float(np.mean(scores > epsilon)), epsilon, window, n_prompts)


def sink_rate_multi(attentions, epsilon: float = 0.3, window: int = 64) -> SinkReport:
    """Like :func:`sink_rate` for prompts of differing length (each ``(L,H,T_p,T_p)``)."""
    attentions = list(attentions)
    if not attentions:
        raise MetricInputError("no prompts")
    scores = np.mean([head_scores(a, window) for a in attentions], axis=0)
    return report_from_scores(scores, epsilon, window, len(attentions))


def rank_collapse_distance(V) -> float:
    """Frobenius distance of ``V`` from its row-mean matrix."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 1:
        raise MetricInputError("V must be a non-empty matrix")
    return float(np.linalg.norm(V - V.mean(axis=0, keepdims=True)))


def rep_collapse_distance(V) -> float:
    """Distance between the last two rows of ``V``."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2:
        raise MetricInputError("need at least two rows")
    return float(np.linalg.norm(V[-1] - V[-2]))


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray


def token_norm_histogram(V, bins: int = 20) -> Histogram:
    """Counts of per-row L2 norms over equal-width bins spanning [min, max]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    norms = np.linalg.norm(np.asarray(V, dtype=np.float64), axis=-1).reshape(-1)
    counts, edges = np.histogram(norms, bins=bins, range=(norms.min(), norms.max()) if norms.size else None)
    return Histogram(counts, edges)


def collapse_report(hidden, layer: int = -1) -> CollapseReport:
    """Collapse metrics for ``hidden[layer]`` where ``hidden`` is ``(L+1, T, d)``."""
    h = np.asarray(hidden)
    V = h[layer]
    n = h.shape[0]
    return CollapseReport(
        mu=rank_collapse_distance(V),
        rep_distance=rep_collapse_distance(V) if V.shape[0] >= 2 else 0.0,
        layer=layer % n,
        norms=np.linalg.norm(V, axis=-1),
    )
