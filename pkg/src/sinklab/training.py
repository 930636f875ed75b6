"""Desk-scale pre-training with sink-rate tracking.

The reference path is single-threaded numpy and bitwise reproducible for a
given config and seed.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from . import metrics as M
from . import numerics as nx
from .model import ConfigError, Model, ModelConfig, init_model, logits_from_hidden, run_blocks, save_checkpoint
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)

INFERENCE_VARIANTS = ("bos+text", "text", "eos*+text")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, artifacts: "RunArtifacts"):
        super().__init__(msg)
        self.artifacts = artifacts


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: D.PackingStrategy = field(default_factory=D.PackingStrategy)
    tokens_per_step: int = 4096
    total_tokens: int = 4096 * 100
    peak_lr: float = 3e-4
    warmup_frac: float = 0.02
    final_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    init_std: float = 0.02
    seed: int = 0
    eval_every: int = 50
    eval_sequences: int = 32
    metric_window: int = 64
    metric_epsilon: float = 0.3
    valid_fraction: float = 0.02
    corpus: tuple[str, ...] = ()
    keep_all_checkpoints: bool = True
    micro_batch_tokens: int = 0

    def __post_init__(self):
        T = self.strategy.context_length
        if self.tokens_per_step % T:
            raise ConfigError(f"tokens_per_step {self.tokens_per_step} is not a multiple of context length {T}")
        if self.total_tokens % self.tokens_per_step:
            raise ConfigError("total_tokens must be divisible by tokens_per_step")
        if T > self.model.max_context:
            raise ConfigError(f"context length {T} exceeds model max_context {self.model.max_context}")
        if self.micro_batch_tokens < 0 or self.micro_batch_tokens % T:
            raise ConfigError(f"micro_batch_tokens must be a non-negative multiple of context length {T}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.tokens_per_step // self.strategy.context_length

    @property
    def n_steps(self) -> int:
        return self.total_tokens // self.tokens_per_step

    @property
    def window(self) -> int:
        return min(self.metric_window, self.strategy.context_length)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = list(self.corpus)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        strategy = D.PackingStrategy(**d.pop("strategy", {}))
        d["corpus"] = tuple(d.get("corpus", ()))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(model=model, strategy=strategy, **d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def load_config(path) -> TrainConfig:
    """JSON run config with the keys of :class:`TrainConfig` (nested ``model``/``strategy``)."""
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EvalPoint:
    step: int
    tokens: int
    train_loss: float
    valid_loss: float
    sink_rate: float


@dataclass
class RunArtifacts:
    config: TrainConfig
    model: Model
    initial_model: Model
    timeseries: list[EvalPoint] = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    final_report: M.SinkReport | None = None
    tokens_seen: int = 0

    def timeseries_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "tokens", "train_loss", "valid_loss", "sink_rate"])
        for p in self.timeseries:
            w.writerow([p.step, p.tokens, f"{p.train_loss:.6f}", f"{p.valid_loss:.6f}", f"{p.sink_rate:.6f}"])
        return buf.getvalue()


# --------------------------------------------------------------------------
# optimisation

def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to ``final_lr_frac * peak_lr`` (step is 0-based)."""
    n = cfg.n_steps
    warm = max(1, int(round(cfg.warmup_frac * n)))
    if step < warm:
        return cfg.peak_lr * (step + 1) / warm
    frac = (step - warm) / max(1, n - warm)
    floor = cfg.final_lr_frac
    return cfg.peak_lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def decays(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("b1", "b2", "attn_norm", "mlp_norm", "final_norm")


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * (g * g)
            if lr == 0.0:
                continue
            if c.weight_decay and decays(k):
                p -= (lr * c.weight_decay) * p
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.adam_eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def loss_and_grads(model: Model, tokens: np.ndarray, mask: np.ndarray, weights: np.ndarray | None = None,
                   targets: np.ndarray | None = None, need_grad: bool = True):
    """Next-token cross-entropy on a ``(B, T)`` batch and gradients for every parameter."""
    if targets is None:
        _, targets, w = D.loss_weights(tokens)
        weights = w if weights is None else weights
    with Tape() as tape:
        P = {k: Tensor(v, requires_grad=need_grad) for k, v in model.params.items()}
        x0 = nx.embedding(P["embed"], tokens)
        hidden, _, _ = run_blocks(model, x0, mask, params=P)
        logits = logits_from_hidden(model, hidden[-1], P)
        loss = nx.cross_entropy(logits, targets, weights)
    if not need_grad:
        return float(loss.data), None
    names = list(P)
    gs = nx.grad(tape, loss, [P[k] for k in names])
    return float(loss.data), dict(zip(names, gs))


def accumulated_loss_and_grads(model: Model, tokens: np.ndarray, mask: np.ndarray, micro_batch: int):
    """Same result as ``loss_and_grads`` up to rounding, ``micro_batch`` rows at a time.

    Each chunk's weighted-mean loss is rescaled by its share of the total
    loss weight, so peak memory follows the chunk rather than the batch.
    """
    B = tokens.shape[0]
    if micro_batch <= 0 or micro_batch >= B:
        return loss_and_grads(model, tokens, mask)
    _, targets, w = D.loss_weights(tokens)
    total_w = float(w.sum())
    loss, grads = 0.0, None
    for lo in range(0, B, micro_batch):
        sl = slice(lo, lo + micro_batch)
        share = float(w[sl].sum()) / total_w
        if share == 0.0:
            continue
        m = mask[sl] if mask.ndim == 3 else mask
        l, g = loss_and_grads(model, tokens[sl], m, w[sl], targets[sl])
        loss += share * l
        if grads is None:
            grads = {k: share * v for k, v in g.items()}
        else:
            for k, v in g.items():
                grads[k] += share * v
    return loss, grads


def gradient_check(model: Model, tokens: np.ndarray, mask: np.ndarray | None = None, step: float = 1e-5) -> dict[str, float]:
    """Relative error of tape gradients against central differences, per parameter.

    The error for a tensor is ``|g - fd| / max(|g|, |fd|, 1e-12)`` in the
    Frobenius norm.  Intended for double-precision models.
    """
    tokens = np.atleast_2d(tokens)
    if mask is None:
        mask = np.tril(np.ones((tokens.shape[1],) * 2, dtype=bool))
    _, grads = loss_and_grads(model, tokens, mask)
    probe = copy.copy(model)
    probe.params = dict(model.params)
    out = {}
    for name, g in grads.items():
        def f(x, name=name):
            probe.params[name] = x
            return loss_and_grads(probe, tokens, mask, need_grad=False)[0]
        fd = nx.central_difference(f, model.params[name], step)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        out[name] = float(np.linalg.norm(g - fd) / denom)
        probe.params[name] = model.params[name]
    return out


def batch_stream(docs: list[list[int]], strategy: D.PackingStrategy, batch_size: int, seed: int):
    """Endless stream of full batches; documents are reshuffled each epoch."""
    epoch = 0
    while True:
        order = D.shuffled(docs, seed * 1000 + epoch)
        for b in D.pack_corpus(order, strategy, batch_size):
            if b.tokens.shape[0] == batch_size:
                yield b
        epoch += 1


def _load_docs(cfg: TrainConfig) -> list[list[int]]:
    files = [Path(p) for p in cfg.corpus] if cfg.corpus else D.stdlib_corpus_files()
    expanded = []
    for f in files:
        expanded.extend(sorted(f.rglob("*.py")) if f.is_dir() else [f])
    return D.load_text_corpus(expanded)


def corpus_split(cfg: TrainConfig, docs=None):
    docs = _load_docs(cfg) if docs is None else docs
    return D.train_valid_split(docs, cfg.valid_fraction, seed=12345)


def eval_texts(valid_docs: list[list[int]], cfg: TrainConfig) -> list[list[int]]:
    """Validation documents long enough to fill the metric window, cut to the context."""
    need = cfg.window
    out = [d[: cfg.strategy.context_length] for d in valid_docs if len(d) >= need]
    return out[: cfg.eval_sequences]


def default_variant(strategy: D.PackingStrategy) -> str:
    return "bos+text" if strategy.use_bos else "text"


# --------------------------------------------------------------------------
# evaluation

def make_eval_input(text: Sequence[int], variant: str, context_length: int) -> tuple[np.ndarray, int]:
    """Token ids for one inference variant; also returns the offset of ``text[0]``."""
    if variant not in INFERENCE_VARIANTS:
        raise ValueError(f"unknown inference variant {variant!r}")
    text = list(text)
    if variant == "text":
        return np.array(text[:context_length], dtype=np.int64), 0
    lead = D.BOS if variant == "bos+text" else D.EOS
    return np.array([lead] + text[: context_length - 1], dtype=np.int64), 1


def evaluate(model: Model, eval_set: Sequence[Sequence[int]], strategy: D.PackingStrategy,
             inference_variant: str = "bos+text", window: int = 64, epsilon: float = 0.3):
    """Validation loss and sink report for one inference variant.

    Loss covers the same target positions in every variant (``text[1:]``),
    so variants are comparable.  Per-head sink scores use the first
    ``window`` positions of the model input and are averaged over sequences.
    """
    from .model import forward
    T = strategy.context_length
    total_nll, total_n = 0.0, 0
    scores = []
    for text in eval_set:
        ids, off = make_eval_input(text, inference_variant, T)
        n_text = len(ids) - off
        if n_text < 2:
            continue
        mask = np.tril(np.ones((len(ids), len(ids)), dtype=bool))
        rec = forward(model, ids, mask, keep_logits=True)
        logits = rec.logits.astype(np.float64)
        pos = np.arange(off, len(ids) - 1)
        lg = logits[pos]
        m = lg.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(lg - m).sum(axis=-1))
        total_nll += float(np.sum(lse - lg[np.arange(len(pos)), ids[pos + 1]]))
        total_n += len(pos)
        w = min(window, len(ids))
        scores.append(M.head_scores(rec.attention, w))
    if not scores:
        raise ValueError("no usable evaluation sequences")
    report = M.report_from_scores(np.mean(scores, axis=0), epsilon, min(window, T), len(scores))
    return total_nll / total_n, report


# --------------------------------------------------------------------------
# training loop

def train(config: TrainConfig, docs: list[list[int]] | None = None, out_dir=None,
          valid_docs: list[list[int]] | None = None, progress: bool = False) -> RunArtifacts:
    """Train from scratch; evaluates every ``eval_every`` steps and at the end."""
    cfg = config
    if docs is None or valid_docs is None:
        tr, va = corpus_split(cfg, docs)
        docs = tr if docs is None else docs
        valid_docs = va if valid_docs is None else valid_docs
    evalset = eval_texts(valid_docs, cfg)
    variant = default_variant(cfg.strategy)
    model = init_model(cfg.model, seed=cfg.seed, std=cfg.init_std)
    art = RunArtifacts(cfg, model, model.copy())
    opt = AdamW(model.params, cfg)
    stream = batch_stream(docs, cfg.strategy, cfg.batch_size, cfg.seed)
    micro = cfg.micro_batch_tokens // cfg.strategy.context_length
    out = Path(out_dir) if out_dir is not None else None
    last_good = model.copy()
    run_loss, run_n = 0.0, 0
    t0 = time.time()
    # overflow shows up as non-finite values, which are handled below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.n_steps):
            batch = next(stream)
            mask = D.batch_masks(batch, cfg.strategy)
            try:
                loss, grads = accumulated_loss_and_grads(model, batch.tokens, mask, micro)
            except nx.NonFiniteError:
                loss = float("nan")
            if not math.isfinite(loss):
                art.model = last_good
                raise TrainingDiverged(f"non-finite loss at step {step}", art)
            clip_grads(grads, cfg.grad_clip)
            opt.step(model.params, grads, lr_at(cfg, step))
            if not nx.parameters_finite(model.params.values()):
                art.model = last_good
                raise TrainingDiverged(f"non-finite parameters after step {step}", art)
            art.tokens_seen += batch.tokens.size
            run_loss += loss
            run_n += 1
            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.n_steps:
                try:
                    vloss, rep = evaluate(model, evalset, cfg.strategy, variant, cfg.window, cfg.metric_epsilon)
                except nx.NonFiniteError:
                    art.model = last_good
                    raise TrainingDiverged(f"non-finite activations at step {done}", art) from None
                pt = EvalPoint(done, art.tokens_seen, run_loss / run_n, vloss, rep.sink_rate)
                art.timeseries.append(pt)
                art.final_report = rep
                run_loss, run_n = 0.0, 0
                last_good = model.copy()
                if out is not None:
                    ck = save_checkpoint(model, out / "checkpoints" / f"step_{done:06d}",
                                         extra={"step": done, "seed": cfg.seed})
                    if not cfg.keep_all_checkpoints and art.checkpoints:
                        shutil.rmtree(art.checkpoints.pop())
                    art.checkpoints.append(ck)
                else:
                    art.checkpoints.append(last_good)
                if progress:
                    log.info("step %d/%d train %.4f valid %.4f sink %.3f max-score %.3f (%.0fs)", done, cfg.n_steps,
                             pt.train_loss, vloss, rep.sink_rate, float(rep.per_head_score.max()), time.time() - t0)
    art.model = model
    if out is not None:
        (out / "timeseries.csv").write_text(art.timeseries_csv())
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        (out / "sinks.csv").write_text(art.final_report.to_csv())
    return art


def context_ablation(base: TrainConfig, context_lengths: Sequence[int], docs=None, valid_docs=None,
                     out_dir=None, progress=False) -> dict[int, RunArtifacts]:
    """One run per context length at fixed tokens-per-step and total tokens."""
    arms = {}
    for T in context_lengths:
        if T > base.model.max_context:
            raise ConfigError(f"context length {T} exceeds max_context {base.model.max_context}")
        cfg = base.replace(strategy=replace(base.strategy, context_length=T))
        sub = None if out_dir is None else Path(out_dir) / f"ctx_{T}"
        arms[T] = train(cfg, docs, sub, valid_docs, progress)
    if out_dir is not None:
        (Path(out_dir) / "context_ablation.csv").write_text(context_ablation_csv(arms))
    return arms


def context_ablation_csv(arms: dict[int, RunArtifacts]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["context_length", "step", "tokens", "train_loss", "valid_loss", "sink_rate", "final"])
    for T, art in arms.items():
        for i, p in enumerate(art.timeseries):
            w.writerow([T, p.step, p.tokens, f"{p.train_loss:.6f}", f"{p.valid_loss:.6f}",
                        f"{p.sink_rate:.6f}", int(i == len(art.timeseries) - 1)])
    return buf.getvalue()


# (regime, inference variants evaluated) following the packing table layout
PACKING_TABLE = (
    ("causal", ("eos*+text", "text")),
    ("causal+fixed-bos", ("bos+text", "text")),
    ("intra-doc", ("text",)),
    ("intra-doc+bos", ("bos+text", "text")),
    ("intra-doc+fixed-bos", ("bos+text", "text")),
)


@dataclass
class PackingRow:
    regime: str
    masking: str
    bos: bool
    eos: bool
    inference: str
    sink_rate: float
    valid_loss: float


def packing_ablation(base: TrainConfig, docs=None, valid_docs=None, out_dir=None, progress=False,
                     regimes: Sequence[str] | None = None):
    """Train each packing regime and evaluate its inference variants."""
    if docs is None or valid_docs is None:
        tr, va = corpus_split(base, docs)
        docs, valid_docs = (tr if docs is None else docs), (va if valid_docs is None else valid_docs)
    rows, runs = [], {}
    for name, variants in PACKING_TABLE:
        if regimes is not None and name not in regimes:
            continue
        strat = D.regime(name, base.strategy.context_length)
        cfg = base.replace(strategy=strat)
        sub = None if out_dir is None else Path(out_dir) / name
        art = train(cfg, docs, sub, valid_docs, progress)
        runs[name] = art
        evalset = eval_texts(valid_docs, cfg)
        for v in variants:
            loss, rep = evaluate(art.model, evalset, strat, v, cfg.window, cfg.metric_epsilon)
            rows.append(PackingRow(name, strat.masking, strat.use_bos, strat.use_eos, v, rep.sink_rate, loss))
    if out_dir is not None:
        (Path(out_dir) / "packing_ablation.csv").write_text(packing_csv(rows))
    return rows, runs


def packing_csv(rows: Sequence[PackingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["regime", "masking", "bos", "eos", "inference", "sink_rate_pct", "valid_loss"])
    for r in rows:
        w.writerow([r.regime, r.masking, "yes" if r.bos else "no", "yes" if r.eos else "no", r.inference,
                    f"{100 * r.sink_rate:.2f}", f"{r.valid_loss:.4f}"])
    return buf.getvalue()
