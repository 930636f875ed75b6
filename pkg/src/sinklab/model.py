"""Instrumented decoder-only transformer.

Block equations (row-vector convention, so ``x @ W`` plays the role of ``W x``)::

    z_i^{(l,h)} = sum_{j<=i} alpha_ij^{(l,h)} (v_j @ Wv^{(l,h)})
    z_i^{(l)}   = concat_h z_i^{(l,h)} @ Wo^{(l)} + v_i
    v_i^{(l+1)} = psi^{(l)}(z_i^{(l)}) + z_i^{(l)}

Each head works at the full model width ``d`` (``Wv^{(l,h)}`` is ``d x d``
and ``Wo^{(l)}`` is ``Hd x d``).  With ``normalization="rms"`` the
attention and MLP inputs are pre-normalised and a final RMS norm precedes
the unembedding.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 259
    mlp_hidden: int = 256
    nonlinearity: str = "gelu"
    normalization: str = "rms"
    positional: str = "rope"
    precision: str = "single"
    max_context: int = 1024
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "mlp_hidden", "max_context"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.nonlinearity not in ("gelu", "relu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.normalization not in ("none", "rms"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.positional not in ("rope", "none"):
            raise ConfigError(f"unknown positional encoding {self.positional!r}")
        if self.positional == "rope" and self.d_model % 2:
            raise ConfigError("rope needs an even d_model")
        nx.dtype_of(self.precision)

    @property
    def dtype(self):
        return nx.dtype_of(self.precision)

    @property
    def bound_compliant(self) -> bool:
        return self.nonlinearity == "relu" and self.normalization == "none"

    @classmethod
    def bound_compliant_config(cls, **kw) -> "ModelConfig":
        kw.setdefault("precision", "double")
        kw.setdefault("positional", "none")
        return cls(nonlinearity="relu", normalization="none", **kw)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, H, m, V = cfg.d_model, cfg.n_heads, cfg.mlp_hidden, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d), "unembed": (d, V)}
    if cfg.normalization == "rms":
        shapes["final_norm"] = (d,)
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "wq": (H, d, d), p + "wk": (H, d, d), p + "wv": (H, d, d),
            p + "wo": (H * d, d),
            p + "w1": (d, m), p + "b1": (m,), p + "w2": (m, d), p + "b2": (d,),
        })
        if cfg.normalization == "rms":
            shapes[p + "attn_norm"] = (d,)
            shapes[p + "mlp_norm"] = (d,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter set mismatch; missing={missing} extra={extra}")
        for k, shape in expected.items():
            arr = self.params[k]
            if tuple(arr.shape) != shape:
                raise ConfigError(f"{k}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ConfigError(f"{k}: non-finite parameters")

    def layer(self, l: int) -> dict[str, np.ndarray]:
        p = f"layers.{l}."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, precision: str) -> "Model":
        cfg = self.config.replace(precision=precision)
        return Model(cfg, {k: v.astype(cfg.dtype) for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:16]


def init_model(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Model:
    """Scaled-normal init; residual-path outputs get ``std / sqrt(2L)``."""
    rng = np.random.default_rng(seed)
    resid_std = std / np.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("final_norm", "attn_norm", "mlp_norm"):
            arr = np.ones(shape)
        elif leaf in ("b1", "b2"):
            arr = np.zeros(shape)
        elif leaf in ("wo", "w2"):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, std, shape)
        params[name] = arr.astype(cfg.dtype)
    return Model(cfg, params)


def zero_model(cfg: ModelConfig) -> Model:
    return Model(cfg, {k: np.zeros(s, cfg.dtype) for k, s in param_shapes(cfg).items()})


# --------------------------------------------------------------------------
# forward

@dataclass
class ForwardRecord:
    """Per-layer hidden states and attention maps of one forward pass.

    ``hidden[l]`` is the block input of layer ``l`` (``hidden[0]`` is the
    embedding, ``hidden[L]`` the last block output, before any final norm).
    Leading batch axes are dropped for single sequences.
    """
    hidden: np.ndarray
    attention: np.ndarray
    values: np.ndarray | None = None
    logits: np.ndarray | None = None


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def rope_tables(T: int, d: int, base: float = 10000.0, dtype=np.float64):
    half = d // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(T, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _normalize_mask(mask, T: int) -> np.ndarray:
    if mask is None:
        return causal_mask(T)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (T, T):
        raise ConfigError(f"mask shape {mask.shape} does not match sequence length {T}")
    return mask


def attention_weights(queries, keys, mask=None, positional: str = "none", rope_base: float = 10000.0,
                      detach: bool = False):
    """Scaled dot-product attention coefficients.

    ``queries``/``keys`` have shape ``(..., T, d)``.  With ``positional="rope"``
    rotary encoding is applied to both before the dot product.  Returns
    row-stochastic ``(..., T, T)`` weights (a Tensor if the inputs are).
    """
    q, k = nx.as_tensor(queries), nx.as_tensor(keys)
    T, d = q.shape[-2], q.shape[-1]
    mask = _normalize_mask(mask, T)
    if positional == "rope":
        cos, sin = rope_tables(T, d, rope_base, q.dtype)
        q, k = nx.rope(q, cos, sin), nx.rope(k, cos, sin)
    logits = nx.matmul(q, nx.transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(d))
    alpha = nx.softmax_rows(logits, mask)
    if detach:
        alpha = nx.detach(alpha)
    if not isinstance(queries, Tensor) and not isinstance(keys, Tensor):
        return alpha.data
    return alpha


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _layer_tensors(model: Model, l: int, cache: dict[str, Tensor] | None) -> dict[str, Tensor]:
    p = f"layers.{l}."
    out = {}
    for k, v in model.layer(l).items():
        out[k] = cache[p + k] if cache is not None else Tensor(v)
    return out


def block_forward(model: Model, l: int, v, mask=None, *, params: dict[str, Tensor] | None = None,
                  detach_attention: bool = False, override_attention: np.ndarray | None = None):
    """One transformer block.

    ``v`` has shape ``(T, d)`` or ``(B, T, d)``; ``mask`` is ``(T, T)`` or
    ``(B, T, T)``.  Returns ``(v_next, alpha, head_values)`` with ``alpha`` of
    shape ``(..., H, T, T)`` and ``head_values`` of shape ``(..., H, T, d)``
    (both Tensors).  ``override_attention`` replaces the softmax weights by
    a fixed array (treated as a constant).
    """
    cfg = model.config
    v = nx.as_tensor(v)
    if v.shape[-1] != cfg.d_model:
        raise ConfigError(f"hidden width {v.shape[-1]} != d_model {cfg.d_model}")
    T = v.shape[-2]
    if T > cfg.max_context:
        raise ConfigError(f"sequence length {T} exceeds max_context {cfg.max_context}")
    mask = _normalize_mask(mask, T)
    W = _layer_tensors(model, l, params)
    H, d = cfg.n_heads, cfg.d_model

    h = nx.rms_norm(v, W["attn_norm"]) if cfg.normalization == "rms" else v
    vals = _per_head(h, W["wv"])
    if override_attention is not None:
        alpha = Tensor(np.asarray(override_attention, dtype=v.dtype))
    else:
        q = _per_head(h, W["wq"])
        k = _per_head(h, W["wk"])
        amask = mask[..., None, :, :] if mask.ndim == 3 else mask
        alpha = attention_weights(q, k, amask, cfg.positional, cfg.rope_base, detach=detach_attention)
    zh = nx.matmul(alpha, vals)
    lead = zh.shape[:-3]
    nd = zh.ndim
    cat = nx.reshape(nx.transpose(zh, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)), lead + (T, H * d))
    z = nx.matmul(cat, W["wo"]) + v
    h2 = nx.rms_norm(z, W["mlp_norm"]) if cfg.normalization == "rms" else z
    act = nx.relu if cfg.nonlinearity == "relu" else nx.gelu
    m = nx.matmul(act(nx.matmul(h2, W["w1"]) + W["b1"]), W["w2"]) + W["b2"]
    return z + m, alpha, vals


def _per_head(h: Tensor, w: Tensor) -> Tensor:
    """``h @ w[head]`` for every head as one 2-D product; ``(..., T, d) -> (..., H, T, d)``."""
    H, d, _ = w.shape
    w2 = nx.reshape(nx.transpose(w, (1, 0, 2)), (d, H * d))
    y = nx.matmul(h, w2)
    y = nx.reshape(y, y.shape[:-1] + (H, d))
    nd = y.ndim
    return nx.transpose(y, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
        raise TokenError("tokens must be a non-empty 1-D or 2-D id array")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TokenError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise TokenError(f"token id out of range [0, {model.config.vocab_size})")
    return tokens


def run_blocks(model: Model, x0: Tensor, mask, *, params=None, detach_attention=False,
               override_attention=None, keep_values=False):
    """Apply all blocks to hidden input ``x0``; returns (hidden list, alphas, values)."""
    hidden = [x0]
    alphas, values = [], []
    v = x0
    for l in range(model.config.n_layers):
        ov = None if override_attention is None else override_attention[l]
        v, a, vals = block_forward(model, l, v, mask, params=params, detach_attention=detach_attention,
                                   override_attention=ov)
        hidden.append(v)
        alphas.append(a)
        if keep_values:
            values.append(vals)
    return hidden, alphas, values


def logits_from_hidden(model: Model, v: Tensor, params=None) -> Tensor:
    P = params if params is not None else {k: Tensor(model.params[k]) for k in ("unembed", "final_norm")
                                           if k in model.params}
    if model.config.normalization == "rms":
        v = nx.rms_norm(v, P["final_norm"])
    return nx.matmul(v, P["unembed"])


def forward(model: Model, tokens, mask=None, *, keep_values: bool = False, keep_logits: bool = False,
            detach_attention: bool = False) -> ForwardRecord:
    """Full forward pass returning every hidden state and attention map.

    ``tokens`` is ``(T,)`` or ``(B, T)``; masks default to causal.
    """
    tokens = check_tokens(model, tokens)
    T = tokens.shape[-1]
    if T > model.config.max_context:
        raise ConfigError(f"sequence length {T} exceeds max_context {model.config.max_context}")
    x0 = Tensor(model.params["embed"][tokens])
    hidden, alphas, values = run_blocks(model, x0, mask, detach_attention=detach_attention,
                                        keep_values=keep_values)
    rec = ForwardRecord(
        hidden=np.stack([h.data for h in hidden], axis=-3),
        attention=np.stack([a.data for a in alphas], axis=-4),
        values=np.stack([x.data for x in values], axis=-4) if keep_values else None,
    )
    if keep_logits:
        rec.logits = logits_from_hidden(model, hidden[-1]).data
    return rec


def greedy_next(model: Model, tokens) -> int:
    rec = forward(model, np.asarray(tokens)[None, :], keep_logits=True)
    return int(np.argmax(rec.logits[0, -1]))


# --------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.txt"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> Path:
    """Directory checkpoint: ``manifest.txt`` (key = value) + one raw blob per parameter.

    Blobs are little-endian IEEE-754 in row-major order.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    lines = ["format = sinklab-checkpoint-1"]
    for f in fields(cfg):
        lines.append(f"config.{f.name} = {getattr(cfg, f.name)}")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"meta.{k} = {v}")
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        fname = name + ".bin"
        (path / fname).write_bytes(le.tobytes())
        tag = "f4" if arr.dtype == np.float32 else "f8"
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param.{name} = {fname} {tag} {shape}")
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_field(f, raw: str):
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw


def load_checkpoint(path) -> Model:
    path = Path(path)
    man = read_manifest(path / MANIFEST)
    kw = {f.name: _parse_field(f, man[f"config.{f.name}"]) for f in fields(ModelConfig)
          if f"config.{f.name}" in man}
    cfg = ModelConfig(**kw)
    params = {}
    for key, val in man.items():
        if not key.startswith("param."):
            continue
        fname, tag, shape = val.split()
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        dt = np.dtype("<f4" if tag == "f4" else "<f8")
        raw = (path / fname).read_bytes()
        if len(raw) != dt.itemsize * int(np.prod(dims)):
            raise ValueError(f"{fname}: blob has {len(raw)} bytes, manifest implies {dt.itemsize * int(np.prod(dims))}")
        params[key[len("param."):]] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return Model(cfg, params)


def checkpoint_meta(path) -> dict[str, str]:
    man = read_manifest(Path(path) / MANIFEST)
    return {k[5:]: v for k, v in man.items() if k.startswith("meta.")}
