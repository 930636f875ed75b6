"""Byte tokenizer, corpus packing and attention-mask construction.

Four packing regimes are supported through :class:`PackingStrategy`:
plain causal packing, causal packing with a BOS fixed at position 0,
intra-document masking, and intra-document masking with a fixed BOS that
every position may attend to.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
SPECIAL = frozenset((BOS, EOS, PAD))
CONTEXT_BOS_DOC = -1
PAD_DOC = -2


class ConfigError(ValueError):
    pass


class IngestError(ValueError):
    pass


def tokenize(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids: Iterable[int], errors: str = "replace") -> str:
    """Bytes back to text; special ids are dropped."""
    return bytes(i for i in ids if i < 256).decode("utf-8", errors=errors)


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    return bytes(i for i in ids if i < 256)


@dataclass(frozen=True)
class PackingStrategy:
    masking: str = "causal"
    fixed_bos: bool = False
    use_bos: bool = False
    use_eos: bool = True
    context_length: int = 64

    def __post_init__(self):
        if self.masking not in ("causal", "intra-doc"):
            raise ConfigError(f"masking must be 'causal' or 'intra-doc', got {self.masking!r}")
        if self.fixed_bos and not self.use_bos:
            raise ConfigError("fixed_bos requires use_bos")
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")
        if self.fixed_bos and self.context_length < 2:
            raise ConfigError("fixed_bos needs context_length >= 2 (position 0 is reserved)")

    @property
    def label(self) -> str:
        base = "Causal" if self.masking == "causal" else "Intra-doc"
        if self.fixed_bos:
            return base + "+fixed BOS"
        return base + ("+BOS" if self.use_bos else "")


# the five training regimes of the packing ablation
PACKING_REGIMES = {
    "causal": dict(masking="causal", fixed_bos=False, use_bos=False, use_eos=True),
    "causal+fixed-bos": dict(masking="causal", fixed_bos=True, use_bos=True, use_eos=True),
    "intra-doc": dict(masking="intra-doc", fixed_bos=False, use_bos=False, use_eos=True),
    "intra-doc+bos": dict(masking="intra-doc", fixed_bos=False, use_bos=True, use_eos=True),
    "intra-doc+fixed-bos": dict(masking="intra-doc", fixed_bos=True, use_bos=True, use_eos=True),
}


def regime(name: str, context_length: int) -> PackingStrategy:
    return PackingStrategy(context_length=context_length, **PACKING_REGIMES[name])


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    doc: int


@dataclass
class PackedSequence:
    tokens: np.ndarray
    spans: list[Span]


@dataclass
class PackedBatch:
    tokens: np.ndarray
    layout: list[list[Span]]

    @property
    def shape(self):
        return self.tokens.shape

    def special_positions(self) -> dict[str, list[tuple[int, int]]]:
        out = {}
        for name, tid in (("bos", BOS), ("eos", EOS), ("pad", PAD)):
            rows, cols = np.nonzero(self.tokens == tid)
            out[name] = list(zip(rows.tolist(), cols.tolist()))
        return out


def _doc_stream(docs: Sequence[Sequence[int]], strategy: PackingStrategy) -> Iterator[tuple[int, int]]:
    add_bos = strategy.use_bos and not strategy.fixed_bos
    for d, doc in enumerate(docs):
        if len(doc) == 0:
            raise ConfigError(f"document {d} is empty")
        if add_bos:
            yield BOS, d
        for t in doc:
            yield int(t), d
        if strategy.use_eos:
            yield EOS, d


def _spans(doc_ids: list[int]) -> list[Span]:
    spans = []
    start = 0
    for i in range(1, len(doc_ids) + 1):
        if i == len(doc_ids) or doc_ids[i] != doc_ids[start]:
            spans.append(Span(start, i, doc_ids[start]))
            start = i
    return spans


def pack_sequences(docs: Sequence[Sequence[int]], strategy: PackingStrategy) -> Iterator[PackedSequence]:
    """Concatenate documents and cut the stream into fixed-length contexts.

    Documents may straddle context boundaries.  With ``fixed_bos`` every
    context starts with BOS and holds ``T - 1`` stream tokens.  The final
    partial context is kept and padded with PAD.
    """
    T = strategy.context_length
    lead = [BOS] if strategy.fixed_bos else []
    lead_doc = [CONTEXT_BOS_DOC] if strategy.fixed_bos else []
    room = T - len(lead)
    toks: list[int] = []
    ids: list[int] = []
    for tok, d in _doc_stream(docs, strategy):
        toks.append(tok)
        ids.append(d)
        if len(toks) == room:
            yield PackedSequence(np.array(lead + toks, dtype=np.int64), _spans(lead_doc + ids))
            toks, ids = [], []
    if toks:
        pad = room - len(toks)
        yield PackedSequence(np.array(lead + toks + [PAD] * pad, dtype=np.int64),
                             _spans(lead_doc + ids + [PAD_DOC] * pad))


def pack_corpus(docs: Sequence[Sequence[int]], strategy: PackingStrategy, batch_size: int = 1) -> Iterator[PackedBatch]:
    """Group packed contexts into batches; the last batch may be short."""
    buf: list[PackedSequence] = []
    for seq in pack_sequences(docs, strategy):
        buf.append(seq)
        if len(buf) == batch_size:
            yield PackedBatch(np.stack([s.tokens for s in buf]), [s.spans for s in buf])
            buf = []
    if buf:
        yield PackedBatch(np.stack([s.tokens for s in buf]), [s.spans for s in buf])


@dataclass
class AttentionMask:
    allow: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allow, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigError("attention mask must be square")
        if np.triu(a, 1).any():
            raise ConfigError("attention mask allows a future position")
        if not a.any(axis=1).all():
            raise ConfigError("attention mask has a row with no allowed entry")
        self.allow = a


def build_mask(layout: Sequence[Span], strategy: PackingStrategy, T: int | None = None) -> AttentionMask:
    """Boolean attend matrix for one packed context."""
    if not layout:
        raise ConfigError("empty layout")
    T = layout[-1].end if T is None else T
    if layout[0].start != 0 or layout[-1].end != T or any(a.end != b.start for a, b in zip(layout, layout[1:])):
        raise ConfigError("layout spans must tile [0, T)")
    tri = np.tril(np.ones((T, T), dtype=bool))
    if strategy.masking == "causal":
        allow = tri
    else:
        seg = np.empty(T, dtype=np.int64)
        for k, s in enumerate(layout):
            seg[s.start:s.end] = k
        allow = tri & (seg[:, None] == seg[None, :])
    if strategy.fixed_bos:
        allow = allow.copy()
        allow[:, 0] = True
    return AttentionMask(allow)


def batch_masks(batch: PackedBatch, strategy: PackingStrategy) -> np.ndarray:
    T = batch.tokens.shape[1]
    if strategy.masking == "causal":
        m = build_mask([Span(0, T, 0)], strategy, T).allow
        return np.broadcast_to(m, (batch.tokens.shape[0], T, T))
    return np.stack([build_mask(spans, strategy, T).allow for spans in batch.layout])


def loss_weights(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs, next-token targets and loss weights for a ``(B, T)`` batch.

    Targets that are BOS or PAD get weight 0; EOS targets are kept.
    """
    tokens = np.asarray(tokens)
    inputs = tokens
    targets = np.concatenate([tokens[:, 1:], np.full((tokens.shape[0], 1), PAD)], axis=1)
    w = ((targets != BOS) & (targets != PAD) & (inputs != PAD)).astype(np.float64)
    return inputs, targets, w


# --------------------------------------------------------------------------
# corpora and prompt sets

_BLOCK_SPLIT = re.compile(r"\n\s*\n(?=\S)")


def split_documents(text: str, min_len: int = 32, max_len: int = 2048) -> list[str]:
    """Split a text into blank-line-separated blocks, merging tiny ones."""
    docs, cur = [], ""
    for block in _BLOCK_SPLIT.split(text):
        block = block.strip("\n")
        if not block.strip():
            continue
        cur = block if not cur else cur + "\n\n" + block
        if len(cur) >= min_len:
            docs.extend(cur[i:i + max_len] for i in range(0, len(cur), max_len))
            cur = ""
    if cur.strip():
        docs.extend(cur[i:i + max_len] for i in range(0, len(cur), max_len))
    return docs


def load_text_corpus(paths: Iterable[str | Path], min_len: int = 32, max_len: int = 2048) -> list[list[int]]:
    """Documents from UTF-8 text files (split on blank lines) or JSONL with a ``text`` field."""
    docs = []
    for p in sorted(Path(x) for x in paths):
        if p.suffix == ".jsonl":
            docs.extend(tokenize(t) for t in (json.loads(l)["text"] for l in p.read_text().splitlines() if l.strip()))
            continue
        text = p.read_text(encoding="utf-8", errors="replace")
        docs.extend(tokenize(d) for d in split_documents(text, min_len, max_len))
    return docs


def stdlib_corpus_files() -> list[Path]:
    """Python standard-library sources: a corpus present on every machine that runs this code."""
    import sysconfig
    root = Path(sysconfig.get_paths()["stdlib"])
    skip = {"site-packages", "dist-packages", "test", "tests", "idlelib", "lib2to3", "__pycache__"}
    files = [p for p in root.rglob("*.py") if not skip.intersection(p.relative_to(root).parts)]
    return sorted(files)


def train_valid_split(docs: list[list[int]], valid_fraction: float = 0.02, seed: int = 0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(docs))
    n_valid = max(1, int(len(docs) * valid_fraction))
    valid = [docs[i] for i in sorted(order[:n_valid])]
    train = [docs[i] for i in sorted(order[n_valid:])]
    return train, valid


def shuffled(docs: list[list[int]], seed: int) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    return [docs[i] for i in rng.permutation(len(docs))]


def load_prompt_set(path, truncate: int | None = None, min_length: int | None = None) -> list[list[int]]:
    """Line-delimited JSON records with a ``text`` field -> token lists.

    Blank lines are skipped.  ``min_length`` drops prompts shorter than that
    many tokens; ``truncate`` cuts the rest.
    """
    prompts = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            text = rec["text"]
            if not isinstance(text, str):
                raise TypeError("text is not a string")
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise IngestError(f"{path}: line {n}: malformed record ({e})") from None
        ids = tokenize(text)
        if min_length is not None and len(ids) < min_length:
            continue
        prompts.append(ids[:truncate] if truncate else ids)
    return prompts


# --------------------------------------------------------------------------
# packed-batch cache

def save_batch_cache(batches: Sequence[PackedBatch], path) -> Path:
    """Manifest + one little-endian int32 blob holding all token ids."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["format = sinklab-batches-1", "dtype = <i4"]
    chunks, offset = [], 0
    for k, b in enumerate(batches):
        arr = np.ascontiguousarray(b.tokens, dtype="<i4")
        lines.append(f"batch.{k} = {offset} {arr.shape[0]} {arr.shape[1]}")
        lay = ";".join("|".join(f"{s.start},{s.end},{s.doc}" for s in row) for row in b.layout)
        lines.append(f"layout.{k} = {lay}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (path / "tokens.bin").write_bytes(b"".join(chunks))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_batch_cache(path) -> list[PackedBatch]:
    from .model import read_manifest
    path = Path(path)
    man = read_manifest(path / "manifest.txt")
    raw = (path / "tokens.bin").read_bytes()
    out = []
    k = 0
    while f"batch.{k}" in man:
        off, B, T = (int(x) for x in man[f"batch.{k}"].split())
        toks = np.frombuffer(raw, dtype="<i4", count=B * T, offset=off).reshape(B, T).astype(np.int64)
        layout = [[Span(*map(int, s.split(","))) for s in row.split("|")] for row in man[f"layout.{k}"].split(";")]
        out.append(PackedBatch(toks, layout))
        k += 1
    return out
