"""Command-line experiment runner: ``python -m sinklab <command> [options]``.

Every command writes CSV (plus best-effort SVG) into the output directory
and a ``provenance.txt`` beside it.  The output root defaults to
``$SINKLAB_OUT`` or ``./sinklab-out``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as M
from . import sensitivity as S
from . import svg
from . import training as Tr
from . import traceio as TI
from .model import load_checkpoint

COMMANDS = ("train", "ablate-context", "ablate-packing", "sinks", "perturb", "bound-check", "collapse-scan",
            "norms", "trace-metrics")
ASSETS = Path(__file__).parent / "assets"
TINY_CHECKPOINT = ASSETS / "tiny_checkpoint"
BUNDLED_PROMPTS = ASSETS / "prompts.jsonl"

log = logging.getLogger("sinklab")


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    command: str
    config: Path | None = None
    out: Path | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    options: dict = field(default_factory=dict)


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sinklab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--seeds", type=_ints, default=None, help="comma-separated seeds")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("train", "train one model per seed")
    sp = add("ablate-context", "context-length ablation")
    sp.add_argument("--contexts", type=_ints, default=None)
    sp = add("ablate-packing", "packing/masking ablation")
    sp.add_argument("--regimes", type=lambda s: s.split(","), default=None)
    sp = add("sinks", "sink report of a checkpoint on a prompt set")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--prompts", type=Path)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--window", type=int)
    sp.add_argument("--variant", choices=Tr.INFERENCE_VARIANTS)
    sp = add("perturb", "single-token perturbation maps with and without BOS")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--text")
    sp.add_argument("--position", type=int)
    sp.add_argument("--replacement")
    sp = add("bound-check", "Jacobian norms versus the path-sum bound on random models")
    sp.add_argument("--models", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--statement-delta", action="store_true", help="use delta/H as in the theorem statement")
    sp = add("collapse-scan", "final-layer collapse for growing addition prompts")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--trace-with", type=Path)
    sp.add_argument("--trace-without", type=Path)
    sp.add_argument("--lengths", type=_ints)
    sp = add("norms", "per-head value norms (sink tokens have small values)")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--text")
    sp.add_argument("--layer", type=int)
    sp.add_argument("--head", type=int)
    sp = add("trace-metrics", "sink and collapse metrics of an external trace")
    sp.add_argument("--trace", type=Path)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--window", type=int)
    return p


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    opts = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "seeds", "verbose")}
    out = args.out or Path(os.environ.get("SINKLAB_OUT", "sinklab-out")) / args.command
    return ExperimentSpec(args.command, args.config, out, args.seeds if args.seeds else [0],
                          {k: v for k, v in opts.items() if v is not None and v is not False})


def _read_config(spec: ExperimentSpec) -> dict:
    if spec.config is None:
        return {}
    if not spec.config.exists():
        raise FileNotFoundError(f"config file not found: {spec.config}")
    try:
        return json.loads(spec.config.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{spec.config}: invalid JSON ({e})") from None


def _opt(spec: ExperimentSpec, cfg: dict, key: str, default=None):
    if key in spec.options:
        return spec.options[key]
    exp = cfg.get("experiment", {})
    return exp.get(key, cfg.get(key, default)) if key in exp or key in cfg else default


def _train_config(cfg: dict) -> Tr.TrainConfig:
    body = {k: v for k, v in cfg.items() if k != "experiment"}
    return Tr.TrainConfig.from_dict(body)


def write_provenance(spec: ExperimentSpec, cfg: dict) -> None:
    blob = json.dumps(cfg, sort_keys=True).encode()
    lines = [
        f"command = {spec.command}",
        f"config = {spec.config}",
        f"config_sha256 = {hashlib.sha256(blob).hexdigest()}",
        f"options = {json.dumps({k: str(v) for k, v in sorted(spec.options.items())})}",
        f"seeds = {','.join(map(str, spec.seeds))}",
        f"sinklab = {__version__}",
        f"numpy = {np.__version__}",
        f"python = {platform.python_version()}",
        f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
    ]
    (spec.out / "provenance.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands

def cmd_train(spec, cfg):
    base = _train_config(cfg)
    for s in spec.seeds:
        art = Tr.train(base.replace(seed=s), out_dir=spec.out / f"seed_{s}", progress=True)
        p = art.timeseries[-1]
        print(f"seed {s}: step {p.step} valid_loss {p.valid_loss:.4f} sink_rate {p.sink_rate:.4f}")


def cmd_ablate_context(spec, cfg):
    base = _train_config(cfg)
    contexts = _opt(spec, cfg, "contexts", [16, 64, 256])
    docs, valid = Tr.corpus_split(base)
    summary = ["seed,context_length,final_sink_rate,final_valid_loss"]
    for s in spec.seeds:
        arms = Tr.context_ablation(base.replace(seed=s), contexts, docs, valid, spec.out / f"seed_{s}", progress=True)
        for T, art in arms.items():
            p = art.timeseries[-1]
            summary.append(f"{s},{T},{p.sink_rate:.6f},{p.valid_loss:.6f}")
    (spec.out / "context_summary.csv").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))


def cmd_ablate_packing(spec, cfg):
    base = _train_config(cfg)
    regimes = _opt(spec, cfg, "regimes")
    for s in spec.seeds:
        rows, _ = Tr.packing_ablation(base.replace(seed=s), out_dir=spec.out / f"seed_{s}", progress=True,
                                      regimes=regimes)
        print(f"seed {s}")
        print(Tr.packing_csv(rows), end="")


def _checkpoint(spec, cfg):
    path = Path(_opt(spec, cfg, "checkpoint", TINY_CHECKPOINT))
    if not (path / "manifest.txt").exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_sinks(spec, cfg):
    model = _checkpoint(spec, cfg)
    prompts_path = Path(_opt(spec, cfg, "prompts", BUNDLED_PROMPTS))
    if not prompts_path.exists():
        raise FileNotFoundError(f"prompt file not found: {prompts_path}")
    eps = float(_opt(spec, cfg, "epsilon", 0.3))
    window = int(_opt(spec, cfg, "window", 64))
    variant = _opt(spec, cfg, "variant", "bos+text")
    lead = 0 if variant == "text" else 1
    prompts = D.load_prompt_set(prompts_path, min_length=window - lead)
    if not prompts:
        raise UsageError(f"no prompt in {prompts_path} has at least {window - lead} tokens")
    strat = D.PackingStrategy(context_length=min(model.config.max_context, window))
    loss, rep = Tr.evaluate(model, prompts, strat, variant, window, eps)
    (spec.out / "sinks.csv").write_text(rep.to_csv())
    tm = TI.TraceMetrics(rep, [], [], [])
    (spec.out / "sinks_heatmap.csv").write_text(tm.heatmap_csv())
    svg.heatmap(rep.per_head_score, spec.out / "sinks.svg", f"mean attention to position 0 ({variant})",
                "head", "layer", cell=20, vmin=0.0, vmax=1.0)
    print(f"sink_rate {rep.sink_rate:.4f} (epsilon {eps}, window {window}, {rep.n_prompts} prompts), loss {loss:.4f}")


DEFAULT_PERTURB_TEXT = ("William Shakespeare was an English playwright, poet and actor. He is widely regarded as "
                        "the greatest writer in the English language and the world's pre-eminent dramatist.")


def perturbation_pair(text: str, position: int | None, replacement: str | None):
    """Token pair differing in one byte; defaults swap the first byte of 'greatest'."""
    ids = D.tokenize(text)
    if position is None:
        at = text.find("greatest")
        position = len(text[:at].encode()) if at >= 0 else len(ids) // 2
    rep = D.tokenize(replacement)[0] if replacement else (ids[position] + 1) % 256
    alt = list(ids)
    alt[position] = rep
    return ids, alt, position


def cmd_perturb(spec, cfg):
    model = _checkpoint(spec, cfg)
    text = _opt(spec, cfg, "text", DEFAULT_PERTURB_TEXT)
    a, b, pos = perturbation_pair(text, _opt(spec, cfg, "position"), _opt(spec, cfg, "replacement"))
    cap = model.config.max_context - 1
    a, b = a[:cap], b[:cap]
    with_bos = S.perturb_propagation(model, [D.BOS] + a, [D.BOS] + b)
    without = S.perturb_propagation(model, a, b)
    (spec.out / "perturb_with_bos.csv").write_text(with_bos.to_csv())
    (spec.out / "perturb_without_bos.csv").write_text(without.to_csv())
    vmax = float(max(with_bos.distances.max(), without.distances.max()))
    svg.heatmap(with_bos.distances, spec.out / "perturb_with_bos.svg", "with BOS", "token", "layer", 6, 0.0, vmax)
    svg.heatmap(without.distances, spec.out / "perturb_without_bos.svg", "without BOS", "token", "layer", 6, 0.0, vmax)
    print(f"perturbed byte {pos}: mean final-layer distance after it: with BOS {with_bos.mean_after():.6f}, "
          f"without BOS {without.mean_after():.6f}")


def cmd_bound_check(spec, cfg):
    n = int(_opt(spec, cfg, "models", 100))
    seed = int(_opt(spec, cfg, "seed", spec.seeds[0]))
    delta = "statement" if _opt(spec, cfg, "statement_delta", False) else "proof"
    res = S.bound_check(n, seed, delta=delta)
    (spec.out / "bound_check.csv").write_text(
        "n_models,n_pairs,violations,max_ratio\n"
        f"{res.n_models},{res.n_pairs},{res.violations},{res.max_ratio!r}\n")
    print(f"max(jacobian/bound) = {res.max_ratio:.6f} over {res.n_pairs} pairs in {res.n_models} models; "
          f"violations: {res.violations}")
    return 0 if res.violations == 0 else 3


def cmd_collapse_scan(spec, cfg):
    lengths = _opt(spec, cfg, "lengths", [5, 25, 50])
    tw, tn = _opt(spec, cfg, "trace_with"), _opt(spec, cfg, "trace_without")
    if tw and tn:
        pts = TI.collapse_scan_trace(TI.read_trace(tw), TI.read_trace(tn))
    else:
        pts = TI.collapse_scan(_checkpoint(spec, cfg), lengths)
    (spec.out / "collapse_scan.csv").write_text(TI.collapse_scan_csv(pts))
    rows = ["n_terms,arm,bin_lo,bin_hi,count"]
    for p in pts:
        for arm, h in (("with_bos", p.hist_with), ("without_bos", p.hist_without)):
            for c, lo, hi in zip(h.counts, h.edges[:-1], h.edges[1:]):
                rows.append(f"{p.n_terms},{arm},{lo!r},{hi!r},{c}")
    (spec.out / "norm_histograms.csv").write_text("\n".join(rows) + "\n")
    svg.line_chart({"with BOS": ([p.n_terms for p in pts], [p.with_bos.mu for p in pts]),
                    "without BOS": ([p.n_terms for p in pts], [p.without_bos.mu for p in pts])},
                   spec.out / "collapse_scan.svg", "final-layer distance to mean vs sum terms")
    print(TI.collapse_scan_csv(pts), end="")


def cmd_norms(spec, cfg):
    from .model import forward
    model = _checkpoint(spec, cfg)
    text = _opt(spec, cfg, "text", DEFAULT_PERTURB_TEXT)
    ids = np.array([D.BOS] + D.tokenize(text)[: model.config.max_context - 1])
    rec = forward(model, ids, keep_values=True)
    layers = [int(_opt(spec, cfg, "layer"))] if _opt(spec, cfg, "layer") is not None else range(model.config.n_layers)
    heads = [int(_opt(spec, cfg, "head"))] if _opt(spec, cfg, "head") is not None else range(model.config.n_heads)
    rows = ["layer,head,token,value_norm,attention_to_token"]
    for l in layers:
        for h in heads:
            norms = S.head_value_norms(rec, l, h)
            col = rec.attention[l, h].mean(axis=0)
            for t, v in enumerate(norms):
                rows.append(f"{l},{h},{t},{float(v)!r},{float(col[t])!r}")
    (spec.out / "value_norms.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows) - 1} rows")


def cmd_trace_metrics(spec, cfg):
    path = _opt(spec, cfg, "trace")
    if path is None:
        raise UsageError("trace-metrics needs --trace")
    if not (Path(path) / "manifest.txt").exists():
        raise FileNotFoundError(f"trace not found: {path}")
    tm = TI.trace_metrics(path, float(_opt(spec, cfg, "epsilon", 0.3)), int(_opt(spec, cfg, "window", 64)))
    if tm.sinks is not None:
        (spec.out / "trace_sinks.csv").write_text(tm.sinks.to_csv())
        (spec.out / "trace_heatmap.csv").write_text(tm.heatmap_csv())
        order = tm.sinks.sorted_heads()
        svg.heatmap(np.array([[s for _, _, s in order]]), spec.out / "trace_heatmap.svg",
                    "heads sorted by sink score", "head (sorted)", "", cell=4, vmin=0.0, vmax=1.0)
        print(f"sink_rate {tm.sinks.sink_rate:.4f} over {tm.sinks.n_prompts} prompts")
    if tm.collapse:
        (spec.out / "trace_collapse.csv").write_text(tm.collapse_csv())
    for s in tm.skipped:
        print(f"skipped {s}")


HANDLERS = {
    "train": cmd_train, "ablate-context": cmd_ablate_context, "ablate-packing": cmd_ablate_packing,
    "sinks": cmd_sinks, "perturb": cmd_perturb, "bound-check": cmd_bound_check,
    "collapse-scan": cmd_collapse_scan, "norms": cmd_norms, "trace-metrics": cmd_trace_metrics,
}


def run(spec: ExperimentSpec) -> int:
    """Dispatch one experiment; returns a process exit status."""
    if spec.command not in HANDLERS:
        print(build_parser().format_usage(), file=sys.stderr, end="")
        print(f"sinklab: unknown command {spec.command!r}", file=sys.stderr)
        return 2
    try:
        cfg = _read_config(spec)
        spec.out.mkdir(parents=True, exist_ok=True)
        write_provenance(spec, cfg)
        status = HANDLERS[spec.command](spec, cfg)
    except (FileNotFoundError, UsageError, ValueError, KeyError) as e:
        print(f"sinklab {spec.command}: error: {e}", file=sys.stderr)
        return 1
    return int(status or 0)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(spec_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
