"""Command-line entry point.

One subcommand per pipeline: ``train``, ``eval``, ``flops``, ``simulate``,
``annotate``, ``cost-model``, ``kv-report``. Every run resolves its
configuration the same way: preset or config file, then ``--set key=value``
overrides, then ``--seed``. Results go to stdout as JSON; with ``--out`` (or
the MIXREC_OUT_ROOT environment variable) they also land on disk next to a
run manifest that snapshots the exact configuration.

Exit codes: 0 success, 2 configuration rejected (the message names the bad
field), 1 runtime failure (the message names the failing component).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import BACKEND
from .config import (
    ConfigError,
    ModelConfig,
    RouterConfig,
    TrainConfig,
    build_configs,
    parse_config_text,
    serialize_configs,
)
from .flops import budget_for_tokens, forward_flops_per_token, tokens_for_budget
from .kvcache import cache_cost_ratios
from .model import Model, load_checkpoint
from .presets import PRESETS, preset_names, preset_pairs
from .simulate import (
    WorkloadSpec,
    max_batch_size,
    relative_batch_slots,
    sample_workload,
    simulate_depthwise,
    simulate_sequencewise,
    write_trace_csv,
)
from .train import (
    depth_annotation,
    encode_text,
    eval_batches,
    eval_report,
    kv_similarity_report,
    load_corpus,
    make_synthetic_corpus,
    run_training,
    split_stream,
)

_COMPONENT = {
    "train": "train harness",
    "eval": "train harness",
    "annotate": "train harness",
    "kv-report": "train harness",
    "flops": "flops budget",
    "cost-model": "flops budget",
    "simulate": "decode simulator",
}

# sim.* passes through config parsing untyped; the consumer validates.
_SIM_KEYS = {
    "n_requests", "mean_len", "std_len", "seed", "slots", "early_exit",
    "kv_mode", "drain_threshold", "trace",
}


@dataclass
class RunManifest:
    """What a run was: enough to reproduce it and find its outputs."""

    command: str
    config: str
    seed: int
    artifacts: list = field(default_factory=list)
    version: str = __version__
    backend: str = BACKEND
    started: str = ""
    finished: str = ""

    def write(self, path: Path) -> None:
        for art in self.artifacts:
            if not Path(art).exists():
                raise RuntimeError(f"artifact missing at run end: {art}")
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_pairs(config: str) -> dict:
    if config in PRESETS:
        return preset_pairs(config)
    path = Path(config)
    if not path.exists():
        raise ConfigError(
            f"--config {config!r} is neither a preset nor a file; "
            f"presets: {', '.join(preset_names())}"
        )
    return parse_config_text(path.read_text())


def _apply_sets(pairs: dict, sets) -> dict:
    for item in sets or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = value
    return pairs


def _resolve(args) -> tuple:
    """(model cfg, router cfg, train cfg, sim dict) after all overrides."""
    pairs = _load_pairs(args.config) if args.config else {}
    _apply_sets(pairs, args.set)
    mcfg, rcfg, tcfg, sim = build_configs(pairs)
    for key in sim:
        if key not in _SIM_KEYS:
            raise ConfigError(f"unknown config key sim.{key}")
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
        sim["seed"] = str(args.seed)
    return mcfg, rcfg, tcfg, sim


def _out_dir(args) -> Path | None:
    if args.out:
        path = Path(args.out)
    elif os.environ.get("MIXREC_OUT_ROOT"):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        path = Path(os.environ["MIXREC_OUT_ROOT"]) / f"{args.command}-{stamp}"
    else:
        return None
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(payload: dict, out: Path | None, filename: str, manifest=None) -> None:
    text = json.dumps(payload, indent=2)
    print(text)
    if out is not None:
        (out / filename).write_text(text + "\n")
        if manifest is not None:
            manifest.artifacts.append(str(out / filename))


def _finish(manifest: RunManifest, out: Path | None) -> None:
    if out is not None:
        manifest.finished = _now()
        manifest.write(out / "manifest.json")


def _build_model(mcfg: ModelConfig, rcfg: RouterConfig, seed: int) -> Model:
    router = rcfg if rcfg.family != "none" else None
    return Model(mcfg, router, seed=seed)


def _model_from_args(args, mcfg, rcfg, tcfg) -> Model:
    if getattr(args, "checkpoint", None):
        model, _ = load_checkpoint(args.checkpoint)
        return model
    return _build_model(mcfg, rcfg, tcfg.seed)


def _sim_value(sim: dict, key: str, cast, default):
    raw = sim.get(key)
    if raw is None:
        return default
    try:
        if cast is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ConfigError(f"sim.{key}: cannot parse {raw!r} as {cast.__name__}")


def _corpus_stream(tcfg: TrainConfig, out: Path | None):
    """The configured corpus, or a synthetic one (written out when possible)."""
    if tcfg.corpus:
        return load_corpus(tcfg.corpus)
    path = (out / "corpus.txt") if out is not None else None
    if path is None:
        import tempfile

        path = Path(tempfile.mkstemp(suffix=".txt")[1])
    make_synthetic_corpus(path, seed=tcfg.seed)
    return load_corpus(path)


# ---------------------------------------------------------------- subcommands


def _cmd_train(args) -> int:
    mcfg, rcfg, tcfg, _ = _resolve(args)
    out = _out_dir(args)
    manifest = RunManifest("train", serialize_configs(mcfg, rcfg, tcfg),
                           tcfg.seed, started=_now())
    model = _build_model(mcfg, rcfg, tcfg.seed)
    stream = _corpus_stream(tcfg, out)
    summary = run_training(model, tcfg, out_dir=out, stream=stream)
    payload = {
        "nll_step0": summary["nll_step0"],
        "nll_final": summary["nll_final"],
        "steps": summary["steps"],
        "report": summary["report"],
    }
    if out is not None:
        for name in ("metrics.csv", "report.json", "checkpoint.mxrc"):
            manifest.artifacts.append(str(out / name))
    _emit(payload, out, "summary.json", manifest)
    _finish(manifest, out)
    return 0


def _cmd_eval(args) -> int:
    mcfg, rcfg, tcfg, _ = _resolve(args)
    out = _out_dir(args)
    model = _model_from_args(args, mcfg, rcfg, tcfg)
    manifest = RunManifest("eval", serialize_configs(model.cfg, model.router_cfg
                                                    or rcfg, tcfg),
                           tcfg.seed, started=_now())
    stream = _corpus_stream(tcfg, out)
    _, held = split_stream(stream)
    batches = list(eval_batches(held, tcfg.seq_len, tcfg.eval_windows,
                                tcfg.batch_size))
    report = eval_report(model, batches,
                         per_sequence_dead=tcfg.dead_token_per_sequence)
    _emit(report.to_dict(), out, "eval.json", manifest)
    _finish(manifest, out)
    return 0


def _cmd_flops(args) -> int:
    mcfg, rcfg, tcfg, _ = _resolve(args)
    out = _out_dir(args)
    manifest = RunManifest("flops", serialize_configs(mcfg, rcfg, tcfg),
                           tcfg.seed, started=_now())
    report = forward_flops_per_token(mcfg, rcfg)
    payload = report.to_dict()
    if args.budget is not None:
        payload["budget_flops"] = args.budget
        payload["tokens_for_budget"] = tokens_for_budget(args.budget,
                                                         report.total)
    if args.tokens is not None:
        payload["tokens"] = args.tokens
        payload["budget_for_tokens"] = budget_for_tokens(args.tokens,
                                                         report.total)
    print(report.table(), file=sys.stderr)
    _emit(payload, out, "flops.json", manifest)
    _finish(manifest, out)
    return 0


def _cmd_cost_model(args) -> int:
    mcfg, rcfg, tcfg, _ = _resolve(args)
    out = _out_dir(args)
    manifest = RunManifest("cost-model", serialize_configs(mcfg, rcfg, tcfg),
                           tcfg.seed, started=_now())
    caps = rcfg.capacities if rcfg.family != "none" else None
    ratios = {}
    for mode in ("recursion_wise", "recursive_sharing", "hybrid"):
        exact = cache_cost_ratios(mcfg.n_recursions, mode, caps)
        ratios[mode] = {k: {"exact": str(v), "value": float(v)}
                        for k, v in exact.items()}
    payload = {"n_recursions": mcfg.n_recursions, "kv_mode": mcfg.kv_mode,
               "ratios": ratios}
    if args.vram_bytes is not None:
        router = rcfg if rcfg.family != "none" else None
        payload["vram_bytes"] = args.vram_bytes
        payload["max_batch_slots"] = max_batch_size(
            mcfg, args.vram_bytes, router_cfg=router,
            bytes_per_elem=args.bytes_per_elem)
        if args.baseline:
            base_m, base_r, _, _ = build_configs(_load_pairs(args.baseline))
            payload["baseline"] = args.baseline
            payload["relative_batch_slots"] = relative_batch_slots(
                mcfg, base_m, args.vram_bytes, base_slots=args.base_slots,
                bytes_per_elem=args.bytes_per_elem, router_cfg=router)
    _emit(payload, out, "cost_model.json", manifest)
    _finish(manifest, out)
    return 0


def _cmd_simulate(args) -> int:
    mcfg, rcfg, tcfg, sim = _resolve(args)
    out = _out_dir(args)
    manifest = RunManifest("simulate", serialize_configs(mcfg, rcfg, tcfg, sim),
                           tcfg.seed, started=_now())
    spec = WorkloadSpec(
        n_requests=_sim_value(sim, "n_requests", int, 1000),
        mean_len=_sim_value(sim, "mean_len", float, 256.0),
        std_len=_sim_value(sim, "std_len", float, 64.0),
        seed=_sim_value(sim, "seed", int, tcfg.seed),
    )
    early_exit = _sim_value(sim, "early_exit", float, 0.25)
    n_slots = _sim_value(sim, "slots", int, 32)
    kv_mode = _sim_value(sim, "kv_mode", str, mcfg.kv_mode)
    drain = _sim_value(sim, "drain_threshold", int, None)
    want_trace = _sim_value(sim, "trace", bool, False)

    workload = sample_workload(spec, mcfg.n_recursions, early_exit)
    trace = [] if (want_trace and out is not None) else None
    depth = simulate_depthwise(workload, n_slots, mcfg.n_recursions,
                               kv_mode=kv_mode, drain_threshold=drain,
                               trace=trace)
    seq = simulate_sequencewise(workload, n_slots, mcfg.n_recursions,
                                kv_mode=kv_mode)
    payload = {
        "n_requests": spec.n_requests,
        "total_tokens": int(np.sum(workload.lengths)),
        "n_recursions": mcfg.n_recursions,
        "early_exit_fraction": early_exit,
        "slots": n_slots,
        "kv_mode": kv_mode,
        "depthwise": depth.to_dict(),
        "sequencewise": seq.to_dict(),
        "throughput_ratio": depth.tokens_per_step / seq.tokens_per_step,
    }
    if trace is not None:
        write_trace_csv(trace, out / "trace.csv")
        manifest.artifacts.append(str(out / "trace.csv"))
    _emit(payload, out, "simulate.json", manifest)
    _finish(manifest, out)
    return 0


def _cmd_annotate(args) -> int:
    mcfg, rcfg, tcfg, _ = _resolve(args)
    out = _out_dir(args)
    model = _model_from_args(args, mcfg, rcfg, tcfg)
    manifest = RunManifest("annotate", serialize_configs(model.cfg,
                                                         model.router_cfg or rcfg,
                                                         tcfg),
                           tcfg.seed, started=_now())
    text = args.text if args.text is not None else sys.stdin.read()
    pairs = depth_annotation(model, text)
    payload = {
        "text": text,
        "tokens": [{"token": tok, "depth": int(depth)} for tok, depth in pairs],
    }
    _emit(payload, out, "annotate.json", manifest)
    _finish(manifest, out)
    return 0


def _cmd_kv_report(args) -> int:
    mcfg, rcfg, tcfg, _ = _resolve(args)
    out = _out_dir(args)
    model = _model_from_args(args, mcfg, rcfg, tcfg)
    manifest = RunManifest("kv-report", serialize_configs(model.cfg,
                                                          model.router_cfg or rcfg,
                                                          tcfg),
                           tcfg.seed, started=_now())
    if args.text is not None:
        if model.cfg.vocab_size < 258:
            raise ConfigError("--text needs a byte-vocabulary model (>= 258)")
        ids = np.concatenate(([257], encode_text(args.text)))
    else:
        rng = np.random.default_rng(tcfg.seed)
        ids = rng.integers(0, model.cfg.vocab_size,
                           size=min(64, model.cfg.ctx_len))
    ids = ids[: model.cfg.ctx_len].astype(np.int64)[None, :]
    report = kv_similarity_report(model, ids)
    payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
               for k, v in report.items()}
    _emit(payload, out, "kv_report.json", manifest)
    _finish(manifest, out)
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixrec",
        description="Recursive transformer with learned per-token depth: "
                    "training, evaluation, cost accounting, and decode "
                    "simulation.",
    )
    parser.add_argument("--version", action="version",
                        version=f"mixrec {__version__} ({BACKEND} backend)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, text=False):
        p.add_argument("--config", default=None,
                       help="preset name or config file path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override train and simulator seeds")
        if checkpoint:
            p.add_argument("--checkpoint", default=None,
                           help="model checkpoint (.mxrc) to load")
        if text:
            p.add_argument("--text", default=None,
                           help="input text (defaults to stdin)")

    common(sub.add_parser("train", help="train a model on a byte corpus"))
    common(sub.add_parser("eval", help="evaluate a model: NLL, router health, "
                                       "per-depth NLL, KV similarity"),
           checkpoint=True)
    p = sub.add_parser("flops", help="per-token forward FLOPs decomposition")
    common(p)
    p.add_argument("--budget", type=float, default=None,
                   help="FLOPs budget to convert into trainable tokens")
    p.add_argument("--tokens", type=float, default=None,
                   help="token count to convert into a FLOPs budget")
    p = sub.add_parser("cost-model",
                       help="KV cache cost ratios and decode batch capacity")
    common(p)
    p.add_argument("--vram-bytes", type=float, default=None,
                   help="memory budget for batch-capacity accounting")
    p.add_argument("--bytes-per-elem", type=float, default=2.0)
    p.add_argument("--base-slots", type=int, default=32)
    p.add_argument("--baseline", default=None,
                   help="preset or config file for relative slot counts")
    common(sub.add_parser("simulate",
                          help="depth-wise vs sequence-wise decode batching "
                               "on a synthetic workload"))
    common(sub.add_parser("annotate",
                          help="per-token recursion depths for a text"),
           checkpoint=True, text=True)
    common(sub.add_parser("kv-report",
                          help="key/value similarity across unrolled layers"),
           checkpoint=True, text=True)
    return parser


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "flops": _cmd_flops,
    "cost-model": _cmd_cost_model,
    "simulate": _cmd_simulate,
    "annotate": _cmd_annotate,
    "kv-report": _cmd_kv_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        component = _COMPONENT[args.command]
        print(f"{component} failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
