"""Command-line entry point.

Subcommands: pretrain, router-tune, lora-tune, joint-tune, eval, trace,
sweep, baseline. Every run takes a flat-text config (plus --set
overrides), locks its output directory, snapshots the resolved config
there, and writes its reports as CSV/JSON with PNG figures alongside.

Exit codes: 0 success, 2 config error, 3 missing/unusable checkpoint,
4 numeric divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, analysis, plots
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ResolvedConfig, STAGE_LR_DEFAULTS, resolve_config, snapshot
from .data import Corpus, synthetic_corpus, val_batches
from .errors import CheckpointError, ConfigError, DivergenceError
from .model import Model, ModelConfig, apply_lora, module_param_counts
from .objective import SparsityTarget, build_report, rescale_target_for_params
from .routing import AnnealSchedule, decisions_to_csv, init_routers, module_labels
from .training import (
    CONSTANT,
    COSINE_WARMUP,
    RunConfig,
    evaluate,
    joint_tune,
    lora_tune,
    pretrain_dense,
    router_tune,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_CKPT = 3
EXIT_DIVERGED = 4

_STAGE_SCHEDULES = {
    "pretrain": COSINE_WARMUP,
    "router-tune": CONSTANT,
    "lora-tune": COSINE_WARMUP,
    "joint-tune": CONSTANT,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skiplab", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name, help_text in [
        ("pretrain", "dense next-token pretraining of a fresh model"),
        ("router-tune", "stage 1: tune per-module routers on a frozen model"),
        ("lora-tune", "stage 2: recover quality with low-rank adapters"),
        ("joint-tune", "ablation: routers and adapters trained together"),
        ("eval", "held-out perplexity (dense or routed)"),
        ("trace", "redundancy and decision traces"),
        ("sweep", "router tuning across several target sparsities"),
        ("baseline", "static drop of the most redundant modules"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat-text config file")
        p.add_argument("--out", required=True, help="output directory (one run per directory)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, applied after the file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--checkpoint", default=None, help="input checkpoint (overrides run.checkpoint)")
    return parser


@contextmanager
def _lock(outdir: Path):
    lock = outdir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {outdir} is locked by another run ({lock})")
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _dtype(cfg: ResolvedConfig):
    name = cfg["train.dtype"]
    if name not in ("float32", "float64"):
        raise ConfigError(f"train.dtype must be float32 or float64, got {name!r}")
    return np.dtype(name).type


def _model_config(cfg: ResolvedConfig) -> ModelConfig:
    try:
        return ModelConfig(
            n_layers=cfg["model.n_layers"],
            d_model=cfg["model.d_model"],
            n_heads=cfg["model.n_heads"],
            d_ff=cfg["model.d_ff"],
            vocab_size=cfg["model.vocab_size"],
            max_seq_len=cfg["model.max_seq_len"],
            rms_eps=cfg["model.rms_eps"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _corpus(cfg: ResolvedConfig) -> Corpus:
    spec = cfg["data.corpus"]
    if spec == "synthetic":
        blob = synthetic_corpus(cfg["data.synthetic_bytes"], seed=cfg["data.seed"])
        return Corpus.from_bytes(blob, source="synthetic")
    paths = [p.strip() for p in spec.split(",") if p.strip()]
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"corpus file not found: {p}")
    return Corpus.from_files(paths)


def _target(cfg: ResolvedConfig, model_config: ModelConfig) -> SparsityTarget:
    mode = cfg["target.mode"]
    t = cfg["target.T"]
    if mode == "params":
        t = rescale_target_for_params(t, module_param_counts(model_config),
                                      attention_share=cfg["target.attention_share"])
    elif mode != "modules":
        raise ConfigError(f"target.mode must be 'modules' or 'params', got {mode!r}")
    try:
        return SparsityTarget(T=t, alpha=cfg["target.alpha"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _run_config(cfg: ResolvedConfig, stage: str, model_config: ModelConfig,
                steps: int | None = None, with_target: bool = False) -> RunConfig:
    steps = cfg["train.steps"] if steps is None else steps
    lr = cfg["train.lr"] if cfg["train.lr"] is not None else STAGE_LR_DEFAULTS[stage]
    if cfg["train.seq_len"] > model_config.max_seq_len:
        raise ConfigError(
            f"train.seq_len={cfg['train.seq_len']} exceeds model.max_seq_len={model_config.max_seq_len}"
        )
    anneal_steps = cfg["anneal.steps"] or steps
    return RunConfig(
        stage=stage.replace("-", "_"),
        steps=steps,
        batch_size=cfg["train.batch_size"],
        seq_len=cfg["train.seq_len"],
        lr=lr,
        lr_schedule=_STAGE_SCHEDULES[stage],
        weight_decay=cfg["train.weight_decay"],
        grad_clip=cfg["train.grad_clip"],
        seed=cfg["train.seed"],
        target=_target(cfg, model_config) if with_target else None,
        anneal=AnnealSchedule(cfg["anneal.tau_start"], cfg["anneal.tau_end"],
                              total_steps=max(1, min(anneal_steps, steps))),
        log_every=cfg["train.log_every"],
        eval_batches=cfg["train.eval_batches"],
    )


def _load_ckpt(cfg: ResolvedConfig, args) -> tuple[Model, list]:
    path = args.checkpoint or cfg["run.checkpoint"]
    if not path:
        raise CheckpointError("no input checkpoint given (use --checkpoint or run.checkpoint)")
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    expect = _model_config(cfg) if cfg.was_set("model.") else None
    return load_checkpoint(path, expect_config=expect, dtype=_dtype(cfg), seed=cfg["train.seed"])


def _write_log(log, outdir: Path) -> None:
    log.write_ndjson(outdir / "trainlog.ndjson")
    log.write_curves_csv(outdir / "curves.csv")
    plots.plot_train_curves(log, outdir / "curves.png")


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _routed_reports(model, routers, corpus, rc, target, outdir: Path) -> None:
    skips = analysis.collect_decision_traces(model, routers, corpus, rc)
    report = build_report(skips, model.module_param_counts(), target=target)
    report.to_json(outdir / "sparsity_report.json")
    plots.plot_module_type_sparsity(report, outdir / "module_sparsity.png")
    first = skips[0]
    decisions_to_csv(first, outdir / "decisions.csv")
    exec_matrix = analysis.TraceMatrix(
        values=1.0 - first.astype(np.float64),
        kind="execution",
        row_labels=module_labels(model.config.n_layers),
        meta={"config_hash": analysis.config_hash(model.config)},
    )
    plots.plot_trace_heatmap(exec_matrix, outdir / "decisions.png", title="execution map (1 = executed)")


# -- subcommands -------------------------------------------------------


def cmd_pretrain(args, cfg: ResolvedConfig, outdir: Path) -> int:
    mc = _model_config(cfg)
    corpus = _corpus(cfg)
    model = Model(mc, dtype=_dtype(cfg), seed=cfg["train.seed"])
    rc = _run_config(cfg, "pretrain", mc)
    log = pretrain_dense(model, corpus, rc)
    save_checkpoint(model, None, outdir / "checkpoint.skpt")
    _write_log(log, outdir)
    print(f"pretrain: final lm loss {log.summary.get('final_lm_loss'):.4f}, "
          f"val ppl {log.summary.get('val_ppl'):.3f}")
    return EXIT_OK


def cmd_router_tune(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, _ = _load_ckpt(cfg, args)
    corpus = _corpus(cfg)
    rc = _run_config(cfg, "router-tune", model.config, with_target=True)
    routers = init_routers(model.config, seed=rc.seed, dtype=model.dtype)
    log = router_tune(model, routers, corpus, rc)
    save_checkpoint(model, routers, outdir / "checkpoint.skpt")
    _write_log(log, outdir)
    _routed_reports(model, routers, corpus, rc, rc.target, outdir)
    print(f"router-tune: eval r {log.summary['eval_r']:.4f} (target {rc.target.T}), "
          f"eval ppl {log.summary['eval_ppl']:.3f}")
    return EXIT_OK


def cmd_lora_tune(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, routers = _load_ckpt(cfg, args)
    if not routers:
        raise CheckpointError("lora-tune needs a router-tuned checkpoint (none found in file)")
    corpus = _corpus(cfg)
    apply_lora(model, rank=cfg["lora.rank"], scale=cfg["lora.scale"], seed=cfg["train.seed"])
    rc = _run_config(cfg, "lora-tune", model.config)
    log = lora_tune(model, routers, corpus, rc)
    save_checkpoint(model, routers, outdir / "checkpoint.skpt")
    _write_log(log, outdir)
    _routed_reports(model, routers, corpus, rc, None, outdir)
    print(f"lora-tune: eval ppl {log.summary['eval_ppl']:.3f} at r {log.summary['eval_r']:.4f}")
    return EXIT_OK


def cmd_joint_tune(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, _ = _load_ckpt(cfg, args)
    corpus = _corpus(cfg)
    rc = _run_config(cfg, "joint-tune", model.config, with_target=True)
    routers = init_routers(model.config, seed=rc.seed, dtype=model.dtype)
    apply_lora(model, rank=cfg["lora.rank"], scale=cfg["lora.scale"], seed=cfg["train.seed"])
    log = joint_tune(model, routers, corpus, rc)
    save_checkpoint(model, routers, outdir / "checkpoint.skpt")
    _write_log(log, outdir)
    _routed_reports(model, routers, corpus, rc, rc.target, outdir)
    print(f"joint-tune: eval r {log.summary['eval_r']:.4f}, eval ppl {log.summary['eval_ppl']:.3f}")
    return EXIT_OK


def cmd_eval(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, routers = _load_ckpt(cfg, args)
    corpus = _corpus(cfg)
    rc = _run_config(cfg, "router-tune", model.config)
    routed = bool(routers) and cfg["eval.mode"] != "dense"
    if routed:
        ev = evaluate(model, corpus, rc, routers=routers)
        _routed_reports(model, routers, corpus, rc, None, outdir)
    else:
        ev = evaluate(model, corpus, rc)
    payload = {"mode": "routed" if routed else "dense", **ev}
    _write_json(payload, outdir / "eval.json")
    line = f"eval ({payload['mode']}): ppl {ev['ppl']:.4f}"
    if "r" in ev:
        line += f", realized r {ev['r']:.4f}"
    print(line)
    return EXIT_OK


def cmd_trace(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, routers = _load_ckpt(cfg, args)
    corpus = _corpus(cfg)
    n = min(cfg["trace.tokens"], model.config.max_seq_len, len(corpus.val_tokens))
    if n < 2:
        raise ConfigError("validation region too small to trace")
    seq = corpus.val_tokens[:n]
    trace = analysis.cosine_trace(model, seq)
    trace.to_csv(outdir / "cosine.csv")
    trace.sidecar(outdir / "cosine.meta.json")
    plots.plot_trace_heatmap(trace, outdir / "cosine.png", title="input/output cosine per module")
    if routers:
        from dataclasses import replace

        rc = _run_config(cfg, "router-tune", model.config)
        rc = replace(rc, eval_batches=max(1, cfg["trace.sequences"] // rc.batch_size))
        skips = analysis.collect_decision_traces(model, routers, corpus, rc)
        stride = cfg["trace.stride"] or cfg["trace.window"]
        curves = analysis.redundancy_shift(skips, cfg["trace.window"], stride)
        analysis.shift_to_csv(curves, outdir / "redundancy_shift.csv")
        if curves:
            plots.plot_redundancy_shift(curves, outdir / "redundancy_shift.png")
        _routed_reports(model, routers, corpus, rc, None, outdir)
    print(f"trace: wrote cosine map for {n} tokens"
          + (", decision traces, and redundancy shift" if routers else ""))
    return EXIT_OK


def cmd_sweep(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, _ = _load_ckpt(cfg, args)
    corpus = _corpus(cfg)
    try:
        targets = [float(t) for t in cfg["sweep.targets"].split(",") if t.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"sweep.targets: {exc}") from exc
    if not targets:
        raise ConfigError("sweep.targets is empty")
    rc = _run_config(cfg, "router-tune", model.config, steps=cfg["sweep.steps"], with_target=True)
    result = analysis.sparsity_sweep(model, corpus, targets, rc)
    dense_ppl = evaluate(model, corpus, rc)["ppl"]
    result.to_csv(outdir / "sweep.csv")
    result.to_json(outdir / "sweep.json")
    plots.plot_sweep(result, outdir / "sweep.png", dense_ppl=dense_ppl)
    _write_json({"dense_ppl": dense_ppl}, outdir / "sweep_reference.json")
    for e in result.entries:
        print(f"sweep: T={e.target_T:.2f} r={e.realized_r:.4f} ppl={e.ppl:.3f}")
    return EXIT_OK


def cmd_baseline(args, cfg: ResolvedConfig, outdir: Path) -> int:
    model, _ = _load_ckpt(cfg, args)
    corpus = _corpus(cfg)
    raw = cfg["baseline.budget"]
    try:
        budget: int | float = int(raw)
    except ValueError:
        try:
            budget = float(raw)
        except ValueError as exc:
            raise ConfigError(f"baseline.budget: cannot parse {raw!r}") from exc
    S = min(cfg["train.seq_len"], model.config.max_seq_len)
    n_calib = max(1, min(8, (len(corpus.train_tokens)) // S))
    calib = corpus.train_tokens[: n_calib * S].reshape(n_calib, S)
    try:
        result = analysis.static_drop_baseline(model, calib, budget, corpus.val_tokens, seq_len=S)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dense_ppl = analysis.perplexity(model, corpus.val_tokens, seq_len=S)
    labels = module_labels(model.config.n_layers)
    _write_json({
        "budget": budget,
        "dropped": result.dropped,
        "mask": [int(v) for v in result.mask],
        "ppl": result.ppl,
        "dense_ppl": dense_ppl,
    }, outdir / "baseline.json")
    with open(outdir / "importance.csv", "w") as fh:
        fh.write("module,mean_cosine,dropped\n")
        for label, score, keep in zip(labels, result.redundancy, result.mask):
            fh.write(f"{label},{score!r},{int(1 - keep)}\n")
    plots.plot_module_importance(result.redundancy, labels, result.mask, outdir / "importance.png")
    print(f"baseline: dropped {len(result.dropped)} modules, ppl {result.ppl:.3f} (dense {dense_ppl:.3f})")
    return EXIT_OK


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "router-tune": cmd_router_tune,
    "lora-tune": cmd_lora_tune,
    "joint-tune": cmd_joint_tune,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "sweep": cmd_sweep,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set)
        if args.seed is not None:
            cfg.values["train.seed"] = args.seed
            cfg.explicit.add("train.seed")
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        with _lock(outdir):
            snapshot(cfg.values, outdir / "config.resolved.txt")
            _write_json({"subcommand": args.cmd, "version": __version__,
                         "seed": cfg["train.seed"]}, outdir / "run.json")
            return _COMMANDS[args.cmd](args, cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CKPT
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # contract errors and everything else
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
