"""Measurement instruments: per-token redundancy traces, perplexity,
sparsity breakdowns, redundancy-shift curves, the static-drop baseline,
and the target-sparsity sweep.

The redundancy metric for module i at token t is the cosine similarity
between the residual-stream states entering module i and module i+1:
values near 1 mean the module barely transformed that token (redundant),
values near -1 mean it flipped the direction entirely.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Corpus, sliding_windows, val_batches
from .model import Model
from .objective import SparsityTarget
from .routing import ARGMAX, RouterState, forward_routed, module_labels


@dataclass
class TraceMatrix:
    """A 2L x S per-module per-token map (cosine values or decisions)."""

    values: np.ndarray
    kind: str  # "cosine" or "execution"
    row_labels: list[str]
    n_zero_norm: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("TraceMatrix must be 2-D (modules x tokens)")
        if len(self.row_labels) != self.values.shape[0]:
            raise ValueError("row label count does not match matrix rows")

    def to_csv(self, path) -> None:
        S = self.values.shape[1]
        with open(path, "w") as fh:
            fh.write("module," + ",".join(f"t{i}" for i in range(S)) + "\n")
            for label, row in zip(self.row_labels, self.values):
                fh.write(label + "," + ",".join(repr(float(v)) for v in row) + "\n")

    def sidecar(self, path) -> None:
        payload = {
            "kind": self.kind,
            "rows": self.row_labels,
            "shape": list(self.values.shape),
            "n_zero_norm": self.n_zero_norm,
            **self.meta,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def config_hash(config) -> str:
    return hashlib.sha1(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def _cosine_rows(states: list[np.ndarray]) -> tuple[np.ndarray, int]:
    """Cosine between consecutive residual states; states are (B, S, d)."""
    rows = []
    zero_flags = 0
    for cur, nxt in zip(states[:-1], states[1:]):
        dot = np.einsum("bsd,bsd->bs", cur, nxt)
        n0 = np.linalg.norm(cur, axis=-1)
        n1 = np.linalg.norm(nxt, axis=-1)
        denom = n0 * n1
        zero = denom == 0.0
        zero_flags += int(zero.sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(zero, 1.0, dot / np.where(zero, 1.0, denom))
        rows.append(cos)
    return np.stack(rows, axis=1), zero_flags  # (B, 2L, S)


def cosine_trace(model: Model, tokens: np.ndarray) -> TraceMatrix:
    """Token-wise input/output cosine similarity for every module on one
    sequence. Zero-norm states count as unchanged (cosine 1) and are
    flagged in the result."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("cosine_trace takes a single token sequence")
    _, states = model.forward_dense(tokens[None, :], capture_states=True)
    mat, zeros = _cosine_rows(states)
    return TraceMatrix(
        values=mat[0],
        kind="cosine",
        row_labels=module_labels(model.config.n_layers),
        n_zero_norm=zeros,
        meta={"config_hash": config_hash(model.config)},
    )


def mean_module_redundancy(model: Model, sequences: np.ndarray) -> np.ndarray:
    """Mean-over-tokens cosine per module, pooled over (N, S) sequences."""
    sequences = np.asarray(sequences)
    if sequences.ndim == 1:
        sequences = sequences[None, :]
    _, states = model.forward_dense(sequences, capture_states=True)
    mat, _ = _cosine_rows(states)
    return mat.mean(axis=(0, 2))


def perplexity(model: Model, eval_tokens: np.ndarray, seq_len: int | None = None,
               routers: list[RouterState] | None = None,
               forced: np.ndarray | None = None, batch_size: int = 8) -> float:
    """exp(mean next-token NLL) over an evaluation stream, chunked into
    consecutive non-overlapping windows."""
    eval_tokens = np.asarray(eval_tokens)
    if eval_tokens.size < 2:
        raise ValueError("evaluation stream must hold at least two tokens")
    S = seq_len or min(model.config.max_seq_len, eval_tokens.size - 1)
    n_windows = (eval_tokens.size - 1) // S
    if n_windows == 0:
        raise ValueError("evaluation stream shorter than one window")
    total_nll = 0.0
    total_pos = 0
    for lo in range(0, n_windows * S, S * batch_size):
        starts = range(lo, min(lo + S * batch_size, n_windows * S), S)
        block = np.stack([eval_tokens[s: s + S + 1] for s in starts])
        inputs, targets = block[:, :-1], block[:, 1:]
        if routers is None and forced is None:
            logits = model.forward_dense(inputs)
        else:
            rf = forward_routed(model, routers or [], inputs,
                                "forced" if forced is not None else ARGMAX,
                                forced=forced)
            logits = rf.logits
        total_nll += T.cross_entropy(logits, targets).item() * targets.size
        total_pos += targets.size
    return math.exp(total_nll / total_pos)


@dataclass
class ModuleTypeSparsity:
    attention: float
    mlp: float
    per_depth: list[dict]


def module_type_sparsity(skips: np.ndarray) -> ModuleTypeSparsity:
    """Skip fractions restricted to attention rows, MLP rows, and per layer."""
    skips = np.asarray(skips, dtype=np.float64)
    if skips.ndim == 2:
        skips = skips[None]
    per_module = skips.mean(axis=(0, 2))
    n_layers = per_module.size // 2
    return ModuleTypeSparsity(
        attention=float(per_module[0::2].mean()),
        mlp=float(per_module[1::2].mean()),
        per_depth=[
            {"layer": i, "attention": float(per_module[2 * i]), "mlp": float(per_module[2 * i + 1])}
            for i in range(n_layers)
        ],
    )


def redundancy_shift(skips: np.ndarray, window: int, stride: int | None = None) -> list[dict]:
    """Execution (non-skip) ratios of attention and MLP modules inside a
    sliding window over token positions, averaged over sequences."""
    skips = np.asarray(skips, dtype=np.float64)
    if skips.ndim == 2:
        skips = skips[None]
    stride = stride or window
    S = skips.shape[2]
    out = []
    for start in sliding_windows(S, window, stride):
        chunk = skips[:, :, start: start + window]
        out.append({
            "start": start,
            "attention_exec_ratio": float(1.0 - chunk[:, 0::2, :].mean()),
            "mlp_exec_ratio": float(1.0 - chunk[:, 1::2, :].mean()),
        })
    return out


def shift_to_csv(curves: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("start,attention_exec_ratio,mlp_exec_ratio\n")
        for row in curves:
            fh.write(f"{row['start']},{row['attention_exec_ratio']!r},{row['mlp_exec_ratio']!r}\n")


@dataclass
class StaticDropResult:
    mask: np.ndarray           # (2L,) execute indicator; 0 = dropped
    dropped: list[str]
    redundancy: np.ndarray     # mean cosine per module
    ppl: float


def static_drop_baseline(model: Model, calib_tokens: np.ndarray, budget,
                         eval_tokens: np.ndarray, seq_len: int | None = None) -> StaticDropResult:
    """Permanently drop the globally most redundant modules.

    Redundancy is the mean input/output cosine per module over the
    calibration sequences; the most redundant modules are skipped for
    every token. `budget` is a module count (int) or a parameter-ratio
    target (float in (0,1))."""
    n_modules = model.config.n_modules
    redundancy = mean_module_redundancy(model, calib_tokens)
    order = np.argsort(-redundancy, kind="stable")
    if isinstance(budget, (int, np.integer)) and not isinstance(budget, bool):
        if not 0 <= budget <= n_modules:
            raise ValueError(f"budget {budget} outside [0, {n_modules}]")
        drop = list(order[:budget])
    else:
        ratio = float(budget)
        if not 0.0 <= ratio <= 1.0:
            raise ValueError("parameter-ratio budget must lie in [0, 1]")
        weights = model.module_param_counts().astype(np.float64)
        weights /= weights.sum()
        drop, acc = [], 0.0
        for idx in order:
            if acc >= ratio:
                break
            drop.append(int(idx))
            acc += weights[idx]
    mask = np.ones(n_modules, dtype=np.int8)
    mask[list(drop)] = 0
    labels = module_labels(model.config.n_layers)
    ppl = perplexity(model, eval_tokens, seq_len=seq_len, forced=mask)
    return StaticDropResult(
        mask=mask,
        dropped=[labels[i] for i in sorted(int(d) for d in drop)],
        redundancy=redundancy,
        ppl=ppl,
    )


@dataclass
class SweepEntry:
    target_T: float
    realized_r: float
    ppl: float
    attention_sparsity: float
    mlp_sparsity: float


@dataclass
class SweepResult:
    entries: list[SweepEntry]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("target_T,realized_r,ppl,attention_sparsity,mlp_sparsity\n")
            for e in self.entries:
                fh.write(f"{e.target_T!r},{e.realized_r!r},{e.ppl!r},"
                         f"{e.attention_sparsity!r},{e.mlp_sparsity!r}\n")

    def to_json(self, path) -> None:
        payload = [e.__dict__ for e in self.entries]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def sparsity_sweep(model: Model, corpus: Corpus, targets: list[float], cfg) -> SweepResult:
    """Router-tune a fresh set of routers per target sparsity and report
    realized sparsity, held-out perplexity, and the per-type breakdown."""
    from dataclasses import replace

    from .routing import init_routers
    from .training import evaluate, router_tune

    entries = []
    for i, t in enumerate(sorted(targets)):
        run_cfg = replace(cfg, target=SparsityTarget(T=t, alpha=cfg.target.alpha if cfg.target else 8.0))
        routers = init_routers(model.config, seed=run_cfg.seed + 1000 + i, dtype=model.dtype)
        router_tune(model, routers, corpus, run_cfg)
        ev = evaluate(model, corpus, run_cfg, routers=routers, mode=ARGMAX)
        skips = collect_decision_traces(model, routers, corpus, run_cfg)
        types = module_type_sparsity(skips)
        entries.append(SweepEntry(
            target_T=t,
            realized_r=ev.get("r", 0.0),
            ppl=ev["ppl"],
            attention_sparsity=types.attention,
            mlp_sparsity=types.mlp,
        ))
    return SweepResult(entries=entries)


def collect_decision_traces(model: Model, routers: list[RouterState], corpus: Corpus, cfg) -> np.ndarray:
    """Argmax-mode skip traces over the validation tail, (N, 2L, S)."""
    batches = val_batches(corpus, cfg.batch_size, cfg.seq_len, max_batches=cfg.eval_batches)
    parts = [forward_routed(model, routers, b.inputs, ARGMAX).skips for b in batches]
    return np.concatenate(parts, axis=0)
