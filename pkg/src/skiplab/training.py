"""Training stages: dense pretraining, router tuning, adapter recovery,
and the joint-training ablation.

Stage contracts are absolute. Pretraining updates every base weight.
Router tuning freezes the model and updates only the 2L router
projections under the combined LM + sparsity objective, with sampled
straight-through routing and a linearly annealed temperature. Adapter
recovery freezes model and routers, routes deterministically (argmax),
and trains only the low-rank adapters on the LM loss with a cosine
schedule. The joint ablation updates routers and adapters together
under the combined objective.

All randomness derives from the run seed, so a fixed seed reproduces
the training log bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Corpus, make_batches, val_batches
from .errors import DivergenceError
from .model import Model
from .objective import SparsityTarget, compute_sparsity, sparsity_loss, total_loss
from .routing import (
    ARGMAX,
    SAMPLED_ST,
    AnnealSchedule,
    RouterState,
    forward_routed,
    router_parameters,
)
from .tensor import Tensor

CONSTANT = "constant"
COSINE_WARMUP = "cosine_warmup"

STAGE_PRETRAIN = "pretrain"
STAGE_ROUTER = "router_tune"
STAGE_LORA = "lora_tune"
STAGE_JOINT = "joint_tune"


@dataclass
class RunConfig:
    stage: str
    steps: int
    batch_size: int = 8
    seq_len: int = 256
    lr: float = 2e-3
    lr_schedule: str = CONSTANT
    warmup_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    target: SparsityTarget | None = None
    anneal: AnnealSchedule | None = None
    log_every: int = 10
    eval_batches: int = 8

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == CONSTANT:
            return self.lr
        if self.lr_schedule != COSINE_WARMUP:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        warmup = max(1, int(self.warmup_ratio * self.steps))
        if step < warmup:
            return self.lr * (step + 1) / warmup
        span = max(1, self.steps - warmup)
        progress = (step - warmup) / span
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainLog:
    stage: str
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, **kv) -> None:
        self.records.append(kv)

    def write_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": self.summary}, sort_keys=True) + "\n")

    def write_curves_csv(self, path) -> None:
        if not self.records:
            with open(path, "w") as fh:
                fh.write("step\n")
            return
        keys = list(self.records[0].keys())
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for rec in self.records:
                fh.write(",".join(_fmt(rec.get(k)) for k in keys) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class AdamW:
    """Decoupled-weight-decay Adam over raw parameter buffers."""

    def __init__(self, params: list[Tensor], cfg: RunConfig):
        self.params = params
        self.beta1, self.beta2 = cfg.beta1, cfg.beta2
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update + lr * self.weight_decay * p.data).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def checksum_tensors(named: dict[str, Tensor]) -> dict[str, str]:
    """Per-tensor content hashes; used to assert freeze contracts."""
    return {
        name: hashlib.sha1(np.ascontiguousarray(t.data).tobytes()).hexdigest()
        for name, t in named.items()
    }


def _check_finite(value: float, step: int, stage: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{stage}: non-finite loss at step {step}")


def evaluate(model: Model, corpus: Corpus, cfg: RunConfig,
             routers: list[RouterState] | None = None,
             forced: np.ndarray | None = None,
             mode: str = ARGMAX) -> dict:
    """Held-out LM evaluation on the validation tail.

    Routed evaluation (argmax or forced) also reports the realized
    sparsity of its decision trace.
    """
    batches = val_batches(corpus, cfg.batch_size, cfg.seq_len, max_batches=cfg.eval_batches)
    if not batches:
        raise ValueError("validation region too small for evaluation")
    total_nll = 0.0
    total_pos = 0
    total_skips = 0
    total_slots = 0
    for batch in batches:
        if routers is None and forced is None:
            logits = model.forward_dense(batch.inputs)
        else:
            rmode = "forced" if forced is not None else mode
            rf = forward_routed(model, routers or [], batch.inputs, rmode, forced=forced)
            logits = rf.logits
            total_skips += int(rf.skips.sum())
            total_slots += rf.skips.size
        nll = T.cross_entropy(logits, batch.targets).item()
        n = batch.targets.size
        total_nll += nll * n
        total_pos += n
    out = {"ppl": math.exp(total_nll / total_pos), "nll": total_nll / total_pos}
    if total_slots:
        out["r"] = total_skips / total_slots
    return out


# -- stages ------------------------------------------------------------


def pretrain_dense(model: Model, corpus: Corpus, cfg: RunConfig) -> TrainLog:
    """Next-token training of all base weights (desk-scale stand-in for
    a pretrained checkpoint)."""
    model.set_trainable(True)
    params = model.base_parameters()
    opt = AdamW(params, cfg)
    log = TrainLog(stage=STAGE_PRETRAIN)
    batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, seed=cfg.seed)
    for step in range(cfg.steps):
        batch = next(batches)
        logits = model.forward_dense(batch.inputs)
        loss = T.cross_entropy(logits, batch.targets)
        lm = loss.item()
        _check_finite(lm, step, STAGE_PRETRAIN)
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        lr = cfg.lr_at(step)
        opt.step(lr)
        opt.zero_grad()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step=step, lm_loss=lm, lr=lr)
    if cfg.steps > 0:
        ev = evaluate(model, corpus, cfg)
        log.summary = {"final_lm_loss": log.records[-1]["lm_loss"], "val_ppl": ev["ppl"]}
    return log


def router_tune(model: Model, routers: list[RouterState], corpus: Corpus,
                cfg: RunConfig) -> TrainLog:
    """Stage 1: optimize only the router projections under the combined
    LM + sparsity objective with sampled straight-through routing."""
    if cfg.target is None:
        raise ValueError("router_tune requires a sparsity target")
    if cfg.lr_schedule != CONSTANT:
        raise ValueError("router tuning uses a constant learning rate")
    anneal = cfg.anneal or AnnealSchedule(total_steps=max(1, cfg.steps))
    model.set_trainable(False, adapters=False)
    for r in routers:
        r.w.requires_grad = True
    params = router_parameters(routers)
    opt = AdamW(params, cfg)
    log = TrainLog(stage=STAGE_ROUTER)
    batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, seed=cfg.seed)
    gumbel_rng = np.random.default_rng([cfg.seed, 1])
    for step in range(cfg.steps):
        batch = next(batches)
        tau = anneal.tau(step)
        rf = forward_routed(model, routers, batch.inputs, SAMPLED_ST, tau=tau, rng=gumbel_rng)
        lm = T.cross_entropy(rf.logits, batch.targets)
        r_t = compute_sparsity(rf.skip_channel)
        sp = sparsity_loss(r_t, cfg.target)
        loss = total_loss(lm, sp, cfg.target.alpha)
        _check_finite(loss.item(), step, STAGE_ROUTER)
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        lr = cfg.lr_at(step)
        opt.step(lr)
        opt.zero_grad()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step=step, lm_loss=lm.item(), sparsity_loss=sp.item(),
                       r=float(rf.skips.mean()), tau=tau, lr=lr)
    ev = evaluate(model, corpus, cfg, routers=routers, mode=ARGMAX)
    log.summary = {
        "target_T": cfg.target.T,
        "alpha": cfg.target.alpha,
        "eval_ppl": ev["ppl"],
        "eval_r": ev.get("r", 0.0),
    }
    return log


def lora_tune(model: Model, routers: list[RouterState], corpus: Corpus,
              cfg: RunConfig) -> TrainLog:
    """Stage 2: freeze routers, route deterministically, and train only
    the adapters on the LM loss."""
    if not routers:
        raise ValueError("lora_tune requires tuned routers")
    adapters = model.adapter_parameters()
    if not adapters:
        raise ValueError("lora_tune requires attached adapters")
    if cfg.lr_schedule != COSINE_WARMUP:
        raise ValueError("adapter recovery uses the cosine-with-warmup schedule")
    model.set_trainable(False, adapters=True)
    for r in routers:
        r.w.requires_grad = False
    opt = AdamW(adapters, cfg)
    log = TrainLog(stage=STAGE_LORA)
    batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, seed=cfg.seed)
    for step in range(cfg.steps):
        batch = next(batches)
        rf = forward_routed(model, routers, batch.inputs, ARGMAX)
        loss = T.cross_entropy(rf.logits, batch.targets)
        lm = loss.item()
        _check_finite(lm, step, STAGE_LORA)
        loss.backward()
        clip_grad_norm(adapters, cfg.grad_clip)
        lr = cfg.lr_at(step)
        opt.step(lr)
        opt.zero_grad()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step=step, lm_loss=lm, r=float(rf.skips.mean()), lr=lr)
    ev = evaluate(model, corpus, cfg, routers=routers, mode=ARGMAX)
    log.summary = {"eval_ppl": ev["ppl"], "eval_r": ev.get("r", 0.0)}
    return log


def joint_tune(model: Model, routers: list[RouterState], corpus: Corpus,
               cfg: RunConfig) -> TrainLog:
    """Ablation: routers and adapters optimized simultaneously under the
    combined objective."""
    if cfg.target is None:
        raise ValueError("joint_tune requires a sparsity target")
    adapters = model.adapter_parameters()
    if not adapters:
        raise ValueError("joint_tune requires attached adapters")
    anneal = cfg.anneal or AnnealSchedule(total_steps=max(1, cfg.steps))
    model.set_trainable(False, adapters=True)
    for r in routers:
        r.w.requires_grad = True
    params = router_parameters(routers) + adapters
    opt = AdamW(params, cfg)
    log = TrainLog(stage=STAGE_JOINT)
    batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, seed=cfg.seed)
    gumbel_rng = np.random.default_rng([cfg.seed, 1])
    for step in range(cfg.steps):
        batch = next(batches)
        tau = anneal.tau(step)
        rf = forward_routed(model, routers, batch.inputs, SAMPLED_ST, tau=tau, rng=gumbel_rng)
        lm = T.cross_entropy(rf.logits, batch.targets)
        sp = sparsity_loss(compute_sparsity(rf.skip_channel), cfg.target)
        loss = total_loss(lm, sp, cfg.target.alpha)
        _check_finite(loss.item(), step, STAGE_JOINT)
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        lr = cfg.lr_at(step)
        opt.step(lr)
        opt.zero_grad()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step=step, lm_loss=lm.item(), sparsity_loss=sp.item(),
                       r=float(rf.skips.mean()), tau=tau, lr=lr)
    ev = evaluate(model, corpus, cfg, routers=routers, mode=ARGMAX)
    log.summary = {
        "target_T": cfg.target.T,
        "eval_ppl": ev["ppl"],
        "eval_r": ev.get("r", 0.0),
    }
    return log
