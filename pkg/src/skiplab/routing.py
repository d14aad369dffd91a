"""Per-module token routers: Gumbel-Softmax sampling with
straight-through estimation, and the gated residual update they drive.

Each of the 2L transformer modules owns a bias-free 2-way linear
projection of the residual-stream state entering it. Channel 0 is the
skip logit, channel 1 the execute logit. Three routing modes:

- ``sampled_st``: Gumbel noise + temperature softmax, hardened with a
  straight-through estimator (training mode for router tuning).
- ``argmax``: deterministic, noise-free hard decisions straight from
  the router logits (evaluation and adapter-recovery mode).
- ``forced``: decisions supplied by the caller (dense/all-skip checks,
  static masks, random-mask baselines).

Ties prefer execute. The token update for every module is

    x_next = g[1] * (f(x) + x) + g[0] * x

with g exactly one-hot in the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Model, causal_mask
from .tensor import Tensor

SKIP, EXEC = 0, 1

SAMPLED_ST = "sampled_st"
ARGMAX = "argmax"
FORCED = "forced"

_CLAMP = 1e-12


@dataclass
class AnnealSchedule:
    """Linear temperature schedule; holds tau_end once exhausted."""

    tau_start: float = 5.0
    tau_end: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def tau(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.tau_start + (self.tau_end - self.tau_start) * frac


class RouterState:
    """Bias-free 2-way projection for one module's skip/execute choice."""

    def __init__(self, module_id: int, d_model: int, rng: np.random.Generator, dtype=np.float32):
        self.module_id = module_id
        self.w = T.tensor(rng.normal(0.0, 0.02, size=(d_model, 2)), requires_grad=True, dtype=dtype)

    def logits(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w)


def init_routers(config, seed: int = 0, dtype=np.float32) -> list[RouterState]:
    rng = np.random.default_rng(seed)
    return [RouterState(i, config.d_model, rng, dtype) for i in range(config.n_modules)]


def router_parameters(routers: list[RouterState]) -> list[Tensor]:
    return [r.w for r in routers]


@dataclass
class RouteDecision:
    soft: np.ndarray
    hard: np.ndarray
    mode: str


def gumbel_noise(u):
    """Inverse-transform Gumbel(0,1) sample: -log(-log(u))."""
    u = np.clip(np.asarray(u, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    return gumbel_noise(rng.random(shape)).astype(dtype)


def gumbel_softmax(log_pi: Tensor, g: np.ndarray, tau: float) -> Tensor:
    """softmax((log_pi + g) / tau); the noise g carries no gradient."""
    if tau <= 0:
        raise ValueError("gumbel_softmax: tau must be positive")
    noisy = T.add(log_pi, T.tensor(g, dtype=log_pi.dtype))
    return T.softmax(T.mul(noisy, 1.0 / tau), axis=-1)


def hard_decisions(soft_vals: np.ndarray) -> np.ndarray:
    """One-hot argmax over the trailing pair; ties prefer execute."""
    exec_wins = soft_vals[..., EXEC] >= soft_vals[..., SKIP]
    hard = np.empty_like(soft_vals)
    hard[..., EXEC] = exec_wins
    hard[..., SKIP] = ~exec_wins
    return hard


def straight_through(soft: Tensor) -> Tensor:
    """Hard one-hot forward, soft gradient backward."""
    return T.harden(soft, hard_decisions(soft.data))


def _sampled_gates(router: RouterState, x: Tensor, tau: float,
                   rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    logits = router.logits(x)
    log_pi = T.log_softmax(logits, axis=-1)
    noise = sample_gumbel(rng, log_pi.shape, dtype=x.data.dtype)
    soft = gumbel_softmax(log_pi, noise, tau)
    return straight_through(soft), soft.data


def _argmax_gates(router: RouterState, x: Tensor) -> np.ndarray:
    # Deliberately outside the graph: no gradient flows through frozen
    # routers or into the stream via the decision in argmax mode.
    logits = x.data @ router.w.data
    return hard_decisions(logits)


def route_token(router: RouterState, x_l: Tensor, f_out: Tensor, mode: str,
                tau: float | None = None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, RouteDecision]:
    """Gate a single token's module output per the one-hot decision."""
    if x_l.shape != f_out.shape:
        raise ValueError(f"route_token: shapes {x_l.shape} and {f_out.shape} disagree")
    if x_l.shape[-1] != router.w.data.shape[0]:
        raise ValueError(
            f"route_token: token dim {x_l.shape[-1]} does not match router dim {router.w.data.shape[0]}"
        )
    squeeze = x_l.ndim == 1
    xv = T.reshape(x_l, (1, -1)) if squeeze else x_l
    fv = T.reshape(f_out, (1, -1)) if squeeze else f_out
    if mode == SAMPLED_ST:
        if tau is None or rng is None:
            raise ValueError("sampled_st mode needs tau and rng")
        g, soft_vals = _sampled_gates(router, xv, tau, rng)
        gd = g.data
    elif mode == ARGMAX:
        gd = _argmax_gates(router, xv)
        soft_vals = gd
        g = T.tensor(gd, dtype=xv.dtype)
    else:
        raise ValueError(f"route_token: unknown mode {mode!r}")
    x_next = T.add(
        T.mul(T.slice_last(g, EXEC, EXEC + 1), T.add(fv, xv)),
        T.mul(T.slice_last(g, SKIP, SKIP + 1), xv),
    )
    if squeeze:
        x_next = T.reshape(x_next, (-1,))
        soft_vals, gd = soft_vals[0], gd[0]
    return x_next, RouteDecision(soft=soft_vals, hard=gd, mode=mode)


@dataclass
class RoutedForward:
    """Result of a routed pass: logits, the exact hard decision trace,
    and the in-graph skip channel the sparsity loss differentiates."""

    logits: Tensor
    skips: np.ndarray          # (B, 2L, S) in {0,1}; 1 = module skipped
    skip_channel: Tensor       # same numbers, graph-attached in ST mode
    soft_skip: np.ndarray      # mean soft skip probability, for logging


def forward_routed(model: Model, routers: list[RouterState], tokens: np.ndarray,
                   mode: str, tau: float | None = None,
                   rng: np.random.Generator | None = None,
                   forced: np.ndarray | None = None) -> RoutedForward:
    """Apply every module under its router's per-token decision.

    Routing is independent per token and per module. `forced` is an
    execute-indicator array of shape (2L,), (2L,S), or (B,2L,S) and is
    required exactly when mode == "forced".
    """
    cfg = model.config
    if mode != FORCED and len(routers) != cfg.n_modules:
        raise ValueError(f"expected {cfg.n_modules} routers, got {len(routers)}")
    if mode == SAMPLED_ST and (tau is None or rng is None):
        raise ValueError("sampled_st mode needs tau and rng")
    if (forced is None) != (mode != FORCED):
        raise ValueError("forced mask is required exactly in forced mode")

    tokens = model._check_tokens(tokens)
    B, S = tokens.shape
    mask = causal_mask(S)
    x = model.embed(tokens)

    if forced is not None:
        forced = np.asarray(forced)
        if forced.ndim == 1:
            forced = np.broadcast_to(forced[None, :, None], (B, cfg.n_modules, S))
        elif forced.ndim == 2:
            forced = np.broadcast_to(forced[None, :, :], (B, cfg.n_modules, S))
        if forced.shape != (B, cfg.n_modules, S):
            raise ValueError(f"forced mask shape {forced.shape} incompatible with (B={B}, 2L={cfg.n_modules}, S={S})")

    skip_parts: list[Tensor] = []
    soft_skip_sum = 0.0
    for idx, module in enumerate(model.modules):
        if mode == SAMPLED_ST:
            g, soft_vals = _sampled_gates(routers[idx], x, tau, rng)
        elif mode == ARGMAX:
            gd = _argmax_gates(routers[idx], x)
            soft_vals = gd
            g = T.tensor(gd, dtype=x.dtype)
        else:
            exec_flags = forced[:, idx, :].astype(x.data.dtype)
            gd = np.stack([1.0 - exec_flags, exec_flags], axis=-1)
            soft_vals = gd
            g = T.tensor(gd, dtype=x.dtype)
        f_out = module.forward(x, mask)
        g_exec = T.slice_last(g, EXEC, EXEC + 1)
        g_skip = T.slice_last(g, SKIP, SKIP + 1)
        x = T.add(T.mul(g_exec, T.add(f_out, x)), T.mul(g_skip, x))
        skip_parts.append(T.reshape(g_skip, (B, 1, S)))
        soft_skip_sum += float(soft_vals[..., SKIP].mean())

    skip_channel = T.concat(skip_parts, axis=1)
    logits = model.head(x)
    return RoutedForward(
        logits=logits,
        skips=skip_channel.data.astype(np.int8),
        skip_channel=skip_channel,
        soft_skip=soft_skip_sum / cfg.n_modules,
    )


def decisions_to_csv(skips: np.ndarray, path) -> None:
    """Write one sequence's decision matrix; rows attn0,mlp0,attn1,...

    Cell values record the execution indicator (1 = executed,
    0 = skipped) under columns t0..t{S-1}.
    """
    skips = np.asarray(skips)
    if skips.ndim != 2:
        raise ValueError("decisions_to_csv expects a single (2L, S) matrix")
    n_modules, S = skips.shape
    labels = module_labels(n_modules // 2)
    with open(path, "w") as fh:
        fh.write("module," + ",".join(f"t{i}" for i in range(S)) + "\n")
        for label, row in zip(labels, 1 - skips):
            fh.write(label + "," + ",".join(str(int(v)) for v in row) + "\n")


def module_labels(n_layers: int) -> list[str]:
    out = []
    for layer in range(n_layers):
        out.append(f"attn{layer}")
        out.append(f"mlp{layer}")
    return out
