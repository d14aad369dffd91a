"""Global sparsity accounting, the sparsity regularizer, and loss assembly.

Sparsity r is the fraction of (module, token) slots skipped in a
forward pass, pooled over the whole batch. The regularizer is the
absolute deviation |T - r| from the user target, weighted by alpha in
the total loss. When r is computed from the straight-through-backed
skip channel, the whole objective stays differentiable in the router
weights even though the forward decisions are exactly binary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class SparsityTarget:
    T: float
    alpha: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.T <= 1.0:
            raise ValueError("target sparsity must lie in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def compute_sparsity(decisions) -> float | Tensor:
    """Mean of the skip indicators: total skips / (S * 2L) per Eq.-style
    accounting, pooled over any batch dimension.

    Accepts the graph-attached skip channel (returns a scalar Tensor,
    differentiable through the straight-through path) or a plain {0,1}
    array (returns a float).
    """
    if isinstance(decisions, Tensor):
        if decisions.data.size == 0:
            raise ValueError("compute_sparsity: empty decision matrix")
        return decisions.mean()
    arr = np.asarray(decisions)
    if arr.size == 0:
        raise ValueError("compute_sparsity: empty decision matrix")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("compute_sparsity: entries must be exactly 0 or 1")
    return float(arr.mean())


def sparsity_loss(r, target: SparsityTarget):
    """|T - r| with subgradient 0 at r == T."""
    if isinstance(r, Tensor):
        return T.tabs(T.add(T.neg(r), target.T))
    return abs(target.T - float(r))


def total_loss(lm_loss: Tensor, sp_loss, alpha: float) -> Tensor:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if isinstance(sp_loss, Tensor):
        return T.add(lm_loss, T.mul(sp_loss, alpha))
    return T.add(lm_loss, float(alpha * sp_loss))


@dataclass
class SparsityReport:
    """Realized sparsity with per-type and per-depth breakdowns."""

    r: float
    target_T: float | None
    n_modules: int
    n_tokens: int
    skip_counts: list[int]
    attention_sparsity: float
    mlp_sparsity: float
    per_depth: list[dict]
    parameter_weighted_ratio: float

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def build_report(skips: np.ndarray, param_counts: np.ndarray,
                 target: SparsityTarget | None = None) -> SparsityReport:
    """Summarize a skip trace of shape (2L, S) or (B, 2L, S).

    Attention modules sit at even rows, MLP at odd rows; the
    parameter-weighted ratio weights each module's skip fraction by its
    parameter count.
    """
    skips = np.asarray(skips, dtype=np.float64)
    if skips.ndim == 2:
        skips = skips[None]
    B, n_modules, S = skips.shape
    if n_modules != len(param_counts):
        raise ValueError(f"{n_modules} modules in trace but {len(param_counts)} param counts")
    per_module = skips.mean(axis=(0, 2))
    counts = skips.sum(axis=(0, 2)).astype(int)
    attn_rows = np.arange(0, n_modules, 2)
    mlp_rows = np.arange(1, n_modules, 2)
    weights = np.asarray(param_counts, dtype=np.float64)
    per_depth = [
        {
            "layer": layer,
            "attention": float(per_module[2 * layer]),
            "mlp": float(per_module[2 * layer + 1]),
        }
        for layer in range(n_modules // 2)
    ]
    return SparsityReport(
        r=float(skips.mean()),
        target_T=None if target is None else target.T,
        n_modules=n_modules,
        n_tokens=B * S,
        skip_counts=[int(c) for c in counts],
        attention_sparsity=float(per_module[attn_rows].mean()),
        mlp_sparsity=float(per_module[mlp_rows].mean()),
        per_depth=per_depth,
        parameter_weighted_ratio=float((per_module * weights).sum() / weights.sum()),
    )


def rescale_target_for_params(param_ratio: float, param_counts: np.ndarray,
                              attention_share: float = 0.5) -> float:
    """Map a parameter-ratio budget to a module-count target T.

    Attention modules hold fewer parameters than MLP modules, so a
    parameter budget P needs more module skips when skips land mostly
    on attention. `attention_share` is the assumed fraction of skips
    that fall on attention modules (0.5 = type-uniform); the returned
    module-count target satisfies the budget under that assumption.
    """
    if not 0.0 <= param_ratio <= 1.0:
        raise ValueError("parameter ratio must lie in [0, 1]")
    if not 0.0 <= attention_share <= 1.0:
        raise ValueError("attention_share must lie in [0, 1]")
    weights = np.asarray(param_counts, dtype=np.float64)
    mean_all = weights.mean()
    mean_attn = weights[0::2].mean()
    mean_mlp = weights[1::2].mean()
    blended = attention_share * mean_attn + (1.0 - attention_share) * mean_mlp
    return float(min(1.0, param_ratio * mean_all / blended))
