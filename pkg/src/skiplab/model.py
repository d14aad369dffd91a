"""Decoder-only transformer built from decoupled attention and MLP modules.

Every layer contributes two independently gateable modules (one
attention block, one MLP block), so an L-layer model exposes 2L entry
points. Modules return f(x) WITHOUT the residual addition; the caller
(dense forward or the routing layer) owns the residual, which keeps the
token-gating update rule in exactly one place.

Pre-norm RMSNorm, causal multi-head attention, gated MLP, learned
absolute positions, untied LM head. Low-rank adapters can be attached
to any projection; with B = 0 the adapted model equals the base model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

ATTN, MLP = "attn", "mlp"

# Mask fill value: exp() underflows to exactly 0 after max-subtraction,
# at both float32 and float64.
_MASK_FILL = -1e30


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int = 256
    max_seq_len: int = 256
    rms_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.rms_eps <= 0:
            raise ValueError("rms_eps must be positive")

    @property
    def n_modules(self) -> int:
        return 2 * self.n_layers

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rms_eps": self.rms_eps,
        }


@dataclass
class LoraAdapter:
    """Low-rank update for one projection: effective W = W + scale * A @ B."""

    target: str
    rank: int
    scale: float
    A: Tensor
    B: Tensor


def init_weight(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> Tensor:
    return T.tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


class TransformerModule:
    """One attention or MLP block; forward returns f(x), no residual."""

    def __init__(self, kind: str, layer_index: int, config: ModelConfig,
                 rng: np.random.Generator, dtype):
        assert kind in (ATTN, MLP)
        self.kind = kind
        self.layer_index = layer_index
        self.config = config
        d, dff = config.d_model, config.d_ff
        ones = T.tensor(np.ones(d), requires_grad=True, dtype=dtype)
        if kind == ATTN:
            self.weights = {
                "norm": ones,
                "wq": init_weight(rng, (d, d), dtype),
                "wk": init_weight(rng, (d, d), dtype),
                "wv": init_weight(rng, (d, d), dtype),
                "wo": init_weight(rng, (d, d), dtype),
            }
        else:
            self.weights = {
                "norm": ones,
                "wg": init_weight(rng, (d, dff), dtype),
                "wu": init_weight(rng, (d, dff), dtype),
                "wd": init_weight(rng, (dff, d), dtype),
            }
        self.lora: dict[str, LoraAdapter] = {}

    @property
    def name(self) -> str:
        return f"layers.{self.layer_index}.{self.kind}"

    def _proj(self, key: str, h: Tensor) -> Tensor:
        out = T.matmul(h, self.weights[key])
        ad = self.lora.get(key)
        if ad is not None:
            out = T.add(out, T.mul(T.matmul(T.matmul(h, ad.A), ad.B), ad.scale))
        return out

    def forward(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        if self.kind == ATTN:
            return self._attention(x, mask)
        return self._mlp(x)

    def _attention(self, x: Tensor, mask: np.ndarray) -> Tensor:
        cfg = self.config
        B, S, d = x.shape
        H, hd = cfg.n_heads, cfg.head_dim
        h = T.rms_norm(x, self.weights["norm"], cfg.rms_eps)
        q = self._proj("wq", h)
        k = self._proj("wk", h)
        v = self._proj("wv", h)

        def split(t):
            return T.reshape(T.transpose(T.reshape(t, (B, S, H, hd)), (0, 2, 1, 3)), (B * H, S, hd))

        qh, kh, vh = split(q), split(k), split(v)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(hd))
        scores = T.add(scores, T.tensor(mask, dtype=x.dtype))
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, vh)
        merged = T.reshape(T.transpose(T.reshape(ctx, (B, H, S, hd)), (0, 2, 1, 3)), (B, S, d))
        return self._proj("wo", merged)

    def _mlp(self, x: Tensor) -> Tensor:
        h = T.rms_norm(x, self.weights["norm"], self.config.rms_eps)
        gated = T.mul(T.silu(self._proj("wg", h)), self._proj("wu", h))
        return self._proj("wd", gated)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"{self.name}.{k}": w for k, w in self.weights.items()}
        for key, ad in self.lora.items():
            out[f"lora.{self.name}.{key}.A"] = ad.A
            out[f"lora.{self.name}.{key}.B"] = ad.B
        return out

    def param_count(self) -> int:
        return sum(w.data.size for w in self.weights.values())


def causal_mask(seq_len: int) -> np.ndarray:
    m = np.zeros((seq_len, seq_len))
    m[np.triu_indices(seq_len, k=1)] = _MASK_FILL
    return m


class Model:
    """The full decoder stack: embeddings, 2L modules, final norm, LM head."""

    def __init__(self, config: ModelConfig, dtype=np.float32, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        d, V = config.d_model, config.vocab_size
        self.embed_tok = init_weight(rng, (V, d), self.dtype)
        self.embed_pos = init_weight(rng, (config.max_seq_len, d), self.dtype)
        self.modules: list[TransformerModule] = []
        for layer in range(config.n_layers):
            self.modules.append(TransformerModule(ATTN, layer, config, rng, self.dtype))
            self.modules.append(TransformerModule(MLP, layer, config, rng, self.dtype))
        self.final_norm = T.tensor(np.ones(d), requires_grad=True, dtype=self.dtype)
        self.lm_head = init_weight(rng, (d, V), self.dtype)

    # -- parameter plumbing -------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embed.tok": self.embed_tok, "embed.pos": self.embed_pos}
        for m in self.modules:
            out.update(m.named_tensors())
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    def base_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_tensors().items() if not name.startswith("lora.")]

    def adapter_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_tensors().items() if name.startswith("lora.")]

    def set_trainable(self, flag: bool, adapters: bool | None = None) -> None:
        """Toggle requires_grad on base weights (and optionally adapters)."""
        for t in self.base_parameters():
            t.requires_grad = flag
        if adapters is not None:
            for t in self.adapter_parameters():
                t.requires_grad = adapters

    def module_param_counts(self) -> np.ndarray:
        return np.array([m.param_count() for m in self.modules], dtype=np.int64)

    # -- forward passes ------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len={self.config.max_seq_len}"
            )
        return tokens

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = self._check_tokens(tokens)
        B, S = tokens.shape
        tok = T.embedding(self.embed_tok, tokens)
        pos = T.embedding(self.embed_pos, np.broadcast_to(np.arange(S), (B, S)))
        return T.add(tok, pos)

    def head(self, x: Tensor) -> Tensor:
        return T.matmul(T.rms_norm(x, self.final_norm, self.config.rms_eps), self.lm_head)

    def forward_dense(self, tokens: np.ndarray, capture_states: bool = False):
        """All 2L modules with residuals; optionally capture the residual
        stream entering each module plus the final post-module state."""
        tokens = self._check_tokens(tokens)
        S = tokens.shape[1]
        mask = causal_mask(S)
        x = self.embed(tokens)
        states: list[np.ndarray] = []
        for m in self.modules:
            if capture_states:
                states.append(x.data.copy())
            x = T.add(x, m.forward(x, mask))
        if capture_states:
            states.append(x.data.copy())
        logits = self.head(x)
        if capture_states:
            return logits, states
        return logits


def module_param_counts(config: ModelConfig) -> np.ndarray:
    """Parameter count of each module (attn0, mlp0, attn1, ...)."""
    d, dff = config.d_model, config.d_ff
    attn = 4 * d * d + d
    mlp = 3 * d * dff + d
    return np.array([attn, mlp] * config.n_layers, dtype=np.int64)


def default_lora_targets(config: ModelConfig) -> list[str]:
    """All four attention projections and all three MLP projections."""
    targets = []
    for layer in range(config.n_layers):
        for key in ("wq", "wk", "wv", "wo"):
            targets.append(f"layers.{layer}.attn.{key}")
        for key in ("wg", "wu", "wd"):
            targets.append(f"layers.{layer}.mlp.{key}")
    return targets


def apply_lora(model: Model, targets: list[str] | None = None, rank: int = 8,
               scale: float = 2.0, seed: int = 0) -> Model:
    """Attach low-rank adapters; B starts at zero so the adapted model
    initially equals the base model. Only A and B require grad."""
    if targets is None:
        targets = default_lora_targets(model.config)
    rng = np.random.default_rng(seed)
    by_name = {m.name: m for m in model.modules}
    for target in targets:
        parts = target.rsplit(".", 1)
        if len(parts) != 2 or parts[0] not in by_name or parts[1] not in by_name[parts[0]].weights:
            raise ValueError(f"unknown LoRA target {target!r}")
        module, key = by_name[parts[0]], parts[1]
        w = module.weights[key]
        if key == "norm":
            raise ValueError(f"LoRA target {target!r} is a gain vector, not a projection")
        d_in, d_out = w.data.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"LoRA target {target!r} does not admit rank {rank}")
        module.lora[key] = LoraAdapter(
            target=target,
            rank=rank,
            scale=scale,
            A=init_weight(rng, (d_in, rank), model.dtype),
            B=T.tensor(np.zeros((rank, d_out)), requires_grad=True, dtype=model.dtype),
        )
    return model
