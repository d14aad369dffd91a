"""Flat dotted-key run configuration.

Config files are plain text, one `key = value` per line, `#` comments.
Every key has a declared type and default; unknown keys, duplicate
keys, and unparseable values are rejected by name. CLI overrides apply
last, and every run snapshots its fully resolved configuration next to
its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# key -> (type, default). A None default means "stage-dependent",
# filled by the CLI dispatch when the user leaves it unset.
SCHEMA: dict[str, tuple[type, object]] = {
    "model.n_layers": (int, 8),
    "model.d_model": (int, 256),
    "model.n_heads": (int, 8),
    "model.d_ff": (int, 1024),
    "model.vocab_size": (int, 256),
    "model.max_seq_len": (int, 256),
    "model.rms_eps": (float, 1e-5),
    "data.corpus": (str, "synthetic"),
    "data.synthetic_bytes": (int, 500_000),
    "data.seed": (int, 1234),
    "train.steps": (int, 2000),
    "train.batch_size": (int, 8),
    "train.seq_len": (int, 256),
    "train.lr": (float, None),
    "train.weight_decay": (float, 0.1),
    "train.grad_clip": (float, 1.0),
    "train.seed": (int, 0),
    "train.log_every": (int, 10),
    "train.eval_batches": (int, 8),
    "train.dtype": (str, "float32"),
    "target.T": (float, 0.25),
    "target.alpha": (float, 8.0),
    "target.mode": (str, "modules"),
    "target.attention_share": (float, 0.5),
    "anneal.tau_start": (float, 5.0),
    "anneal.tau_end": (float, 1.0),
    "anneal.steps": (int, 0),  # 0 -> anneal over the whole run

    "lora.rank": (int, 8),
    "lora.scale": (float, 2.0),
    "run.checkpoint": (str, ""),
    "sweep.targets": (str, "0,0.2,0.4,0.6"),
    "sweep.steps": (int, 500),
    "eval.mode": (str, "routed"),
    "trace.tokens": (int, 256),
    "trace.window": (int, 100),
    "trace.stride": (int, 0),
    "trace.sequences": (int, 50),
    "baseline.budget": (str, "4"),
}

STAGE_LR_DEFAULTS = {
    "pretrain": 1e-3,
    "router-tune": 2e-3,
    "lora-tune": 2e-4,
    "joint-tune": 2e-3,
}


def _parse_value(key: str, raw: str):
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


@dataclass
class ResolvedConfig:
    """Fully resolved key/value map plus the set of explicitly set keys."""

    values: dict
    explicit: set = field(default_factory=set)

    def __getitem__(self, key: str):
        return self.values[key]

    def was_set(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.explicit)


def resolve_config(path: str | Path | None, overrides: list[str] | None = None) -> ResolvedConfig:
    """File values, then overrides, on top of the documented defaults."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    explicit: set[str] = set()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        from_file = parse_config_text(p.read_text(), source=str(p))
        resolved.update(from_file)
        explicit.update(from_file)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        resolved[key] = _parse_value(key, raw)
        explicit.add(key)
    return ResolvedConfig(values=resolved, explicit=explicit)


def snapshot(resolved: dict, path) -> None:
    """Write the resolved config as deterministic flat text."""
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            continue
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
