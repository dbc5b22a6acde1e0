"""Configuration dataclasses and the ``key = value`` config file reader."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

LAYER_KINDS = ("vanilla", "mobius_mixed", "mobius_dual")
PLACEMENTS = ("framed", "top", "stacked", "alternating", "custom")


@dataclass
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    # heads using Mobius attention inside a mixed layer; None means half
    n_mobius_heads: int | None = None
    kv_policy: str = "diagonal"  # diagonal | full
    query_policy: str = "mobius"  # mobius | linear_then_mobius
    softmax_policy: str = "real_part"  # real_part | magnitude
    positional: str = "complex_channel"  # complex_channel | rotary
    conj_keys: bool = False
    dropout: float = 0.1
    pole_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mobius_heads(self) -> int:
        return self.n_heads // 2 if self.n_mobius_heads is None else self.n_mobius_heads

    @property
    def vanilla_heads(self) -> int:
        return self.n_heads - self.mobius_heads

    def validate(self):
        if self.n_heads < 1 or self.d_model < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.mobius_heads <= self.n_heads:
            raise ConfigError(f"n_mobius_heads={self.n_mobius_heads} outside [0, {self.n_heads}]")
        _choice("kv_policy", self.kv_policy, ("diagonal", "full"))
        _choice("query_policy", self.query_policy, ("mobius", "linear_then_mobius"))
        _choice("softmax_policy", self.softmax_policy, ("real_part", "magnitude"))
        _choice("positional", self.positional, ("complex_channel", "rotary"))
        if self.positional == "rotary" and self.d_head % 2:
            raise ConfigError("rotary positions need an even head dimension")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.pole_eps < 0:
            raise ConfigError("pole_eps must be >= 0")


@dataclass
class ModelConfig:
    vocab_size: int = 32
    max_seq_len: int = 16
    n_layers: int = 4
    placement: str = "framed"
    mobius_kind: str = "mobius_mixed"
    layer_kinds: tuple[str, ...] | None = None  # only for placement=custom
    d_ff: int | None = None  # None means 4 * d_model
    tie_embeddings: bool = True
    init_std: float = 0.02
    seed: int = 17
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        if self.layer_kinds is not None:
            self.layer_kinds = tuple(self.layer_kinds)
        self.validate()

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_model if self.d_ff is None else self.d_ff

    def validate(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < 2 or self.max_seq_len < 1:
            raise ConfigError("vocab_size >= 2 and max_seq_len >= 1 required")
        _choice("placement", self.placement, PLACEMENTS)
        _choice("mobius_kind", self.mobius_kind, LAYER_KINDS[1:])
        if self.placement == "custom":
            if self.layer_kinds is None or len(self.layer_kinds) != self.n_layers:
                raise ConfigError("placement=custom needs layer_kinds with n_layers entries")
            for k in self.layer_kinds:
                _choice("layer_kinds", k, LAYER_KINDS)
        self.attention.validate()
        kinds = self.kinds()
        if "mobius_mixed" in kinds and self.attention.mobius_heads == 0 and self.placement != "custom":
            raise ConfigError("Mobius placement with zero Mobius heads; use placement=custom")
        n_mob = self.attention.n_mobius_heads
        if "mobius_dual" in kinds and n_mob is not None and n_mob != self.attention.n_heads:
            raise ConfigError("dual-channel layers have no vanilla heads; leave n_mobius_heads unset")

    def kinds(self) -> tuple[str, ...]:
        """Per-layer kinds after expanding the placement preset."""
        return expand_placement(self.placement, self.n_layers, self.mobius_kind, self.layer_kinds)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["attention"] = AttentionConfig(**d.get("attention", {}))
        return cls(**d)


def expand_placement(placement: str, n_layers: int, mobius_kind: str = "mobius_mixed",
                     layer_kinds=None) -> tuple[str, ...]:
    m, v = mobius_kind, "vanilla"
    if placement == "custom":
        return tuple(layer_kinds)
    if placement == "framed":
        if n_layers == 1:
            return (m,)
        return (m,) + (v,) * (n_layers - 2) + (m,)
    if placement == "top":
        return (m,) + (v,) * (n_layers - 1)
    if placement == "stacked":
        return tuple(m if i < 2 else v for i in range(n_layers))
    if placement == "alternating":
        # Mobius layers separated by two vanilla layers
        return tuple(m if i % 3 == 0 else v for i in range(n_layers))
    raise ConfigError(f"unknown placement {placement!r}")


@dataclass
class TrainConfig:
    task: str = "reverse"  # mlm_synthetic | copy | reverse
    vocab_size: int = 32
    seq_len: int = 16
    batch_size: int = 32
    steps: int = 2000
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 1e-5
    warmup_frac: float = 0.06
    final_lr_factor: float = 0.02
    mask_prob: float = 0.15
    grad_clip: float | None = None
    eval_interval: int = 100
    eval_batch_size: int = 256
    seed: int = 17

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        _choice("task", self.task, ("mlm_synthetic", "copy", "reverse"))
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac={self.warmup_frac} outside [0, 1)")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob={self.mask_prob} outside (0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, eval_interval >= 1 required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name}={value!r}; expected one of {', '.join(allowed)}")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "attention": AttentionConfig, "train": TrainConfig}


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name != "attention"}


def _convert(raw: str, f: dataclasses.Field):
    raw = raw.strip()
    typ = str(f.type)
    if raw.lower() in ("none", "null", ""):
        if "None" in typ:
            return None
        raise ValueError("value required")
    if "tuple" in typ:
        parts = [p.strip() for p in raw.strip("()[]").split(",") if p.strip()]
        return tuple(float(p) for p in parts) if "float" in typ else tuple(parts)
    if typ.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    return raw


def resolve_key(key: str) -> tuple[str, str]:
    """Map ``section.field`` or an unambiguous bare ``field`` to its section."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS or name not in _fields(_SECTIONS[section]):
            raise KeyError(key)
        return section, name
    hits = [s for s, cls in _SECTIONS.items() if key in _fields(cls)]
    if not hits:
        raise KeyError(key)
    # vocab_size and seed exist for both model and trainer; bare keys set both
    return ("*", key) if len(hits) > 1 else (hits[0], key)


def apply_overrides(values: dict[str, dict], key: str, raw: str):
    section, name = resolve_key(key)
    targets = [s for s, cls in _SECTIONS.items() if name in _fields(cls)] if section == "*" else [section]
    for s in targets:
        values.setdefault(s, {})[name] = _convert(raw, _fields(_SECTIONS[s])[name])


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict]:
    """Parse ``key = value`` lines (``#`` comments, ``[section]`` headers allowed)."""
    values: dict[str, dict] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        try:
            apply_overrides(values, key, raw)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: unknown field {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {exc}") from None
    return values


def build_configs(values: dict[str, dict]) -> tuple[ModelConfig, TrainConfig]:
    attn = AttentionConfig(**values.get("attention", {}))
    model = ModelConfig(attention=attn, **values.get("model", {}))
    train = TrainConfig(**values.get("train", {}))
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        values = {}
        for k, v in data.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    apply_overrides(values, f"{k}.{kk}", ",".join(map(str, vv)) if isinstance(vv, list) else str(vv))
            else:
                apply_overrides(values, k, str(v))
        return build_configs(values)
    return build_configs(parse_config_text(text, str(path)))
