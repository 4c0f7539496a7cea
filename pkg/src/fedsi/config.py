"""Experiment configuration: flat ``key = value`` text with dotted sections.

    # comments and blank lines are ignored
    rounds = 200
    model.variant = si_cifg
    client.learning_rate = 0.5
    dp.enabled = true

Unknown keys and invalid values raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from fedsi.data import TOKENIZERS, SyntheticConfig
from fedsi.dp_ftrl import DpConfig
from fedsi.federated import ClientConfig, QuantConfig, ServerConfig
from fedsi.models import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or a path to a client<TAB>text file
    n_clients: int = 100
    vocab_size: int = 64
    tokenizer: str = "whitespace"
    eval_fraction: float = 0.1
    seed: int = 0  # corpus and held-out split; ``seed`` drives training randomness

    def validate(self) -> None:
        if self.n_clients < 1:
            raise ValueError("data.n_clients must be >= 1")
        if self.vocab_size < 4:
            raise ValueError("data.vocab_size must be >= 4")
        if self.tokenizer not in TOKENIZERS:
            raise ValueError(f"data.tokenizer must be one of {TOKENIZERS}")
        if not 0 <= self.eval_fraction < 1:
            raise ValueError("data.eval_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    every: int = 10
    max_sequences: int = 500
    metric_mode: str = "standard"  # or "in_vocab"

    def validate(self) -> None:
        if self.every < 1:
            raise ValueError("eval.every must be >= 1")
        if self.max_sequences < 1:
            raise ValueError("eval.max_sequences must be >= 1")
        if self.metric_mode not in ("standard", "in_vocab"):
            raise ValueError("eval.metric_mode must be 'standard' or 'in_vocab'")


@dataclass(frozen=True)
class OutputConfig:
    metrics_format: str = "jsonl"  # or "csv"
    checkpoint_every: int = 0  # 0: only the final checkpoint
    record_wall_time: bool = False

    def validate(self) -> None:
        if self.metrics_format not in ("jsonl", "csv"):
            raise ValueError("output.metrics_format must be 'jsonl' or 'csv'")
        if self.checkpoint_every < 0:
            raise ValueError("output.checkpoint_every must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    rounds: int = 200
    clients_per_round: int = 10
    seed: int = 0
    weighting: str = "example_weighted"
    clip_norm: float = math.inf
    divergence_factor: float = 10.0
    model: ModelConfig = field(default_factory=ModelConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    dp: DpConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds: must be >= 1")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round: must be >= 1")
        if self.weighting not in ("uniform", "example_weighted"):
            raise ConfigError("weighting: must be 'uniform' or 'example_weighted'")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm: must be > 0 (inf disables clipping)")
        if not self.divergence_factor > 1:
            raise ConfigError("divergence_factor: must be > 1")
        if self.dp is not None and self.dp.clients_per_round != self.clients_per_round:
            raise ConfigError("dp.clients_per_round: must equal clients_per_round")
        for name in ("model", "client", "server", "quant", "dp", "data", "synthetic", "eval", "output"):
            section = getattr(self, name)
            if section is None:
                continue
            try:
                section.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def to_flat(self) -> dict[str, Any]:
        return _flatten(self)

    def digest(self) -> str:
        """Hash of everything that determines the trajectory (not ``rounds``
        or output settings), so a resumed run can extend a finished one."""
        flat = {k: v for k, v in self.to_flat().items() if k != "rounds" and not k.startswith("output.")}
        text = "\n".join(f"{k}={_render(v)}" for k, v in sorted(flat.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


SECTIONS = ("model", "client", "server", "quant", "dp", "data", "synthetic", "eval", "output")
_SECTION_TYPES = {
    "model": ModelConfig, "client": ClientConfig, "server": ServerConfig, "quant": QuantConfig,
    "dp": DpConfig, "data": DataConfig, "synthetic": SyntheticConfig, "eval": EvalConfig,
    "output": OutputConfig,
}


def _render(v: Any) -> str:
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _flatten(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            if f.name == "dp":
                out["dp.enabled"] = v is not None
                v = v if v is not None else DpConfig(clients_per_round=cfg.clients_per_round)
            for sf in dataclasses.fields(v):
                out[f"{f.name}.{sf.name}"] = getattr(v, sf.name)
        else:
            out[f.name] = v
    return out


def _coerce(key: str, raw: str, typ) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _coerce(key, raw, args[0])
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if isinstance(typ, type) and issubclass(typ, enum.Enum):
            return typ(raw.lower())
        return raw
    except ValueError:
        name = getattr(typ, "__name__", str(typ))
        raise ConfigError(f"{key}: cannot parse {raw!r} as {name}") from None


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        pairs[key.strip()] = value.strip()
    return pairs


def build_config(pairs: Mapping[str, str]) -> ExperimentConfig:
    top_hints = typing.get_type_hints(ExperimentConfig)
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    dp_enabled = False
    for key, raw in pairs.items():
        if key == "dp.enabled":
            dp_enabled = _coerce(key, raw, bool)
            continue
        head, dot, rest = key.partition(".")
        if dot:
            if head not in _SECTION_TYPES:
                raise ConfigError(f"{key}: unknown key")
            hints = typing.get_type_hints(_SECTION_TYPES[head])
            if rest not in hints:
                raise ConfigError(f"{key}: unknown key")
            sections[head][rest] = _coerce(key, raw, hints[rest])
        else:
            if key not in top_hints or key in SECTIONS:
                raise ConfigError(f"{key}: unknown key")
            top[key] = _coerce(key, raw, top_hints[key])
    try:
        built = {s: _SECTION_TYPES[s](**sections[s]) for s in SECTIONS if s != "dp"}
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if dp_enabled:
        dp_kw = dict(sections["dp"])
        dp_kw.setdefault("clients_per_round", top.get("clients_per_round", ExperimentConfig.clients_per_round))
        built["dp"] = DpConfig(**dp_kw)
    elif sections["dp"]:
        raise ConfigError(f"dp.{next(iter(sections['dp']))}: set dp.enabled = true to configure DP")
    cfg = ExperimentConfig(**top, **built)
    if cfg.model.max_len < cfg.client.max_seq_len:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, max_len=cfg.client.max_seq_len))
    cfg.validate()
    return cfg


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` overrides."""
    pairs: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        pairs.update(parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path)))
    pairs.update(parse_lines(overrides, "--override"))
    return build_config(pairs)


def dump_config(cfg: ExperimentConfig) -> str:
    flat = cfg.to_flat()
    if not flat["dp.enabled"]:
        flat = {k: v for k, v in flat.items() if not k.startswith("dp.") or k == "dp.enabled"}
    return "".join(f"{k} = {_render(v)}\n" for k, v in flat.items())
