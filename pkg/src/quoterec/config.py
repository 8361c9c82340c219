"""Run configuration and its YAML file form.

A config file has up to three sections mirroring the dataclass fields::

    model:
      dim: 200
      n_layers: 2
      n_heads: 3
    train:
      lr: 1.0e-4
      lam: 1.0e-3
    data:
      max_turn_len: 50

Values are coerced to the field's type, so ``1e-4`` (a string to YAML 1.1)
is accepted.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or unparsable configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


SECTIONS = {
    "model": ("dim", "hidden", "n_layers", "n_heads", "ffn_dim", "dropout", "turn_encoder", "use_M"),
    "train": ("lr", "batch_size", "lam", "l2", "patience", "max_epochs", "clip_norm", "seed",
              "use_map_loss", "beta1", "beta2", "eps"),
    "data": ("max_turn_len", "min_count", "embeddings"),
}

ABLATIONS = ("no-M", "no-map-loss", "no-transformer")


@dataclass
class TrainConfig:
    # model
    dim: int = 200
    hidden: int = 200
    n_layers: int = 2
    n_heads: int = 3
    ffn_dim: int = 800
    dropout: float = 0.1
    turn_encoder: str = "transformer"
    use_M: bool = True
    # optimisation
    lr: float = 1e-4
    batch_size: int = 32
    lam: float = 1e-3
    l2: float = 1e-5
    patience: int = 5
    max_epochs: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    use_map_loss: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # data
    max_turn_len: int = 50
    min_count: int = 2
    embeddings: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("dim", "hidden", "n_heads", "ffn_dim", "batch_size", "max_turn_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.dim // self.n_heads < 1:
            raise ConfigError(f"n_heads={self.n_heads} too large for dim={self.dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr < 0 or self.lam < 0 or self.l2 < 0:
            raise ConfigError("lr, lam and l2 must be non-negative")
        if self.patience < 0 or self.max_epochs < 1 or self.min_count < 1:
            raise ConfigError("patience >= 0, max_epochs >= 1 and min_count >= 1 required")
        if self.turn_encoder not in ("transformer", "bigru"):
            raise ConfigError(f"turn_encoder must be transformer or bigru, got {self.turn_encoder!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.use_map_loss else 0.0

    def ablate(self, name: str) -> TrainConfig:
        """Copy with one ablation applied (``no-M``, ``no-map-loss``, ``no-transformer``)."""
        if name == "no-M":
            return dataclasses.replace(self, use_M=False)
        if name == "no-map-loss":
            return dataclasses.replace(self, use_map_loss=False)
        if name == "no-transformer":
            return dataclasses.replace(self, turn_encoder="bigru")
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_sections(self) -> dict:
        flat = self.to_dict()
        return {sec: {k: flat[k] for k in keys} for sec, keys in SECTIONS.items()}

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, known[key].type, raw)
        return cls(**kwargs)


def _coerce(key: str, type_name, raw):
    type_name = str(type_name)
    try:
        if raw is None:
            if "None" in type_name:
                return None
            raise ConfigError(f"{key} may not be null")
        if type_name == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("true", "yes", "1"):
                return True
            if str(raw).lower() in ("false", "no", "0"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        if type_name == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ConfigError(f"{key}: expected an integer, got {raw!r}")
            return int(raw)
        if type_name == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot interpret {raw!r}") from exc


def _key_lines(text: str) -> dict[str, int]:
    lines = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if ":" in stripped:
            lines.setdefault(stripped.split(":", 1)[0].strip(), lineno)
    return lines


def parse_config(text: str) -> TrainConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed config: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from exc
    if doc is None:
        return TrainConfig()
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of sections", 1)
    lines = _key_lines(text)
    flat = {}
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}", lines.get(str(section)))
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping", lines.get(section))
        for key, value in body.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}", lines.get(str(key)))
            flat[key] = value
    try:
        return TrainConfig.from_dict(flat)
    except ConfigError as exc:
        bad = next((k for k in flat if k in str(exc)), None)
        if exc.line is None and bad is not None:
            raise ConfigError(str(exc), lines.get(bad)) from None
        raise


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_sections(), sort_keys=False)
