"""Experiment configuration and the ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .privacy import SCHEMES, DefenseConfig
from .radionet import NetConfig
from .synthdata import MapSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    spec: MapSpec = field(default_factory=MapSpec)
    n_maps: int = 56
    tx_per_map: int = 5
    val_maps: int = 8
    seed: int = 0


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 20
    clients: int = 14
    per_round: int = 6
    batch_size: int = 8
    local_epochs: int = 2
    lr: float = 0.3
    max_grad_norm: float | None = 5.0
    phase_split: int | None = None  # default rounds // 2
    workers: int = 1

    @property
    def split(self) -> int:
        return self.rounds // 2 if self.phase_split is None else self.phase_split


@dataclass(frozen=True)
class OutputConfig:
    csv: str = "results.csv"
    traces: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: NetConfig = field(default_factory=NetConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seeds: tuple[int, ...] = (1, 2, 3)
    schemes: tuple[str, ...] = SCHEMES

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}")
        if not 1 <= self.fed.per_round <= self.fed.clients:
            raise ConfigError("fed.per_round must lie in [1, fed.clients]")
        if self.data.n_maps - self.data.val_maps < self.fed.clients:
            raise ConfigError("not enough training maps for the number of clients")


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if raw.upper() in ("NONE", "NA", ""):
        return None
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, float, str):
        return kind(raw)
    raise TypeError(kind)


def field_kinds(cls) -> dict[str, type]:
    kinds = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        t = t.replace(" ", "")
        if t.startswith("tuple[int,int]"):
            kinds[f.name] = "pair"
        elif t.startswith("tuple[int,...]") or t.startswith("tuple[str,...]"):
            kinds[f.name] = "list"
        elif t.startswith("int"):
            kinds[f.name] = int
        elif t.startswith("float"):
            kinds[f.name] = float
        elif t.startswith("bool"):
            kinds[f.name] = bool
        elif t.startswith("str"):
            kinds[f.name] = str
    return kinds


def convert_value(kind, raw: str):
    if kind == "pair":
        parts = [int(p) for p in raw.split(",")]
        if len(parts) != 2:
            raise ValueError("expected two comma-separated integers")
        return tuple(parts)
    if kind == "list":
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return _parse_value(raw, kind)


_SECTIONS = {
    "model": ("model", NetConfig),
    "fed": ("fed", FedConfig),
    "defense": ("defense", DefenseConfig),
    "attack": ("attack", AttackConfig),
    "output": ("output", OutputConfig),
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment.

    Sections: data (MapSpec fields plus n_maps, tx_per_map, val_maps, seed),
    model, fed, defense, attack, output, run (seeds, schemes).
    """
    values: dict[str, dict[str, object]] = {}
    spec_kinds = field_kinds(MapSpec)
    data_kinds = {k: v for k, v in field_kinds(DataConfig).items() if k != "spec"}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{where}: key {key!r} must be 'section.key'")
        section, name = key.split(".")
        if section == "data":
            kind = spec_kinds.get(name) or data_kinds.get(name)
            bucket = "spec" if name in spec_kinds else "data"
        elif section == "run":
            kind = {"seeds": "list", "schemes": "list"}.get(name)
            bucket = "run"
        elif section in _SECTIONS:
            kind = field_kinds(_SECTIONS[section][1]).get(name)
            bucket = section
        else:
            raise ConfigError(f"{where}: unknown section {section!r}")
        if kind is None:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values.setdefault(bucket, {})[name] = convert_value(kind, raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    return build_config(values)


def build_config(values: dict[str, dict[str, object]]) -> ExperimentConfig:
    try:
        spec = MapSpec(**values.get("spec", {}))
        data = DataConfig(spec=spec, **values.get("data", {}))
        kwargs = {
            attr: cls(**values.get(section, {})) for section, (attr, cls) in _SECTIONS.items()
        }
        run = values.get("run", {})
        if "seeds" in run:
            kwargs["seeds"] = tuple(int(s) for s in run["seeds"])
        if "schemes" in run:
            kwargs["schemes"] = tuple(run["schemes"])
        return ExperimentConfig(data=data, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
