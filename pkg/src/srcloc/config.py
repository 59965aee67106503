"""Experiment configuration: INI files with fixed sections and strictly checked keys.

Example::

    [graph]
    model = watts-strogatz
    n = 200
    k = 6
    p = 0.1

    [propagation ic]
    model = IC
    weight = 1

    [train]
    max_epochs = 100

Every section is optional; omitted keys take their defaults. Any key a
section does not know is an error, so typos cannot silently fall back to a
default. ``[propagation <name>]`` may appear any number of times and builds
the cascade mixture.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .denoiser import DenoiserConfig
from .graph import Graph, generate_graph, load_edge_list
from .propagation import PropagationConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration values."""


@dataclass(frozen=True)
class GraphSpec:
    path: str = ""
    model: str = "watts-strogatz"
    n: int = 200
    k: int = 6
    p: float = 0.1
    m: int = 2
    seed: int = 0

    def build(self, base: Path | None = None) -> Graph:
        if self.path:
            path = Path(self.path)
            if base is not None and not path.is_absolute():
                path = base / path
            if not path.exists():
                raise ConfigError(f"graph file not found: {path}")
            return load_edge_list(path)
        params = {"erdos-renyi": dict(n=self.n, p=self.p),
                  "watts-strogatz": dict(n=self.n, k=self.k, p=self.p),
                  "barabasi-albert": dict(n=self.n, m=self.m)}
        if self.model not in params:
            raise ConfigError(f"unknown graph model {self.model!r}")
        return generate_graph(self.model, seed=self.seed, **params[self.model])


@dataclass(frozen=True)
class DataSpec:
    count: int = 800
    # directory holding train/val/test splits; empty means the output directory
    dir: str = ""


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "lpsi"
    alpha: float = 0.5


@dataclass(frozen=True)
class DiffusionSpec:
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class FinetuneSpec:
    fraction: float = 0.1
    lr: float = 0.005
    max_epochs: int = 500
    batch_size: int = 32
    patience: int = 50
    early_stop: bool = True
    val_every: int = 1
    val_samples: int = 4


@dataclass(frozen=True)
class EvalSpec:
    rule: str = "threshold"
    tau: float = 0.5
    n_samples: int = 8


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0
    eval: int = 0
    subset: int = 0

    def override(self, seed: int) -> "Seeds":
        return Seeds(*(seed for _ in fields(self)))


@dataclass
class ExperimentConfig:
    graph: GraphSpec = field(default_factory=GraphSpec)
    propagation: list[tuple[str, PropagationConfig, float]] = field(default_factory=list)
    data: DataSpec = field(default_factory=DataSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    diffusion: DiffusionSpec = field(default_factory=DiffusionSpec)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seeds: Seeds = field(default_factory=Seeds)
    output: str = "out"
    # directory relative paths are resolved against (the config file's folder)
    base: Path = field(default=Path("."), compare=False)

    def mixture(self) -> list[tuple[PropagationConfig, float]]:
        if not self.propagation:
            return [(PropagationConfig(), 1.0)]
        return [(c, w) for _, c, w in self.propagation]

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seeds.train, val_rule=self.eval.rule)

    def finetune_config(self) -> TrainConfig:
        f = self.finetune
        return dataclasses.replace(
            self.train, lr=f.lr, max_epochs=f.max_epochs, batch_size=f.batch_size, patience=f.patience,
            early_stop=f.early_stop, val_every=f.val_every, val_samples=f.val_samples, seed=self.seeds.train,
            val_rule=self.eval.rule,
        )

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base / p

    def to_ini(self) -> str:
        """Render the fully resolved configuration; reading it back gives an equal config."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        simple = [("graph", self.graph), ("data", self.data), ("prior", self.prior),
                  ("diffusion", self.diffusion), ("denoiser", self.denoiser)]
        for name, obj in simple:
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        # relative paths are pinned so the frozen copy works from any directory
        for name, key in (("graph", "path"), ("data", "dir")):
            if cp[name][key]:
                cp[name][key] = str(self.resolve(cp[name][key]).resolve())
        for name, cfg, weight in self.propagation:
            sec = {"weight": _fmt(weight)}
            sec.update({f.name: _fmt(getattr(cfg, f.name)) for f in fields(cfg)})
            cp[f"propagation {name}"] = sec
        cp["train"] = {f.name: _fmt(getattr(self.train, f.name)) for f in fields(self.train)
                       if f.name not in _TRAIN_EXCLUDED}
        for name, obj in (("finetune", self.finetune), ("eval", self.eval), ("seeds", self.seeds)):
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        cp["output"] = {"dir": str(self.resolve(self.output).resolve())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


# seed lives under [seeds] and val_rule follows the [eval] rule; betas are written as a pair
_TRAIN_EXCLUDED = {"seed", "val_rule"}

_SECTIONS = {
    "graph": GraphSpec,
    "data": DataSpec,
    "prior": PriorSpec,
    "diffusion": DiffusionSpec,
    "denoiser": DenoiserConfig,
    "finetune": FinetuneSpec,
    "eval": EvalSpec,
    "seeds": Seeds,
}


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, annotation: str, default: Any):
    """Coerce an INI string using the dataclass field's annotation."""
    ann = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    text = text.strip()
    if "None" in ann and text.lower() == "none":
        return None
    if ann == "bool":
        return _parse_bool(text)
    if ann == "int":
        return int(text)
    if ann.startswith("float") and "str" not in ann:
        return float(text)
    if ann.startswith("tuple"):
        return tuple(float(v) for v in text.split(","))
    if "str" in ann and "float" in ann:
        try:
            return float(text)
        except ValueError:
            return text
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    return text


def _build(cls, section: configparser.SectionProxy, skip=()):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in known or key in _TRAIN_EXCLUDED and cls is TrainConfig:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        try:
            kwargs[key] = _convert(raw, f.type, default)
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from None


def parse_config(text: str, base: Path = Path(".")) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    cfg = ExperimentConfig(base=base)
    for name in cp.sections():
        sec = cp[name]
        if name in _SECTIONS:
            setattr(cfg, name, _build(_SECTIONS[name], sec))
        elif name == "train":
            cfg.train = _build(TrainConfig, sec)
        elif name.startswith("propagation"):
            label = name[len("propagation"):].strip() or str(len(cfg.propagation))
            try:
                weight = float(sec.get("weight", "1"))
            except ValueError:
                raise ConfigError(f"[{name}] weight must be a number") from None
            cfg.propagation.append((label, _build(PropagationConfig, sec, skip=("weight",)), weight))
        elif name == "output":
            unknown = set(sec) - {"dir"}
            if unknown:
                raise ConfigError(f"[output] unknown key {sorted(unknown)[0]!r}")
            cfg.output = sec.get("dir", cfg.output)
        else:
            raise ConfigError(f"unknown section [{name}]")
    if cfg.prior.kind not in ("lpsi", "centrality"):
        raise ConfigError(f"[prior] kind must be lpsi or centrality, got {cfg.prior.kind!r}")
    if cfg.eval.rule not in ("threshold", "top-k", "calibrated"):
        raise ConfigError(f"[eval] rule must be threshold, top-k or calibrated, got {cfg.eval.rule!r}")
    if any(w <= 0 for _, _, w in cfg.propagation):
        raise ConfigError("propagation weights must be positive")
    if not 0 < cfg.finetune.fraction <= 1:
        raise ConfigError("[finetune] fraction must be in (0, 1]")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base=path.parent)
