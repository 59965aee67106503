"""Discrete-time cascade simulation (SI, SIS, SIR, IC, LT) and cascade datasets.

All models update synchronously: every transition in round ``t`` is decided
from the state at the end of round ``t - 1``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph

log = logging.getLogger(__name__)

MODELS = ("SI", "SIS", "SIR", "IC", "LT")
SUSCEPTIBLE, INFECTED, RECOVERED = 0, 1, 2
RETRY_CAP = 16
DATASET_MAGIC = "#srcloc-dataset v1"


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    model: str = "IC"
    beta: float = 0.1
    lam: float = 0.05
    gamma: float = 0.05
    # "inverse-degree" or a constant probability / LT weight
    edge_prob: str | float = "inverse-degree"
    # "uniform" or a constant LT threshold
    threshold: str | float = "uniform"
    max_steps: int = 100
    source_fraction: float = 0.05
    # "final" (converged state) or "time-fraction"
    observation: str = "final"
    observe_fraction: float = 0.30
    source_time_fraction: float | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown propagation model {self.model!r}")
        for name in ("beta", "lam", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not isinstance(self.edge_prob, str) and not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("constant edge probability outside [0, 1]")
        if isinstance(self.edge_prob, str) and self.edge_prob != "inverse-degree":
            raise ValueError(f"unknown edge probability rule {self.edge_prob!r}")
        if isinstance(self.threshold, str) and self.threshold != "uniform":
            raise ValueError(f"unknown threshold rule {self.threshold!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 < self.source_fraction < 1.0:
            raise ValueError("source_fraction must lie in (0, 1)")
        if self.observation not in ("final", "time-fraction"):
            raise ValueError(f"unknown observation mode {self.observation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Cascade:
    sources: np.ndarray
    # first infection round per node; inf for never infected
    infection_time: np.ndarray
    final_state: np.ndarray
    steps: int = 0

    @property
    def ever_infected(self) -> np.ndarray:
        return np.isfinite(self.infection_time)


@dataclass
class Sample:
    x_star: np.ndarray
    y: np.ndarray
    id: int = 0
    model: str = ""

    def __post_init__(self):
        self.x_star = np.asarray(self.x_star, dtype=np.uint8)
        self.y = np.asarray(self.y, dtype=np.uint8)
        if self.x_star.shape != self.y.shape:
            raise ValueError("x_star and y must have the same length")
        if np.any(self.x_star > self.y):
            raise ValueError("every source must be observed as infected")


def edge_probabilities(g: Graph, rule) -> np.ndarray:
    """Per-target probability vector: p(u -> v) = p[v]."""
    if rule == "inverse-degree":
        deg = g.degrees.astype(np.float64)
        return np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return np.full(g.node_count, float(rule))


def _count_neighbors(g: Graph, mask: np.ndarray) -> np.ndarray:
    return np.asarray(g.adjacency @ mask.astype(np.float64)).ravel()


def simulate(g: Graph, sources, cfg: PropagationConfig, rng) -> Cascade:
    """Run one cascade from ``sources`` for at most ``cfg.max_steps`` rounds."""
    rng = np.random.default_rng(rng)
    n = g.node_count
    sources = np.unique(np.asarray(list(sources), dtype=np.int64))
    if len(sources) == 0:
        raise PropagationError("no source nodes")
    if sources.min() < 0 or sources.max() >= n:
        raise PropagationError(f"source id out of range [0, {n})")

    state = np.zeros(n, dtype=np.int8)
    state[sources] = INFECTED
    t_inf = np.full(n, np.inf)
    t_inf[sources] = 0

    if cfg.model == "LT":
        if cfg.threshold == "uniform":
            theta = rng.random(n)
        else:
            theta = np.full(n, float(cfg.threshold))
    p_in = edge_probabilities(g, cfg.edge_prob)
    newly = state == INFECTED

    step = 0
    for step in range(1, cfg.max_steps + 1):
        infected = state == INFECTED
        susceptible = state == SUSCEPTIBLE
        if cfg.model in ("SI", "SIS", "SIR"):
            k = _count_neighbors(g, infected)
            p = 1.0 - (1.0 - cfg.beta) ** k
            new = susceptible & (k > 0) & (rng.random(n) < p)
        elif cfg.model == "IC":
            k = _count_neighbors(g, newly)
            p = 1.0 - (1.0 - p_in) ** k
            new = susceptible & (k > 0) & (rng.random(n) < p)
        else:
            influence = _count_neighbors(g, infected) * p_in
            new = susceptible & (influence >= theta)

        changed = new.any()
        if cfg.model == "SIS":
            revert = infected & (rng.random(n) < cfg.lam)
            state[revert] = SUSCEPTIBLE
            changed |= revert.any()
        elif cfg.model == "SIR":
            recover = infected & (rng.random(n) < cfg.gamma)
            state[recover] = RECOVERED
            changed |= recover.any()
        state[new] = INFECTED
        t_inf[new] = np.minimum(t_inf[new], step)
        newly = new

        if cfg.model in ("IC", "LT") and not changed:
            break
        if cfg.model in ("SIS", "SIR") and not (state == INFECTED).any():
            break
        if cfg.model == "SI":
            frontier = _count_neighbors(g, state == INFECTED)
            if not ((state == SUSCEPTIBLE) & (frontier > 0)).any():
                break
    return Cascade(sources=sources, infection_time=t_inf, final_state=state, steps=step)


def observe(cascade: Cascade, cfg: PropagationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Turn a cascade into (x_star, y) under the configured observation mode."""
    n = len(cascade.infection_time)
    x_star = np.zeros(n, dtype=np.uint8)
    x_star[cascade.sources] = 1
    ever = cascade.ever_infected
    if cfg.observation == "final":
        return x_star, ever.astype(np.uint8)

    times = cascade.infection_time
    span = times[ever].max()
    y = (times <= cfg.observe_fraction * span).astype(np.uint8)
    if cfg.source_time_fraction is not None:
        x_star = (times <= cfg.source_time_fraction * span).astype(np.uint8)
    return x_star, np.maximum(y, x_star)


def source_count(n: int, fraction: float) -> int:
    return max(1, math.ceil(round(fraction * n, 9)))


def make_sample(g: Graph, cfg: PropagationConfig, seed, index: int = 0) -> Sample:
    """Draw sources uniformly, simulate, observe.

    Cascades that never leave their source set are redrawn from a fresh
    stream, at most ``RETRY_CAP`` times.
    """
    k = source_count(g.node_count, cfg.source_fraction)
    for attempt in range(RETRY_CAP):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index), attempt]))
        sources = rng.choice(g.node_count, size=k, replace=False)
        cascade = simulate(g, sources, cfg, rng)
        x_star, y = observe(cascade, cfg)
        if (y > x_star).any():
            return Sample(x_star=x_star, y=y, id=index, model=cfg.model)
        log.debug("cascade %d attempt %d did not spread; retrying", index, attempt)
    raise PropagationError(f"cascade {index}: no spread after {RETRY_CAP} attempts")


@dataclass
class Dataset:
    samples: list[Sample]
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], dict(self.header))

    def write(self, path) -> None:
        lines = [DATASET_MAGIC + " " + json.dumps(self.header, sort_keys=True)]
        for s in self.samples:
            src = ",".join(map(str, np.flatnonzero(s.x_star)))
            obs = ",".join(map(str, np.flatnonzero(s.y)))
            lines.append(f"{s.id}\t{s.model}\t{src}\t{obs}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, node_count: int | None = None) -> "Dataset":
        text = Path(path).read_text().splitlines()
        if not text or not text[0].startswith(DATASET_MAGIC):
            raise PropagationError(f"{path}: not a cascade dataset file")
        header = json.loads(text[0][len(DATASET_MAGIC):])
        n = node_count if node_count is not None else header["node_count"]
        samples = []
        for lineno, line in enumerate(text[1:], start=2):
            if not line:
                continue
            try:
                sid, model, src, obs = line.split("\t")
                x = np.zeros(n, dtype=np.uint8)
                y = np.zeros(n, dtype=np.uint8)
                x[[int(v) for v in src.split(",") if v]] = 1
                y[[int(v) for v in obs.split(",") if v]] = 1
                samples.append(Sample(x_star=x, y=y, id=int(sid), model=model))
            except (ValueError, IndexError) as exc:
                raise PropagationError(f"{path}:{lineno}: bad record ({exc})") from None
        return cls(samples, header)


def generate_dataset(
    g: Graph,
    cfgs: Sequence[tuple[PropagationConfig, float]],
    count: int,
    seed: int,
    graph_ref: str = "",
) -> Dataset:
    """Draw ``count`` samples, picking each cascade's model by mixture weight.

    Cascade ``i`` uses its own stream derived from (seed, i), so the result does
    not depend on generation order.
    """
    if not cfgs:
        raise ValueError("at least one propagation config is required")
    weights = np.array([w for _, w in cfgs], dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("mixture weights must be positive")
    weights /= weights.sum()

    samples, kinds = [], []
    for i in range(count):
        pick = np.random.default_rng(np.random.SeedSequence([int(seed), i, 1 << 20]))
        j = int(pick.choice(len(cfgs), p=weights))
        kinds.append(j)
        samples.append(make_sample(g, cfgs[j][0], seed, i))
    header = {
        "graph": str(graph_ref),
        "node_count": g.node_count,
        "configs": [dict(c.to_dict(), weight=float(w)) for c, w in cfgs],
        "count": count,
        "seed": int(seed),
        "model_counts": [kinds.count(j) for j in range(len(cfgs))],
    }
    return Dataset(samples, header)
