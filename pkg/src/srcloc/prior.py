"""Label-propagation source estimates and the centrality ablation prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .graph import Graph, GraphOperators, closeness_centrality


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LpsiConfig:
    alpha: float = 0.5
    tol: float = 1e-10
    max_iter: int = 10_000
    solver: str = "direct"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha={self.alpha} must lie in (0, 1)")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be > 0 and max_iter >= 1")
        if self.solver not in ("direct", "iterative"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class PriorVector:
    z_star: np.ndarray
    x_est: np.ndarray


def signed_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("observation vector must be binary")
    return np.where(y > 0, 1.0, -1.0)


def lpsi_iterate(y, ops: GraphOperators, cfg: LpsiConfig = LpsiConfig()) -> np.ndarray:
    """Run Z <- a S Z + (1 - a) Y* from Z = Y* until the sup-norm step is below tol."""
    y_star = signed_labels(y)
    a = cfg.alpha
    z = y_star.copy()
    residual = np.inf
    for _ in range(cfg.max_iter):
        z_next = a * (ops.S @ z) + (1.0 - a) * y_star
        residual = np.max(np.abs(z_next - z))
        z = z_next
        if residual < cfg.tol:
            return z
    raise ConvergenceError(f"label propagation did not converge in {cfg.max_iter} iterations (residual {residual:.3e})")


def lpsi_closed(y, ops: GraphOperators, alpha: float = 0.5) -> np.ndarray:
    """Solve (I - a S) Z* = (1 - a) Y* by sparse LU."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha={alpha} must lie in (0, 1)")
    y_star = signed_labels(y)
    n = len(y_star)
    M = (sp.identity(n, format="csc") - alpha * ops.S).tocsc()
    z = splu(M).solve((1.0 - alpha) * y_star)
    assert np.all(np.isfinite(z)), "singular label-propagation system"
    return z


def identify_sources_localmax(z_star, g: Graph, mask=None) -> np.ndarray:
    """Nodes whose label strictly exceeds every neighbour's label.

    With ``mask`` only nodes where ``mask`` is nonzero are candidates. Nodes
    without neighbours are never reported.
    """
    z = np.asarray(z_star, dtype=np.float64)
    if len(z) != g.node_count:
        raise ValueError("label vector length does not match the graph")
    A = g.adjacency.tocoo()
    # max over neighbours via per-row reduction of z[col]
    neigh_max = np.full(g.node_count, -np.inf)
    np.maximum.at(neigh_max, A.row, z[A.col])
    hit = z > neigh_max
    hit &= g.degrees > 0
    if mask is not None:
        hit &= np.asarray(mask) > 0
    return np.flatnonzero(hit)


def rescale(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    lo, hi = z.min(), z.max()
    if hi - lo <= 0:
        return np.full_like(z, 0.5)
    return (z - lo) / (hi - lo)


def compute_x_est(y, ops: GraphOperators, cfg: LpsiConfig = LpsiConfig()) -> PriorVector:
    if cfg.solver == "direct":
        z = lpsi_closed(y, ops, cfg.alpha)
    else:
        z = lpsi_iterate(y, ops, cfg)
    return PriorVector(z_star=z, x_est=rescale(z))


def centrality_prior(y, g: Graph) -> PriorVector:
    """One-hot at the infected node with the highest closeness inside the infected subgraph."""
    infected = np.flatnonzero(np.asarray(y) > 0)
    if len(infected) == 0:
        raise ValueError("centrality prior needs at least one infected node")
    cc = closeness_centrality(g, infected)
    best = infected[int(np.argmax(cc))]
    x = np.zeros(g.node_count)
    x[best] = 1.0
    z = np.zeros(g.node_count)
    z[infected] = cc
    return PriorVector(z_star=z, x_est=x)


def lpsi_predict(y, g: Graph, ops: GraphOperators, alpha: float = 0.5) -> np.ndarray:
    """LPSI baseline: binary vector of infected local maxima of Z*."""
    z = lpsi_closed(y, ops, alpha)
    pred = np.zeros(g.node_count, dtype=np.uint8)
    pred[identify_sources_localmax(z, g, mask=y)] = 1
    return pred
