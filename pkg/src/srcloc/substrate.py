"""Differentiable primitives the denoiser is assembled from.

Thin wrappers over torch autograd so that each primitive can be gradient
checked on its own. Node features are (n, f) or node-major batched (n, B, f),
which lets the sparse product run on a free reshape.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F


def sparse_tensor(m: sp.spmatrix, dtype=torch.float32) -> torch.Tensor:
    coo = m.tocoo()
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.long)
    vals = torch.as_tensor(coo.data, dtype=dtype)
    return torch.sparse_coo_tensor(idx, vals, coo.shape, check_invariants=False).coalesce()


def spmm(adj: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Sparse (n, n) times dense (n, f) or (n, B, f)."""
    if h.ndim == 2:
        return torch.sparse.mm(adj, h)
    n, B, f = h.shape
    return torch.sparse.mm(adj, h.reshape(n, B * f)).reshape(n, B, f)


def affine(h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    out = h @ weight
    return out if bias is None else out + bias


def prelu(h: torch.Tensor, slope: torch.Tensor) -> torch.Tensor:
    return F.prelu(h, slope.reshape(1))


def row_softmax(h: torch.Tensor) -> torch.Tensor:
    return torch.softmax(h, dim=-1)


def layer_norm(h: torch.Tensor, gain: torch.Tensor, offset: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(h, (h.shape[-1],), gain, offset, eps)


def l2(h: torch.Tensor) -> torch.Tensor:
    return (h ** 2).sum()
