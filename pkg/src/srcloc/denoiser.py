"""Graph-conditioned x0 predictor used inside the reverse diffusion chain."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import substrate as ops_
from .graph import GraphOperators


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_dim: int = 128
    cond_dim: int = 8
    prior_encoder_layers: int = 2
    encoder_layers: int = 3
    decoder_layers: int = 3
    cond_layers: int = 2
    ablate_gnnlp: bool = False

    def __post_init__(self):
        for name in ("prior_encoder_layers", "encoder_layers", "decoder_layers", "cond_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim < 2 or self.hidden_dim % 2 or self.cond_dim < 1:
            raise ValueError("hidden_dim must be even and >= 2, cond_dim >= 1")

    @property
    def time_embed_dim(self) -> int:
        return self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


class TorchGraph:
    """Graph operators as sparse torch tensors, cached per dtype."""

    def __init__(self, ops: GraphOperators):
        self.ops = ops
        self.n = ops.S.shape[0]
        self._cache = {}

    def get(self, name: str, dtype) -> torch.Tensor:
        key = (name, dtype)
        if key not in self._cache:
            self._cache[key] = ops_.sparse_tensor(getattr(self.ops, name), dtype)
        return self._cache[key]


def sinusoidal_embed(t, dim: int) -> torch.Tensor:
    """Interleaved (sin, cos) pairs with frequencies 10000^(-2k/dim).

    ``t`` may be a scalar or a 1-D tensor; returns (dim,) or (len(t), dim).
    """
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.float64)
    freqs = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    angles = t.unsqueeze(-1) * freqs
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return emb.reshape(*t.shape, dim)


class PReLU(nn.Module):
    def __init__(self):
        super().__init__()
        self.slope = nn.Parameter(torch.tensor(0.25))

    def forward(self, h):
        return ops_.prelu(h, self.slope)


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(fan_in, fan_out))
        self.bias = nn.Parameter(torch.empty(fan_out)) if bias else None

    def forward(self, h):
        return ops_.affine(h, self.weight, self.bias)


class GCNLayer(Linear):
    """H' = A_hat H W + b."""

    def forward(self, adj, h):
        out = ops_.spmm(adj, h @ self.weight)
        return out if self.bias is None else out + self.bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.offset = nn.Parameter(torch.zeros(dim))

    def forward(self, h):
        return ops_.layer_norm(h, self.gain, self.offset)


class GCNStack(nn.Module):
    """GCN layers with PReLU between them (and after the last if ``final_act``)."""

    def __init__(self, dims: list[int], final_act: bool = False):
        super().__init__()
        self.layers = nn.ModuleList(GCNLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))
        n_act = len(self.layers) if final_act else len(self.layers) - 1
        self.acts = nn.ModuleList(PReLU() for _ in range(n_act))

    def forward(self, adj, h):
        for i, layer in enumerate(self.layers):
            h = layer(adj, h)
            if i < len(self.acts):
                h = self.acts[i](h)
        return h


class GNNLP(nn.Module):
    """Residual GCN over signed observations, read out through the Laplacian.

    h0 = Y* U^T, h_{l+1} = h0 + PReLU(A_hat h_l w_l), h_out = L (h_last p).
    """

    def __init__(self, cond_dim: int, layers: int):
        super().__init__()
        self.lift = Linear(1, cond_dim, bias=False)
        self.weights = nn.ParameterList(nn.Parameter(torch.empty(cond_dim, cond_dim)) for _ in range(layers))
        self.acts = nn.ModuleList(PReLU() for _ in range(layers))
        self.project = Linear(cond_dim, 1)

    def forward(self, y, graph: TorchGraph):
        dtype = self.project.weight.dtype
        adj, lap = graph.get("gcn_adj", dtype), graph.get("L", dtype)
        h0 = self.lift((2.0 * y - 1.0).unsqueeze(-1))
        h = h0
        for w, act in zip(self.weights, self.acts):
            h = h0 + act(ops_.spmm(adj, h @ w))
        return ops_.spmm(lap, self.project(h))


class PlainConditioner(nn.Module):
    """Non-residual GCN over the raw observation, same parameter budget as GNNLP."""

    def __init__(self, cond_dim: int, layers: int):
        super().__init__()
        self.lift = Linear(1, cond_dim, bias=False)
        self.weights = nn.ParameterList(nn.Parameter(torch.empty(cond_dim, cond_dim)) for _ in range(layers))
        self.acts = nn.ModuleList(PReLU() for _ in range(layers))
        self.project = Linear(cond_dim, 1)

    def forward(self, y, graph: TorchGraph):
        adj = graph.get("gcn_adj", self.project.weight.dtype)
        h = self.lift(y.unsqueeze(-1))
        for w, act in zip(self.weights, self.acts):
            h = act(ops_.spmm(adj, h @ w))
        return self.project(h)


class SourceDenoiser(nn.Module):
    """Predicts x0 from (x_t, t, x_est, y) on one graph.

    Public inputs are (B, n) tensors plus a (B,) timestep tensor and the
    output is (B, n). Internally features are node-major (n, B, f).
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        h, c = config.hidden_dim, config.cond_dim
        self.prior_encoder = GCNStack([1] + [h] * config.prior_encoder_layers, final_act=True)
        self.prior_out = Linear(h, 1)
        self.lift = Linear(1, h)
        self.time_proj = Linear(h, h)
        self.encoder = GCNStack([h] * (config.encoder_layers + 1))
        self.norm = LayerNorm(h)
        cond_cls = PlainConditioner if config.ablate_gnnlp else GNNLP
        self.conditioner = cond_cls(c, config.cond_layers)
        self.decoder = GCNStack([h + 1] + [h] * (config.decoder_layers - 1) + [1])

    @property
    def dtype(self):
        return self.lift.weight.dtype

    @staticmethod
    def _finite(h, where):
        if not torch.isfinite(h).all():
            raise FloatingPointError(f"non-finite activations in {where}")
        return h

    def context(self, x_est, y, graph: TorchGraph):
        """The parts that do not depend on (x_t, t): prior branch and h_out, node-major."""
        adj = graph.get("gcn_adj", self.dtype)
        x_est = x_est.to(self.dtype).T.contiguous()
        y = y.to(self.dtype).T.contiguous()
        prior = self.prior_out(self.prior_encoder(adj, x_est.unsqueeze(-1)))
        prior = self._finite(prior, "prior encoder")
        h_out = self._finite(self.conditioner(y, graph), "conditioner")
        return prior, h_out

    def denoise(self, x_t, t, context, graph: TorchGraph):
        adj = graph.get("gcn_adj", self.dtype)
        prior, h_out = context
        x_t = x_t.to(self.dtype).T.unsqueeze(-1)
        emb = self.time_proj(sinusoidal_embed(t, self.config.hidden_dim).to(self.dtype))
        z_e = self.lift(prior + x_t) + emb.unsqueeze(0)
        z_d = self.norm(ops_.row_softmax(self.encoder(adj, z_e)))
        z_d = self._finite(z_d, "encoder")
        out = self.decoder(adj, torch.cat([z_d, h_out], dim=-1)).squeeze(-1)
        return self._finite(out, "decoder").T

    def forward(self, x_t, t, x_est, y, graph: TorchGraph):
        squeeze = x_t.ndim == 1
        if squeeze:
            x_t, x_est, y = x_t[None], x_est[None], y[None]
        t = torch.as_tensor(t).reshape(-1)
        if len(t) == 1 and x_t.shape[0] > 1:
            t = t.expand(x_t.shape[0])
        out = self.denoise(x_t, t, self.context(x_est, y, graph), graph)
        return out[0] if squeeze else out

    def bind(self, graph: TorchGraph) -> "BoundDenoiser":
        return BoundDenoiser(self, graph)


class BoundDenoiser:
    """A denoiser fixed to one graph, callable as f(x_t, t, x_est, y).

    ``conditioned(x_est, y)`` precomputes the x_t-independent branches once
    and returns a step function f(x_t, t), which the reverse chain uses.
    """

    def __init__(self, model: SourceDenoiser, graph: TorchGraph):
        self.model = model
        self.graph = graph

    def __call__(self, x_t, t, x_est, y):
        return self.model(x_t, t, x_est, y, self.graph)

    def conditioned(self, x_est, y):
        ctx = self.model.context(x_est, y, self.graph)
        return lambda x_t, t: self.model.denoise(x_t, t, ctx, self.graph)


def init_params(config: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> SourceDenoiser:
    """Fresh denoiser with fan-in scaled uniform weights.

    PReLU slopes start at 0.25, layer-norm gains at 1 and offsets at 0.
    """
    model = SourceDenoiser(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("slope") or name.startswith("norm."):
                continue
            if name.endswith("bias"):
                fan_in = _owner_fan_in(model, name)
            else:
                fan_in = p.shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
    return model.to(dtype)


def _owner_fan_in(model: nn.Module, bias_name: str) -> int:
    owner = model.get_submodule(bias_name.rsplit(".", 1)[0])
    return owner.weight.shape[0]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def gnnlp_forward(y, graph: TorchGraph, conditioner: GNNLP) -> torch.Tensor:
    """Conditioning signal h_out for a single observation ``y`` of length n."""
    y = torch.as_tensor(np.asarray(y) if not torch.is_tensor(y) else y, dtype=conditioner.project.weight.dtype)
    return conditioner(y, graph).squeeze(-1)
