"""Prior-biased Gaussian diffusion: schedule, forward process, posterior, sampler, loss.

The endpoint of the forward chain is N(x_est, I) rather than N(0, I); with
``x_est = 0`` every formula reduces to the standard denoising diffusion one.
Schedule tables are float64 numpy arrays indexed by ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # alpha_bar at t - 1 with alpha_bar_0 = 1
    alpha_bar_prev: np.ndarray
    beta_tilde: np.ndarray
    beta_start: float
    beta_end: float

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def posterior_coefficients(self, t):
        """Weights of (x0, x_t, x_est) in the posterior mean at timestep ``t``."""
        i = np.asarray(t) - 1
        ab, ab_prev = self.alpha_bar[i], self.alpha_bar_prev[i]
        a, b = self.alpha[i], self.beta[i]
        c0 = np.sqrt(ab_prev) * b / (1.0 - ab)
        ct = (1.0 - ab_prev) * np.sqrt(a) / (1.0 - ab)
        ce = 1.0 + (np.sqrt(ab) - 1.0) * (np.sqrt(a) + np.sqrt(ab_prev)) / (1.0 - ab)
        return c0, ct, ce


def make_schedule(T: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, alpha_bar_prev, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, alpha_bar_prev, beta_tilde, beta_start, beta_end)


def _check_t(t, T):
    tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > T:
        raise ValueError(f"timestep must lie in [1, {T}]")
    return tt


def _coef(values, like):
    """Broadcast per-timestep coefficients against a (n,) or (B, n) array."""
    values = np.asarray(values, dtype=np.float64)
    if torch.is_tensor(like):
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    else:
        c = values
    if values.ndim == 1 and like.ndim == 2:
        c = c.reshape(-1, 1)
    return c


def _noise(like, rng):
    if torch.is_tensor(like):
        return torch.randn(like.shape, generator=rng, dtype=like.dtype, device=like.device)
    return np.random.default_rng(rng).standard_normal(np.shape(like))


def forward_sample(x0, x_est, t, sched: NoiseSchedule, rng=None, noise=None):
    """Draw x_t ~ N(sqrt(ab_t) x0 + (1 - sqrt(ab_t)) x_est, (1 - ab_t) I)."""
    tt = _check_t(t, sched.T)
    ab = sched.alpha_bar[tt - 1]
    if noise is None:
        noise = _noise(x0, rng)
    s = _coef(np.sqrt(ab), x0)
    return s * x0 + (1.0 - s) * x_est + _coef(np.sqrt(1.0 - ab), x0) * noise


def forward_step(x_prev, x_est, t, sched: NoiseSchedule, rng=None, noise=None):
    """One Markov transition x_{t-1} -> x_t of the prior-biased chain."""
    tt = _check_t(t, sched.T)
    b = sched.beta[tt - 1]
    if noise is None:
        noise = _noise(x_prev, rng)
    s = _coef(np.sqrt(1.0 - b), x_prev)
    return s * x_prev + (1.0 - s) * x_est + _coef(np.sqrt(b), x_prev) * noise


def posterior_mean_var(x_t, x0_hat, x_est, t, sched: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0, x_est)."""
    tt = _check_t(t, sched.T)
    c0, ct, ce = sched.posterior_coefficients(tt)
    mu = _coef(c0, x_t) * x0_hat + _coef(ct, x_t) * x_t + _coef(ce, x_t) * x_est
    return mu, sched.beta_tilde[tt - 1]


Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def sample_posterior(
    denoiser: Denoiser,
    x_est,
    y,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    n_samples: int = 8,
    dtype=torch.float32,
) -> torch.Tensor:
    """Run the reverse chain from N(x_est, I) and return source probabilities in [0, 1].

    ``x_est`` and ``y`` are (n,) or (B, n); ``denoiser(x_t, t, x_est, y)`` gets
    (B * n_samples, n) tensors and a (B * n_samples,) timestep tensor. A
    denoiser with a ``conditioned(x_est, y)`` method is asked once for a
    step function f(x_t, t) instead. The result is the mean over
    ``n_samples`` of the clamped last x0 prediction.
    """
    x_est = torch.as_tensor(np.asarray(x_est), dtype=dtype)
    y = torch.as_tensor(np.asarray(y), dtype=dtype)
    single = x_est.ndim == 1
    if single:
        x_est, y = x_est[None], y[None]
    B, n = x_est.shape
    xe = x_est.repeat_interleave(n_samples, dim=0)
    yy = y.repeat_interleave(n_samples, dim=0)

    if hasattr(denoiser, "conditioned"):
        step = denoiser.conditioned(xe, yy)
    else:
        step = lambda x_t, t: denoiser(x_t, t, xe, yy)  # noqa: E731

    x = xe + torch.randn(xe.shape, generator=generator, dtype=dtype)
    x0_hat = None
    for t in range(sched.T, 0, -1):
        tvec = torch.full((B * n_samples,), t, dtype=torch.long)
        x0_hat = step(x, tvec)
        if not torch.isfinite(x0_hat).all():
            raise SamplingError(f"non-finite denoiser output at timestep {t}")
        mu, var = posterior_mean_var(x, x0_hat, xe, t, sched)
        if t > 1:
            x = mu + float(np.sqrt(var)) * torch.randn(x.shape, generator=generator, dtype=dtype)
        else:
            x = mu
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite chain state at timestep {t}")
    out = x0_hat.clamp(0.0, 1.0).reshape(B, n_samples, n).mean(dim=1)
    return out[0] if single else out


def training_loss(
    denoiser: Denoiser,
    x0: torch.Tensor,
    x_est: torch.Tensor,
    y: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over nodes (and batch) of ||x0 - f(x_t, t, x_est, y)||^2."""
    if x0.ndim == 1:
        x0, x_est, y = x0[None], x_est[None], y[None]
    B = x0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_sample(x0, x_est, t, sched, noise=noise)
    pred = denoiser(x_t, t, x_est, y)
    return ((x0 - pred) ** 2).mean()
