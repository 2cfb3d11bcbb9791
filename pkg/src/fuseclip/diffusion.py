"""Denoising diffusion on image vectors, conditioned on the joint embedding.

Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with a cosine
abar schedule. The denoiser predicts eps from (x_t, t, e); sampling runs
the standard ancestral reversal with the schedule's posterior variance.
The condition pathway is cross-attention from the hidden state onto the
full embedding sequence, so identity and caption content both reach the
denoiser when the encoder provides them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .fusion import Module

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels, indexed 0..T with abar[0] = 1."""

    betas: Array
    alphas: Array
    alpha_bar: Array

    @property
    def timesteps(self) -> int:
        return self.betas.shape[0] - 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ConfigError("schedule must start at alpha_bar = 1")
        if np.any(np.diff(ab) >= 0.0):
            raise ConfigError("alpha_bar must decrease strictly after step 0")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ConfigError("alpha_bar must stay in (0, 1]")


def cosine_schedule(timesteps: int = 100, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine abar schedule with the usual per-step beta cap."""
    if timesteps < 1:
        raise ConfigError(f"need at least one step, got {timesteps}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos((t / timesteps + s) / (1.0 + s) * math.pi / 2.0) ** 2
    betas = np.zeros(timesteps + 1)
    betas[1:] = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def ddpm_noising(x0: Array, t, eps: Array, schedule: NoiseSchedule) -> Array:
    """Interpolate clean signal and noise at step ``t`` (scalar or per-row)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ContractError(f"noise shape {eps.shape} does not match {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.timesteps):
        raise ContractError(
            f"step {t} outside schedule range [0, {schedule.timesteps}]"
        )
    ab = schedule.alpha_bar[t]
    if x0.ndim == 2:
        ab = np.reshape(ab, (-1, 1)) if ab.ndim == 1 else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


class Denoiser(Module):
    """Epsilon predictor: residual MLP trunk with sinusoidal time features
    and cross-attention conditioning on the embedding sequence.

    The output head starts at zero, so an untrained denoiser predicts zero
    noise and the first-step training loss sits at the noise variance.
    """

    def __init__(
        self,
        d_x: int,
        d_cond: int,
        hidden: int,
        timesteps: int,
        rng: np.random.Generator,
    ):
        if hidden < 2:
            raise ConfigError(f"hidden width must be >= 2, got {hidden}")
        self.d_x = d_x
        self.d_cond = d_cond
        self.hidden = hidden
        self.time_table = ad.sinusoidal_positions(timesteps + 1, hidden)
        s_in = 1.0 / math.sqrt(d_x)
        s_h = 1.0 / math.sqrt(hidden)
        s_c = 1.0 / math.sqrt(d_cond)
        g = rng.standard_normal
        self.in_weight = Tensor(s_in * g((d_x, hidden)), requires_grad=True)
        self.in_bias = Tensor(np.zeros(hidden), requires_grad=True)
        self.time_weight = Tensor(s_h * g((hidden, hidden)), requires_grad=True)
        self.attn_q = Tensor(s_h * g((hidden, hidden)), requires_grad=True)
        self.attn_k = Tensor(s_c * g((d_cond, hidden)), requires_grad=True)
        self.attn_v = Tensor(s_c * g((d_cond, hidden)), requires_grad=True)
        self.attn_o = Tensor(np.zeros((hidden, hidden)), requires_grad=True)
        self.mlp: list[tuple[Tensor, Tensor, Tensor, Tensor]] = []
        for i in range(2):
            self.mlp.append(
                (
                    Tensor(s_h * g((hidden, hidden)), requires_grad=True),
                    Tensor(np.zeros(hidden), requires_grad=True),
                    Tensor(np.zeros((hidden, hidden)), requires_grad=True),
                    Tensor(np.zeros(hidden), requires_grad=True),
                )
            )
        self.out_weight = Tensor(np.zeros((hidden, d_x)), requires_grad=True)
        self.out_bias = Tensor(np.zeros(d_x), requires_grad=True)

    def named_parameters(self):
        named = [
            ("denoiser.in.weight", self.in_weight),
            ("denoiser.in.bias", self.in_bias),
            ("denoiser.time.weight", self.time_weight),
            ("denoiser.attn.q", self.attn_q),
            ("denoiser.attn.k", self.attn_k),
            ("denoiser.attn.v", self.attn_v),
            ("denoiser.attn.o", self.attn_o),
        ]
        for i, (w1, b1, w2, b2) in enumerate(self.mlp):
            named += [
                (f"denoiser.mlp{i}.w1", w1),
                (f"denoiser.mlp{i}.b1", b1),
                (f"denoiser.mlp{i}.w2", w2),
                (f"denoiser.mlp{i}.b2", b2),
            ]
        named += [
            ("denoiser.out.weight", self.out_weight),
            ("denoiser.out.bias", self.out_bias),
        ]
        return named

    def __call__(
        self,
        x_t: Array,
        t: Array,
        condition: Tensor,
        condition_mask: Array | None = None,
    ) -> Tensor:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 2 or x_t.shape[1] != self.d_x:
            raise ContractError(f"x_t must be (batch, {self.d_x}), got {x_t.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.intp), (x_t.shape[0],))
        h = ad.linear(Tensor(x_t), self.in_weight, self.in_bias)
        h = h + Tensor(self.time_table[t]) @ self.time_weight
        q = ad.reshape(h @ self.attn_q, (x_t.shape[0], 1, self.hidden))
        k = condition @ self.attn_k
        v = condition @ self.attn_v
        mask = None if condition_mask is None else condition_mask[:, :]
        context = ad.scaled_dot_attention(q, k, v, key_mask=mask)
        h = h + ad.reshape(context, (x_t.shape[0], self.hidden)) @ self.attn_o
        for w1, b1, w2, b2 in self.mlp:
            h = h + ad.linear(ad.gelu(ad.linear(h, w1, b1)), w2, b2)
        return ad.linear(h, self.out_weight, self.out_bias)


def diffusion_loss(
    denoiser: Denoiser,
    x0: Array,
    condition: Tensor,
    condition_mask: Array | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[Tensor, Array]:
    """Mean squared error between true and predicted noise at random steps."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(1, schedule.timesteps + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = ddpm_noising(x0, t, eps, schedule)
    pred = denoiser(x_t, t, condition, condition_mask)
    diff = pred - Tensor(eps)
    return ad.tmean(diff * diff), t


def ddpm_sample(
    denoiser: Denoiser,
    condition: Tensor,
    condition_mask: Array | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    clip_x0: float | None = 2.0,
) -> Array:
    """Ancestral sampling from pure noise down to a clean estimate.

    Each step forms the implied clean image, clamps it to ``clip_x0``, and
    takes the posterior mean. The clamp matters: the final capped beta puts
    a 1/sqrt(alpha_T) factor on the prediction error, and one bad first
    step otherwise blows the whole chain off scale. ``None`` disables it,
    recovering the raw algebraic update (exact for an oracle predictor at
    any input scale).
    """
    if clip_x0 is not None and clip_x0 <= 0.0:
        raise ConfigError(f"clip bound must be positive, got {clip_x0}")
    n = condition.shape[0]
    x = rng.standard_normal((n, denoiser.d_x))
    for t in range(schedule.timesteps, 0, -1):
        eps_hat = denoiser(x, np.full(n, t), condition, condition_mask).data
        beta = schedule.betas[t]
        ab_t = schedule.alpha_bar[t]
        ab_prev = schedule.alpha_bar[t - 1]
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if clip_x0 is not None:
            np.clip(x0_hat, -clip_x0, clip_x0, out=x0_hat)
        mean = (
            math.sqrt(ab_prev) * beta / (1.0 - ab_t) * x0_hat
            + math.sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab_t) * x
        )
        if t > 1:
            var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
            x = mean + math.sqrt(var) * rng.standard_normal((n, denoiser.d_x))
        else:
            x = mean
    return x
