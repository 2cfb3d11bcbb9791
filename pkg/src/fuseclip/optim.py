"""Adaptive-moment optimizer with decoupled weight decay, plus gradient
clipping by global norm.

Parameter tensors are mutated in place; everything else in the library
treats tensor data as immutable after the forward pass.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

Array = np.ndarray


class AdamW:
    """Adam with weight decay applied directly to the parameters.

    The decay term is not folded into the gradient, so it is unaffected by
    the moment normalization. Bias-corrected moments follow the standard
    recursion; the step counter starts at zero and increases by one per
    ``step`` call.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if not params:
            raise ContractError("optimizer needs at least one parameter")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ContractError(f"betas must lie in [0, 1): {betas}")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update, then clear all gradients."""
        for p in self.params:
            if p.grad is None:
                raise ContractError("optimizer step with a missing gradient")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, Array]:
        """Moment buffers keyed for checkpointing."""
        out: dict[str, Array] = {}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, Array], step_count: int) -> None:
        for i, p in enumerate(self.params):
            m = arrays[f"m.{i}"]
            v = arrays[f"v.{i}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ContractError(
                    f"moment shape mismatch for parameter {i}: "
                    f"{m.shape}/{v.shape} vs {p.data.shape}"
                )
            self.m[i] = m.astype(np.float64, copy=True)
            self.v[i] = v.astype(np.float64, copy=True)
        self.step_count = int(step_count)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    """L2 norm over the concatenation of all gradients; missing grads count
    as zero."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``.

    Returns the pre-clip norm so callers can log it.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
