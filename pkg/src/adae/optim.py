"""Bias-corrected Adam, one moment pair per parameter tensor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["NonFiniteGradientError", "AdamState", "adam_step", "Adam"]


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN/Inf; the message names the parameter."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, beta1: float = 0.5, beta2: float = 0.999,
                  epsilon: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data),
                   beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One in-place Adam update of ``param`` with the given learning rate."""
    if grad.shape != param.data.shape:
        raise ValueError(
            f"adam_step: grad shape {grad.shape} does not match param shape "
            f"{param.data.shape} ({param.name or 'unnamed'})")
    if lr < 0:
        raise ValueError(f"adam_step: learning rate must be >= 0, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            f"non-finite gradient for parameter {param.name or 'unnamed'}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * np.square(grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass
class Adam:
    """Optimizer over a fixed parameter list; the step rate is passed per call
    so the adversarial balancer can reweight it every batch."""

    params: list[Tensor]
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict[int, AdamState] = field(init=False)

    def __post_init__(self):
        self.states = {
            id(p): AdamState.for_param(p, self.beta1, self.beta2, self.epsilon)
            for p in self.params
        }

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            adam_step(p, p.grad, self.states[id(p)], lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        """Flatten moments (and step counters) for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for p in self.params:
            s = self.states[id(p)]
            name = p.name or f"param{id(p)}"
            out[f"{prefix}.{name}.m"] = s.m
            out[f"{prefix}.{name}.v"] = s.v
            out[f"{prefix}.{name}.t"] = np.array([s.t], dtype=np.int64)
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for p in self.params:
            s = self.states[id(p)]
            name = p.name or f"param{id(p)}"
            key = f"{prefix}.{name}"
            if f"{key}.m" in arrays:
                s.m = arrays[f"{key}.m"].astype(s.m.dtype, copy=True).reshape(s.m.shape)
                s.v = arrays[f"{key}.v"].astype(s.v.dtype, copy=True).reshape(s.v.shape)
                s.t = int(arrays[f"{key}.t"][0])
