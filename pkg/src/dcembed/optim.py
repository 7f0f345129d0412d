"""Adam optimizer with externally owned per-parameter state.

State objects are keyed by parameter name in the trainer (one per embedding
slice, one per adapter matrix) so that updating one learner never perturbs
the moment estimates of another.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=np.zeros_like(param), v=np.zeros_like(param),
            t=0, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One Adam update, in place on ``param`` (which may be a row view)."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape}"
        )
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class AdamGroup:
    """Named collection of AdamStates sharing hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def state_for(self, name: str, param: np.ndarray) -> AdamState:
        if name not in self.states:
            self.states[name] = AdamState.for_param(
                param, self.beta1, self.beta2, self.eps
            )
        return self.states[name]

    def step(self, name: str, param: np.ndarray, grad: np.ndarray,
             lr_scale: float = 1.0) -> None:
        adam_step(param, grad, self.state_for(name, param), self.lr * lr_scale)

    def reset(self, name: str) -> None:
        self.states.pop(name, None)
