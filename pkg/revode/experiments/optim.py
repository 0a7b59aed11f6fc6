"""AdamW on flat parameter vectors."""

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..errors import ConfigurationError


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = 1e-2
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @model_validator(mode="after")
    def _check(self):
        if not self.lr > 0.0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0.0 or self.eps <= 0.0:
            raise ConfigurationError("weight decay must be >= 0 and eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        return self


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adamw_update(
    params: np.ndarray, grads: np.ndarray, state: OptimizerState, cfg: OptimizerConfig
) -> Tuple[np.ndarray, OptimizerState]:
    """
    One AdamW step with decoupled weight decay applied before the Adam update.

    Args:
        params: Flat parameter vector
        grads: Gradient with the same shape
        state: Moment estimates and step counter
        cfg: Hyperparameters

    Returns:
        Tuple[np.ndarray, OptimizerState]: Updated parameters and state
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigurationError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    step = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1 ** step)
    v_hat = v / (1.0 - cfg.beta2 ** step)

    decayed = params * (1.0 - cfg.lr * cfg.weight_decay)
    updated = decayed - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return updated, replace(state, m=m, v=v, step=step)
