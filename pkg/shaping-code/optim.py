"""optim.py
Functional Adam and the softmax Jacobian chain used to move probability gradients onto logits."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple, Union

import numpy as np
from scipy.special import softmax

from common import Config, ConfigError, ShapeMismatchError, require_finite


class AdamConfig(Config):
    """Adam decay rates and stabiliser."""

    DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError(f"Adam decay rates must lie in [0, 1), got {beta1} and {beta2}.")
        if not eps > 0:
            raise ConfigError(f"Adam eps must be positive, got {eps}.")
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    @classmethod
    def from_dict(cls, data: Union[dict, None]) -> AdamConfig:
        data = cls.merged(data, "adam")
        return cls(data["beta1"], data["beta2"], data["eps"])

    def as_dict(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


@dataclass(frozen=True)
class AdamState:
    """Moment buffers and settings for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape: Tuple[int, ...], lr: float, config: Union[AdamConfig, None] = None) -> AdamState:
        """A fresh state with zeroed buffers for parameters of the given shape."""
        config = AdamConfig() if config is None else config
        return cls(np.zeros(shape), np.zeros(shape), 0, float(lr), config.beta1, config.beta2, config.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.

    Args:
        params (np.ndarray): Current parameters.
        grads (np.ndarray): Gradient of the objective at params.
        state (AdamState): Moments from the previous step.

    Raises:
        ShapeMismatchError: If params, grads and buffers differ in shape.
        NumericError: If the gradient is not finite.

    Returns:
        Tuple[np.ndarray, AdamState]: New parameters and new state (t incremented).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatchError(
            f"Adam shapes disagree: params {params.shape}, grads {grads.shape}, state {state.m.shape}."
        )
    require_finite(grads, "gradient")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def softmax_chain(logits: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pulls a gradient with respect to softmax(logits) back onto the logits.

    grad_i = p_i (g_i - sum_j p_j g_j) with p = softmax(logits), applied row-wise.

    Args:
        logits (np.ndarray): A row of logits or a matrix of rows.
        upstream (np.ndarray): Gradient with respect to the probabilities, same shape.

    Returns:
        np.ndarray: Gradient with respect to the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if logits.shape != upstream.shape:
        raise ShapeMismatchError(f"Logits {logits.shape} and upstream gradient {upstream.shape} differ.")
    probs = softmax(logits, axis=-1)
    inner = np.sum(probs * upstream, axis=-1, keepdims=True)
    return probs * (upstream - inner)
