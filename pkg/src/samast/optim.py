"""SGD, AdamW and the sharpness-aware two-step wrapper.

All steps are functional: they take parameter/gradient dicts keyed by name
and return new arrays, leaving their inputs untouched. Iteration order over
parameters is the dict's insertion order, which fixes every reduction order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DegenerateGradientError

Params = Mapping[str, np.ndarray]
LossBuilder = Callable[[dict], ad.Tensor]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sam: bool = False
    rho: float = 0.05

    def validate(self) -> "OptimizerConfig":
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adamw', got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.rho < 0:
            raise ConfigError(f"rho must be nonnegative, got {self.rho}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m/{k}": v for k, v in self.m.items()}
        out.update({f"optim.v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray] | None) -> "OptimizerState":
        state = cls(step=step)
        for key, value in (arrays or {}).items():
            kind, _, name = key.partition("/")
            if kind == "optim.m":
                state.m[name] = value
            elif kind == "optim.v":
                state.v[name] = value
        return state


def _check_shapes(params: Params, grads: Params) -> None:
    for name, w in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != np.shape(w):
            raise ContractError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(w)}")


def sgd_step(params: Params, grads: Params, config: OptimizerConfig) -> dict[str, np.ndarray]:
    """``w - lr * (g + wd * w)``."""
    _check_shapes(params, grads)
    lr, wd = config.lr, config.weight_decay
    return {name: w - lr * (grads[name] + wd * w) for name, w in params.items()}


def adamw_step(
    params: Params, grads: Params, state: OptimizerState, config: OptimizerConfig
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam with weight decay decoupled from the adaptive term."""
    _check_shapes(params, grads)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_state = {}, OptimizerState(step=t)
    for name, w in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_params[name] = w - config.lr * update - config.lr * config.weight_decay * w
        new_state.m[name], new_state.v[name] = m, v
    return new_params, new_state


def base_step(
    params: Params, grads: Params, state: OptimizerState, config: OptimizerConfig
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    if config.kind == "sgd":
        return sgd_step(params, grads, config), OptimizerState(step=state.step + 1)
    return adamw_step(params, grads, state, config)


def global_norm(grads: Params) -> float:
    """Euclidean norm of all gradient entries taken together."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def sam_perturbation(grads: Params, rho: float) -> dict[str, np.ndarray]:
    """``rho * g / ||g||`` with the norm over every parameter jointly.

    Raises :class:`DegenerateGradientError` when the gradient is all zero.
    """
    norm = global_norm(grads)
    if norm == 0.0:
        raise DegenerateGradientError("gradient is identically zero; ascent direction undefined")
    scale = rho / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class StepMetrics:
    loss: float
    loss_perturbed: float | None = None
    grad_norm: float = 0.0
    degenerate: bool = False

    @property
    def sharpness(self) -> float | None:
        if self.loss_perturbed is None:
            return None
        return self.loss_perturbed - self.loss


def sam_step(
    loss_fn: LossBuilder, params: Params, state: OptimizerState, config: OptimizerConfig
) -> tuple[dict[str, np.ndarray], OptimizerState, StepMetrics]:
    """One training iteration; sharpness-aware when ``config.sam`` and ``rho > 0``.

    ``loss_fn`` maps a dict of parameter tensors to a scalar loss and must
    describe the same objective on both calls (same batch, same dropout
    masks). The base update is taken from the original weights using the
    gradient at ``w + eps_hat``.
    """
    loss, grads = ad.value_and_grad(loss_fn, params)
    metrics = StepMetrics(loss=loss, grad_norm=global_norm(grads))
    if config.sam and config.rho > 0:
        try:
            eps = sam_perturbation(grads, config.rho)
        except DegenerateGradientError:
            metrics.degenerate = True
        else:
            shifted = {name: w + eps[name] for name, w in params.items()}
            metrics.loss_perturbed, grads = ad.value_and_grad(loss_fn, shifted)
    new_params, new_state = base_step(params, grads, state, config)
    return new_params, new_state, metrics


@dataclass
class SharpnessEstimate:
    value: float
    degenerate: bool = False


def sharpness_probe(loss_fn: LossBuilder, params: Params, rho: float) -> SharpnessEstimate:
    """Loss increase after moving ``rho`` along the normalized gradient."""
    loss, grads = ad.value_and_grad(loss_fn, params)
    try:
        eps = sam_perturbation(grads, rho)
    except DegenerateGradientError:
        return SharpnessEstimate(0.0, degenerate=True)
    shifted = {name: w + eps[name] for name, w in params.items()}
    return SharpnessEstimate(ad.evaluate(loss_fn, shifted) - loss)
