"""Deterministic mini-batch training loop over cached spectrograms."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import make_weights, weighted_sample
from .errors import ConfigError
from .model import ModelCheckpoint, ModelConfig, forward_batch, init_params, predict, save_checkpoint
from .optim import OptimizerConfig, OptimizerState, sam_step

# stream tags for np.random.default_rng([seed, tag, ...])
_INIT, _SAMPLER, _DROPOUT = 0, 1, 2


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    batch_size: int = 8
    sampler: str = "uniform"
    seed: int = 0

    def validate(self) -> "TrainSettings":
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.sampler not in ("uniform", "weighted"):
            raise ConfigError(f"sampler must be 'uniform' or 'weighted', got {self.sampler!r}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        return self


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    state: OptimizerState
    config: ModelConfig
    log_lines: list[str]
    train_accuracy: float
    losses: list[float]


STD_FLOOR = 1e-3


def standardization(values: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-mel-bin mean and standard deviation of ``[n, bins, frames]`` training spectrograms.

    Bins that never leave the log floor have zero spread; their std is floored
    so they map to zero instead of dividing by zero.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=(0, 2))
    std = np.maximum(values.std(axis=(0, 2)), STD_FLOOR)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def epoch_batches(labels: np.ndarray, settings: TrainSettings, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch: ``ceil(n / batch)`` of them.

    ``uniform`` shuffles once without replacement (the last batch may be
    short); ``weighted`` draws full batches with replacement so every class
    has draw probability 1/K.
    """
    n = len(labels)
    steps = math.ceil(n / settings.batch_size)
    rng = np.random.default_rng([settings.seed, _SAMPLER, epoch])
    if settings.sampler == "uniform":
        order = rng.permutation(n)
        return [order[i * settings.batch_size : (i + 1) * settings.batch_size] for i in range(steps)]
    draws = weighted_sample(make_weights(labels), steps * settings.batch_size, rng)
    return list(draws.reshape(steps, settings.batch_size))


def _format_step(epoch: int, step: int, metrics) -> str:
    line = f"epoch={epoch} step={step} loss={metrics.loss:.8f}"
    if metrics.loss_perturbed is not None:
        line += f" loss_perturbed={metrics.loss_perturbed:.8f} sharpness={metrics.sharpness:.8f}"
    elif metrics.degenerate:
        line += " sharpness=degenerate"
    return line


def predict_logits(values: np.ndarray, params, config: ModelConfig, batch_size: int = 16) -> np.ndarray:
    """Eval-mode logits ``[n, K]`` in fixed-size chunks."""
    out = [forward_batch(values[i : i + batch_size], params, config).data for i in range(0, len(values), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


def train(
    values: np.ndarray,
    labels: Sequence[int],
    model_config: ModelConfig,
    optim_config: OptimizerConfig,
    settings: TrainSettings,
    checkpoint_dir: Path | None = None,
    on_line: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train from a fresh seeded initialization on ``values [n, bins, frames]``.

    Input standardization constants are computed from ``values`` and folded
    into the returned model config. Every line of the returned log is a pure
    function of the inputs and settings.
    """
    settings.validate()
    optim_config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(values) != len(labels) or len(labels) == 0:
        raise ConfigError(f"{len(values)} spectrograms vs {len(labels)} labels")
    mean, std = standardization(values)
    config = replace(model_config, norm_mean=mean, norm_std=std).validate()
    params = init_params(config, settings.seed)
    state = OptimizerState()
    lines: list[str] = []
    losses: list[float] = []

    def emit(line: str) -> None:
        lines.append(line)
        if on_line is not None:
            on_line(line)

    # rho=0 under SAM is the base optimizer, so the header names only the effective method
    method = f"sam-{optim_config.kind} rho={optim_config.rho}" if optim_config.sam and optim_config.rho > 0 else optim_config.kind
    emit(
        f"train n={len(labels)} epochs={settings.epochs} batch={settings.batch_size} sampler={settings.sampler} "
        f"optimizer={method} lr={optim_config.lr} wd={optim_config.weight_decay} seed={settings.seed}"
    )
    step = 0
    for epoch in range(1, settings.epochs + 1):
        batches = epoch_batches(labels, settings, epoch)
        for idx in batches:
            x, y = values[idx], labels[idx]
            step += 1
            step_seed = [settings.seed, _DROPOUT, step]

            def loss_fn(p, x=x, y=y, step_seed=step_seed):
                # a fresh generator per call gives both SAM passes the same dropout masks
                return ad.cross_entropy(forward_batch(x, p, config, np.random.default_rng(step_seed)), y)

            params, state, metrics = sam_step(loss_fn, params, state, optim_config)
            losses.append(metrics.loss)
            emit(_format_step(epoch, step, metrics))
        epoch_loss = float(np.mean(losses[-len(batches) :]))
        emit(f"epoch={epoch} done mean_loss={epoch_loss:.8f}")
        if checkpoint_dir is not None:
            ckpt = ModelCheckpoint(
                config, params, state.to_arrays(), {"epoch": epoch, "seed": settings.seed, "step": state.step}
            )
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"epoch_{epoch:03d}.astc")
    preds = predict(predict_logits(values, params, config))
    accuracy = float(np.mean(preds == labels))
    emit(f"final train_accuracy={accuracy:.6f}")
    return TrainResult(params, state, config, lines, accuracy, losses)
