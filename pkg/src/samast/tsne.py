"""Exact t-SNE: perplexity calibration and Student-t KL descent with momentum."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CalibrationError, ConfigError

ENTROPY_TOL = 1e-5
MAX_SEARCH = 200
INIT_STD = 1e-4


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    adaptive_gains: bool = True
    min_gain: float = 0.01
    seed: int = 0

    def validate(self, n: int | None = None) -> "TsneConfig":
        if self.iterations <= 0:
            raise ConfigError(f"t-SNE iterations must be positive, got {self.iterations}")
        if not self.perplexity > 1.0:
            raise ConfigError(f"perplexity must exceed 1, got {self.perplexity}")
        if self.learning_rate <= 0:
            raise ConfigError("t-SNE learning rate must be positive")
        if n is not None:
            if n < 4:
                raise ConfigError(f"t-SNE needs at least 4 points, got {n}")
            if not self.perplexity < (n - 1) / 3:
                raise ConfigError(f"perplexity {self.perplexity} must be below (n-1)/3 = {(n - 1) / 3:.3f} for n={n}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def squared_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Entropy in bits and the conditional distribution for one row (self excluded)."""
    logits = -beta * (d - d.min())
    p = np.exp(logits)
    total = p.sum()
    p /= total
    # H = -sum p ln p with ln p = logits - ln(total)
    h_nats = np.log(total) - float(np.dot(p, logits))
    return h_nats / np.log(2.0), p


def conditional_probabilities(distances: np.ndarray, perplexity: float, tol: float = 1e-10) -> np.ndarray:
    """Rows ``P_{j|i}`` with Gaussian bandwidths bisected to the target entropy ``log2(perplexity)``."""
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ConfigError(f"distance matrix must be square, got {d.shape}")
    target = np.log2(perplexity)
    cond = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        spread = row.max() - row.min()
        if spread > 0:
            beta = 1.0 / spread
        for _ in range(MAX_SEARCH):
            h, p = _row_entropy(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        else:
            if abs(h - target) >= ENTROPY_TOL:
                raise CalibrationError(
                    f"row {i}: entropy {h:.8f} bits did not reach log2(perplexity)={target:.8f} in {MAX_SEARCH} steps"
                )
        cond[i, np.arange(n) != i] = p
    return cond


def calibrate_perplexity(distances: np.ndarray, perplexity: float) -> np.ndarray:
    """Joint affinities ``(P_{j|i} + P_{i|j}) / 2n`` from squared distances."""
    cond = conditional_probabilities(distances, perplexity)
    return (cond + cond.T) / (2.0 * cond.shape[0])


def student_q(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized Student-t affinities and the unnormalized kernel ``(1 + |yi - yj|^2)^-1``."""
    w = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(w, 0.0)
    return w / w.sum(), w


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def kl_gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``dKL/dy_i = 4 sum_j (p_ij - q_ij)(1 + |yi - yj|^2)^-1 (yi - yj)``."""
    q, w = student_q(y)
    m = (p - q) * w
    return 4.0 * (m.sum(axis=1)[:, None] * y - m @ y)


@dataclass
class TsneState:
    velocity: np.ndarray
    gains: np.ndarray

    @classmethod
    def zeros(cls, y: np.ndarray) -> "TsneState":
        return cls(np.zeros_like(y), np.ones_like(y))


def tsne_step(
    p: np.ndarray, y: np.ndarray, state: TsneState, config: TsneConfig, iteration: int
) -> tuple[np.ndarray, TsneState, float]:
    """One momentum step. Exaggeration multiplies ``p`` for the first iterations; the returned KL uses the plain ``p``.

    With ``adaptive_gains`` each coordinate's step grows by 0.2 while the
    gradient keeps pushing against the velocity and shrinks by 0.8 otherwise.
    """
    scale = config.exaggeration if iteration < config.exaggeration_iters else 1.0
    mom = config.momentum if iteration < config.momentum_switch else config.final_momentum
    grad = kl_gradient(scale * p, y)
    gains = state.gains
    if config.adaptive_gains:
        flip = np.sign(grad) != np.sign(state.velocity)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, config.min_gain)
    velocity = mom * state.velocity - config.learning_rate * gains * grad
    y = y + velocity
    y = y - y.mean(axis=0)
    q, _ = student_q(y)
    return y, TsneState(velocity, gains), kl_divergence(p, q)


@dataclass
class TsneResult:
    coords: np.ndarray
    kl_trace: list[float]
    initial_kl: float

    @property
    def final_kl(self) -> float:
        return self.kl_trace[-1]


def tsne_run(embeddings: np.ndarray, config: TsneConfig = TsneConfig()) -> TsneResult:
    """Embed ``[n, D]`` vectors in 2D. ``initial_kl`` is measured at the random start."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"embeddings must be [n, D], got shape {x.shape}")
    config.validate(x.shape[0])
    p = calibrate_perplexity(squared_distances(x), config.perplexity)
    y = np.random.default_rng(config.seed).normal(0.0, INIT_STD, size=(x.shape[0], 2))
    state = TsneState.zeros(y)
    initial = kl_divergence(p, student_q(y)[0])
    trace = []
    for it in range(config.iterations):
        y, state, kl = tsne_step(p, y, state, config, it)
        trace.append(kl)
    return TsneResult(y, trace, initial)


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("silhouette needs at least two labels")
    d = np.sqrt(squared_distances(pts))
    scores = np.zeros(len(pts))
    for i in range(len(pts)):
        own = labels == labels[i]
        if own.sum() <= 1:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, labels == c].mean() for c in classes if c != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def coords_csv(ids, labels, coords: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "x", "y"])
    for rid, lab, (x, y) in zip(ids, labels, coords):
        w.writerow([rid, lab, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def kl_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "kl"])
    for i, kl in enumerate(trace, start=1):
        w.writerow([i, repr(float(kl))])
    return buf.getvalue()
