"""Recover training samples from trained weights by minimizing the stationarity loss.

Given ``theta``, candidates ``x_1..x_m`` with fixed labels and duals
``lam_i = a_i**2 + lam_min``, the loss is

    L(X, a) = || theta - sum_i lam_i * grad_theta margin(x_i, y_i) ||^2

and is minimized by heavy-ball gradient descent on ``(X, a)``.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io as kio
from .mlp import MarginJacobian, MlpParams

logger = logging.getLogger(__name__)


class ReconstructionDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"reconstruction diverged at iteration {iteration}: loss={loss}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class ReconConfig:
    m: int = 10
    labels: Sequence[int] | None = None
    lambda_min: float = 0.0
    init_scale: float = 0.1
    lr_x: float = 0.01
    lr_a: float = 0.01
    momentum: float = 0.9
    iterations: int = 1000
    seed: int = 0
    precision: int = 64
    clip: float = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lambda_min < 0:
            raise ValueError("lambda_min must be >= 0")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")
        if self.labels is not None:
            self.labels = [int(v) for v in self.labels]
            if len(self.labels) != self.m:
                raise ValueError(f"explicit labels must have length m={self.m}")

    def to_dict(self) -> dict:
        return asdict(self)


def balanced_labels(m: int, n_classes: int) -> np.ndarray:
    """``ceil(m / C)`` candidates per class, trimmed to ``m`` (class order cycles)."""
    return np.arange(m) % n_classes


@dataclass
class ReconState:
    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    lambda_min: float = 0.0
    loss_trace: list[float] = field(default_factory=list)
    config: ReconConfig | None = None

    @property
    def duals(self) -> np.ndarray:
        return self.a ** 2 + self.lambda_min

    @property
    def m(self) -> int:
        return len(self.y)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float("nan")

    def save(self, path) -> None:
        meta = {
            "config": None if self.config is None else self.config.to_dict(),
            "lambda_min": self.lambda_min,
            "labels": [int(v) for v in self.y],
        }
        precision = 32 if self.X.dtype == np.float32 else 64
        trace = np.asarray(self.loss_trace, dtype=np.float64)
        blob = kio.encode([self.X, self.a, trace], kio.KIND_RECON_STATE, precision, meta)
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path) -> "ReconState":
        kind, _, meta, arrays = kio.decode(Path(path).read_bytes())
        if kind != kio.KIND_RECON_STATE:
            raise kio.FormatError(f"{path} is not a reconstruction state (kind={kind})")
        X, a, trace = arrays
        config = ReconConfig(**meta["config"]) if meta.get("config") else None
        return cls(X, np.asarray(meta["labels"], dtype=np.int64), a.ravel(), meta["lambda_min"],
                   trace.ravel().tolist(), config)


def _residual_layers(params: MlpParams, jac: MarginJacobian, lam: np.ndarray) -> list[np.ndarray]:
    return [w - c for w, c in zip(params.layer_weights, jac.combine(lam))]


def recon_loss(params: MlpParams, state: ReconState) -> float:
    jac = MarginJacobian(params, state.X, state.y)
    r = _residual_layers(params, jac, state.duals.astype(params.dtype))
    return float(sum(np.vdot(v, v) for v in r))


def recon_loss_and_grads(params: MlpParams, state: ReconState) -> tuple[float, np.ndarray, np.ndarray]:
    jac = MarginJacobian(params, state.X, state.y)
    lam = state.duals.astype(params.dtype)
    r = _residual_layers(params, jac, lam)
    loss = float(sum(np.vdot(v, v) for v in r))
    da = -4.0 * state.a * jac.project(r)
    dX = jac.mixed_vjp(r, weights=-2.0 * lam)
    return loss, dX, da


def recon_grads(params: MlpParams, state: ReconState) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`recon_loss` with respect to ``X`` and ``a``.

    ``da_i = -4 a_i (g_i . r)`` and ``dX_i = -2 lam_i d/dx_i (r . g_i)``
    where ``r`` is the stationarity residual, held fixed in the second term.
    """
    _, dX, da = recon_loss_and_grads(params, state)
    return dX, da


def init_state(params: MlpParams, config: ReconConfig) -> ReconState:
    rng = np.random.default_rng(config.seed)
    dtype = np.float32 if config.precision == 32 else np.float64
    X = (rng.standard_normal((config.m, params.n_features)) * config.init_scale).astype(dtype)
    a = rng.standard_normal(config.m).astype(dtype)
    if config.labels is None:
        y = balanced_labels(config.m, params.n_classes)
    else:
        y = np.asarray(config.labels, dtype=np.int64)
        if y.min() < 0 or y.max() >= params.n_classes:
            raise ValueError(f"candidate labels must lie in [0, {params.n_classes})")
    return ReconState(X, y, a, config.lambda_min, [], config)


def reconstruct(params: MlpParams, config: ReconConfig, callback=None) -> ReconState:
    """Minimize the stationarity loss from a seeded Gaussian start.

    Candidates are clipped to ``[-clip, clip]`` after every step.  The loss
    trace holds the loss at the start of each iteration plus the final value.
    """
    if config.precision != params.precision:
        params = MlpParams(params.layer_weights, config.precision)
    state = init_state(params, config)
    vX = np.zeros_like(state.X)
    va = np.zeros_like(state.a)
    mu = config.momentum
    # overflow is reported as ReconstructionDivergedError, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(config.iterations):
            loss, dX, da = recon_loss_and_grads(params, state)
            if not math.isfinite(loss):
                raise ReconstructionDivergedError(it, loss)
            state.loss_trace.append(loss)
            vX = mu * vX - config.lr_x * dX
            va = mu * va - config.lr_a * da
            state.X = np.clip(state.X + vX, -config.clip, config.clip)
            state.a = state.a + va
            if callback is not None:
                callback(it, loss, state)
        final = recon_loss(params, state)
    if not math.isfinite(final):
        raise ReconstructionDivergedError(config.iterations, final)
    state.loss_trace.append(final)
    return state


@dataclass
class SearchResult:
    config: ReconConfig
    score: float
    state: ReconState | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def final_loss_score(state: ReconState) -> float:
    """Default scorer: lower final loss is better, so return its negation."""
    return -state.final_loss


def _run_one(params, config, scorer):
    try:
        state = reconstruct(params, config)
    except (ReconstructionDivergedError, FloatingPointError, ValueError) as exc:
        return SearchResult(config, float("-inf"), None, str(exc))
    return SearchResult(config, float(scorer(state)), state)


def hyperparam_search(params: MlpParams, grid: Sequence[ReconConfig],
                      scorer: Callable[[ReconState], float] = final_loss_score,
                      workers: int = 1) -> list[SearchResult]:
    """Run :func:`reconstruct` for each config and rank by ``scorer`` (higher first).

    Failed runs are kept with score ``-inf`` and their error message.  Ties keep
    grid order.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, itertools.repeat(params), grid, itertools.repeat(scorer)))
    else:
        results = [_run_one(params, cfg, scorer) for cfg in grid]
    order = sorted(range(len(results)), key=lambda i: -results[i].score)
    return [results[i] for i in order]


def expand_grid(base: ReconConfig, **axes) -> list[ReconConfig]:
    """Cartesian product of ``axes`` values applied on top of ``base``."""
    if not axes:
        return [base]
    keys = sorted(axes)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(axes[k] for k in keys))]
