"""Full-batch gradient descent on cross-entropy plus KKT diagnostics."""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset
from .mlp import InitScheme, MarginJacobian, MlpParams, forward_cache, margins_from_logits

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 1000
    weight_decay: float = 0.0
    init: InitScheme = field(default_factory=InitScheme)
    checkpoint_every: int = 100
    seed: int = 0
    margin_eps: float = 0.1
    dual_max_iter: int = 5000
    dual_tol: float = 1e-10

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init"] = {"kind": self.init.kind, "seed": self.init.seed}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        init = d.pop("init", None)
        if isinstance(init, dict):
            init = InitScheme(init.get("kind", "standard"), int(init.get("seed", 0)))
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        kw = {k: _coerce(cls, k, v) for k, v in d.items()}
        if init is not None:
            kw["init"] = init
        return cls(**kw)


def _coerce(cls, name, value):
    default = getattr(cls(), name) if name != "init" else None
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes", "on") if isinstance(value, str) else bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def read_train_config(path) -> TrainConfig:
    """Parse a key-value file.  Keys may sit at top level or under ``[train]``.

    ``init_kind`` and ``init_seed`` set the initialization scheme.
    """
    return train_config_from_text(Path(path).read_text())


def train_config_from_text(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string("[__top__]\n" + text)
    values = dict(parser["__top__"])
    if parser.has_section("train"):
        values.update(parser["train"])
    kind = values.pop("init_kind", "standard")
    seed = int(values.pop("init_seed", values.get("seed", 0)))
    cfg = TrainConfig.from_dict(values)
    cfg.init = InitScheme(kind, seed)
    return cfg


@dataclass
class Checkpoint:
    epoch: int
    loss: float
    train_error: float
    test_error: float
    mean_margin: float
    min_margin: float
    on_margin_fraction: float
    kkt_residual: float


@dataclass
class TrainReport:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    params: MlpParams | None = None

    CSV_FIELDS = [f.name for f in fields(Checkpoint)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for c in self.checkpoints:
            w.writerow([_fmt(getattr(c, f)) for f in self.CSV_FIELDS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    return np.exp(logp), logp


def _ce_layers(params: MlpParams, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
    acts, pres = forward_cache(params, X)
    logits = pres[-1]
    n = len(y)
    probs, logp = _softmax(logits)
    loss = -logp[np.arange(n), y].sum() / n
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        grads[k] = acts[k].T @ delta
        if k:
            delta = (delta @ params.layer_weights[k].T) * (pres[k - 1] > 0)
    return float(loss), grads, logits


def cross_entropy(params: MlpParams, dataset: Dataset) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its flattened parameter gradient."""
    X = np.asarray(dataset.samples, dtype=params.dtype)
    loss, grads, _ = _ce_layers(params, X, dataset.labels)
    return loss, np.concatenate([g.ravel() for g in grads])


def _error_rate(params: MlpParams, dataset: Dataset | None) -> float:
    if dataset is None:
        return float("nan")
    logits = forward_cache(params, np.asarray(dataset.samples, dtype=params.dtype))[1][-1]
    return float(np.mean(np.argmax(logits, axis=1) != dataset.labels))


def on_margin_fraction(margins: np.ndarray, eps: float) -> float:
    """Fraction of samples within ``(1 + eps)`` of the smallest margin.

    Margins are first normalized so the smallest is 1; undefined (NaN) until
    every sample is classified correctly.
    """
    lo = margins.min()
    if lo <= 0:
        return float("nan")
    return float(np.mean(margins / lo < 1.0 + eps))


def train(params: MlpParams, dataset: Dataset, config: TrainConfig, test: Dataset | None = None,
          callback=None) -> tuple[MlpParams, TrainReport]:
    """Run ``config.epochs`` full-batch GD steps.

    Each step is ``W <- (1 - lr * wd) * W - lr * grad CE(W)``, i.e. coupled
    weight decay.  Checkpoints are taken every ``checkpoint_every`` epochs and
    after the last one; epoch 0 is the initialization.
    """
    params = params.copy()
    X = np.asarray(dataset.samples, dtype=params.dtype)
    y = dataset.labels
    lr = params.dtype(config.learning_rate)
    shrink = params.dtype(1.0) - lr * params.dtype(config.weight_decay)
    report = TrainReport()

    def record(epoch, loss, logits):
        margins = margins_from_logits(logits, y)
        _, residual = fit_dual_coefficients(params, dataset, max_iter=config.dual_max_iter, tol=config.dual_tol)
        report.checkpoints.append(Checkpoint(
            epoch=epoch,
            loss=loss,
            train_error=float(np.mean(np.argmax(logits, axis=1) != y)),
            test_error=_error_rate(params, test),
            mean_margin=float(margins.mean()),
            min_margin=float(margins.min()),
            on_margin_fraction=on_margin_fraction(margins, config.margin_eps),
            kkt_residual=residual,
        ))
        logger.debug("epoch %d loss %.6g residual %.4g", epoch, loss, residual)
        if callback is not None:
            callback(report.checkpoints[-1], params)

    for epoch in range(config.epochs + 1):
        loss, grads, logits = _ce_layers(params, X, y)
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            record(epoch, loss, logits)
        if epoch == config.epochs:
            break
        for w, g in zip(params.layer_weights, grads):
            w *= shrink
            w -= lr * g
    report.params = params
    return params, report


def fit_dual_coefficients(params: MlpParams, dataset: Dataset, max_iter: int = 5000,
                          tol: float = 1e-10, return_history: bool = False):
    """Nonnegative least squares ``min_{lam >= 0} ||theta - sum_i lam_i g_i||``.

    ``g_i`` is the margin gradient of sample ``i``.  Solved by Jacobi-scaled
    projected gradient on the ``n x n`` Gram system with a step that
    guarantees monotone descent.  Returns ``(lam, relative_residual)`` where
    the residual is ``||theta - G lam|| / ||theta||``.
    """
    jac = MarginJacobian(params, np.asarray(dataset.samples, dtype=params.dtype), dataset.labels)
    theta_layers = [w.astype(np.float64) for w in params.layer_weights]
    K = jac.gram().astype(np.float64)
    b = jac.project(params.layer_weights).astype(np.float64)
    theta_sq = float(sum(np.vdot(w, w) for w in theta_layers))
    n = len(b)
    lam = np.zeros(n)
    history = []

    diag = np.diag(K).copy()
    active = diag > 0
    scale = np.where(active, 1.0 / np.where(active, diag, 1.0), 0.0)
    if active.any():
        s = np.sqrt(scale)
        # largest eigenvalue of D^{-1/2} K D^{-1/2} bounds the scaled curvature
        top = np.linalg.eigvalsh(K * s[:, None] * s[None, :])[-1]
        step = 1.0 / top if top > 0 else 0.0
        for _ in range(max_iter):
            grad = K @ lam - b
            new = np.maximum(lam - step * scale * grad, 0.0)
            if return_history:
                history.append(_objective(K, b, new, theta_sq))
            moved = np.max(np.abs(new - lam))
            lam = new
            if moved <= tol * max(1.0, np.max(lam)):
                break

    residual = _relative_residual(jac, theta_layers, lam, theta_sq)
    if return_history:
        return lam, residual, np.sqrt(np.maximum(history, 0.0) / theta_sq) if theta_sq else history
    return lam, residual


def _objective(K, b, lam, theta_sq):
    return theta_sq - 2 * b @ lam + lam @ K @ lam


def _relative_residual(jac: MarginJacobian, theta_layers, lam, theta_sq) -> float:
    if theta_sq == 0:
        return 0.0
    combo = jac.combine(lam.astype(jac.params.dtype))
    r_sq = sum(float(np.vdot(t - c, t - c)) for t, c in zip(theta_layers, combo))
    return math.sqrt(r_sq / theta_sq)


@dataclass
class KKTAudit:
    stationarity_residual: float
    min_margin: float
    max_margin: float
    violations: int
    slackness_violation_fraction: float
    duals: np.ndarray

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("duals")
        return d


def kkt_audit(params: MlpParams, dataset: Dataset, dual_tol: float = 1e-6, eps: float = 0.1,
              max_iter: int = 5000, normalize: bool = True) -> KKTAudit:
    """Check the max-margin KKT conditions at ``params``.

    When ``normalize`` is set and all samples are correctly classified,
    ``params`` is first rescaled so the minimum margin equals 1, the
    normalization under which the margin constraints read ``margin >= 1``.
    The slackness proxy is the fraction of samples with ``lam_i > dual_tol``
    whose margin exceeds ``1 + eps``, among those with ``lam_i > dual_tol``.
    """
    margins = margins_from_logits(forward_cache(params, np.asarray(dataset.samples, dtype=params.dtype))[1][-1],
                                  dataset.labels)
    if normalize and margins.min() > 0:
        c = margins.min() ** (-1.0 / params.n_layers)
        params = params.scaled(c)
        margins = margins * c ** params.n_layers
    lam, residual = fit_dual_coefficients(params, dataset, max_iter=max_iter)
    support = lam > dual_tol
    slack = float(np.mean(margins[support] > 1 + eps)) if support.any() else 0.0
    return KKTAudit(
        stationarity_residual=residual,
        min_margin=float(margins.min()),
        max_margin=float(margins.max()),
        violations=int(np.sum(margins < 1)),
        slackness_violation_fraction=slack,
        duals=lam,
    )
