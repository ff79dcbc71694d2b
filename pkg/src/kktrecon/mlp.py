"""Bias-free ReLU multilayer perceptron with hand-written reverse-mode derivatives.

The network ``Phi(theta; x)`` maps ``R^d -> R^C`` through ``L`` weight matrices
and no bias terms, which makes it positively homogeneous of degree ``L`` in the
parameters and of degree 1 in the input.

Every derivative here is computed for a *batch* of samples at once; the
single-sample helpers are thin wrappers.  At nondifferentiable points the
following choices are fixed:

* ``relu'(0) = 0``;
* the runner-up class ``j* = argmax_{j != y} Phi_j`` is frozen at its forward
  value, ties going to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PRECISIONS = {32: np.float32, 64: np.float64}


@dataclass
class InitScheme:
    """Gaussian initialization with per-layer variance ``1 / fan_in**e``.

    ``standard`` uses ``e = 1`` everywhere.  ``small_first_layer`` uses
    ``e = 1.5`` for the first layer only, the small-init baseline that makes
    reconstruction work without weight decay.
    """

    kind: str = "standard"
    seed: int = 0
    scale_exponent: float | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "small_first_layer"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        expected = 1.0 if self.kind == "standard" else 1.5
        if self.scale_exponent is None:
            self.scale_exponent = expected
        elif float(self.scale_exponent) != expected:
            raise ValueError(
                f"{self.kind} init requires scale_exponent={expected}, "
                f"got {self.scale_exponent}"
            )

    def exponents(self, n_layers: int) -> list[float]:
        rest = [1.0] * (n_layers - 1)
        return [float(self.scale_exponent)] + rest


@dataclass
class MlpParams:
    """Weights ``W_1 (d x h_1), ..., W_L (h_{L-1} x C)`` of a homogeneous MLP."""

    layer_weights: list[np.ndarray]
    precision: int = 64
    _shapes: list[tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if not self.layer_weights:
            raise ValueError("an MLP needs at least one weight matrix")
        dtype = PRECISIONS[self.precision]
        self.layer_weights = [np.asarray(w, dtype=dtype) for w in self.layer_weights]
        for k, w in enumerate(self.layer_weights):
            if w.ndim != 2:
                raise ValueError(f"layer {k} weights must be 2-D, got shape {w.shape}")
            if k and w.shape[0] != self.layer_weights[k - 1].shape[1]:
                raise ValueError(
                    f"layer {k} expects {w.shape[0]} inputs but layer {k - 1} "
                    f"produces {self.layer_weights[k - 1].shape[1]}"
                )
        self._shapes = [w.shape for w in self.layer_weights]

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    @property
    def n_features(self) -> int:
        return self._shapes[0][0]

    @property
    def n_classes(self) -> int:
        return self._shapes[-1][1]

    @property
    def dims(self) -> list[int]:
        return [self._shapes[0][0]] + [s[1] for s in self._shapes]

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self._shapes)

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layer_weights])

    def unflatten(self, theta: np.ndarray) -> list[np.ndarray]:
        """Split a flat vector into matrices shaped like this network's layers."""
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected a vector of length {self.n_params}, got {theta.shape}")
        out, start = [], 0
        for r, c in self._shapes:
            out.append(theta[start:start + r * c].reshape(r, c))
            start += r * c
        return out

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        return MlpParams([w.copy() for w in self.unflatten(theta)], self.precision)

    def scaled(self, c: float) -> "MlpParams":
        return MlpParams([c * w for w in self.layer_weights], self.precision)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.layer_weights], self.precision)


def init_params(scheme: InitScheme, dims: Sequence[int], precision: int = 64) -> MlpParams:
    """Draw i.i.d. zero-mean Gaussian weights for layer sizes ``dims``.

    ``dims = [d, h_1, ..., C]``; layer ``k`` has variance ``1 / dims[k]**e_k``.
    """
    dims = [int(v) for v in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"dims needs >= 2 positive sizes, got {dims}")
    rng = np.random.default_rng(scheme.seed)
    weights = []
    for fan_in, fan_out, e in zip(dims[:-1], dims[1:], scheme.exponents(len(dims) - 1)):
        std = fan_in ** (-e / 2.0)
        weights.append(rng.standard_normal((fan_in, fan_out)) * std)
    return MlpParams(weights, precision)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.n_features:
        raise ValueError(
            f"input has shape {x.shape[-1:] if single else x.shape}, "
            f"network expects {params.n_features} features"
        )
    return x, single


def forward_cache(params: MlpParams, X: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return ``(activations, pre_activations)`` for a 2-D batch.

    ``activations[0]`` is the input and ``activations[k]`` feeds layer ``k+1``;
    ``pre_activations[-1]`` are the logits.
    """
    acts, pres = [X], []
    h = X
    for k, w in enumerate(params.layer_weights):
        z = h @ w
        pres.append(z)
        if k < params.n_layers - 1:
            h = np.maximum(z, 0)
            acts.append(h)
    return acts, pres


def forward(params: MlpParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    logits = forward_cache(params, X)[1][-1]
    return logits[0] if single else logits


def runner_up(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the largest non-true logit per row, lowest index on ties."""
    masked = np.array(logits, copy=True)
    masked[np.arange(len(y)), y] = -np.inf
    return np.argmax(masked, axis=1)


def _check_labels(params: MlpParams, y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= params.n_classes):
        raise ValueError(f"labels must lie in [0, {params.n_classes})")
    return y


def margins_from_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(y))
    return logits[rows, y] - logits[rows, runner_up(logits, y)]


def margin(params: MlpParams, x, y):
    """``Phi_y(x) - max_{j != y} Phi_j(x)``; vectorized over a batch."""
    X, single = _as_batch(params, x)
    y = _check_labels(params, y, len(X))
    m = margins_from_logits(forward(params, X), y)
    return float(m[0]) if single else m


class MarginJacobian:
    """Per-sample backward signals of the margin for a fixed batch.

    For sample ``i`` the parameter gradient of its margin is, layer by layer,
    the outer product ``acts[k][i] (x) deltas[k][i]``.  Keeping it factored lets
    callers form ``G @ lam``, ``G.T @ r`` and the Gram matrix ``G.T @ G``
    without materializing the ``n x p`` Jacobian.
    """

    def __init__(self, params: MlpParams, X: np.ndarray, y: np.ndarray):
        self.params = params
        X, _ = _as_batch(params, X)
        self.y = _check_labels(params, y, len(X))
        self.acts, pres = forward_cache(params, X)
        self.logits = pres[-1]
        self.runner_up = runner_up(self.logits, self.y)
        self.masks = [z > 0 for z in pres[:-1]]
        n, C = self.logits.shape
        v = np.zeros((n, C), dtype=params.dtype)
        v[np.arange(n), self.y] = 1
        v[np.arange(n), self.runner_up] -= 1
        deltas = [v]
        for k in range(params.n_layers - 1, 0, -1):
            deltas.append((deltas[-1] @ params.layer_weights[k].T) * self.masks[k - 1])
        self.deltas = deltas[::-1]

    @property
    def margins(self) -> np.ndarray:
        rows = np.arange(len(self.y))
        return self.logits[rows, self.y] - self.logits[rows, self.runner_up]

    def __len__(self):
        return len(self.y)

    def combine(self, lam: np.ndarray) -> list[np.ndarray]:
        """Layer-wise ``sum_i lam_i * grad_theta margin_i``, reduced in index order."""
        return [a.T @ (lam[:, None] * d) for a, d in zip(self.acts, self.deltas)]

    def project(self, r_layers: Sequence[np.ndarray]) -> np.ndarray:
        """``g_i . r`` for every sample, with ``r`` given layer-wise."""
        return sum(np.einsum("ij,ij->i", a @ r, d) for a, r, d in zip(self.acts, r_layers, self.deltas))

    def gram(self) -> np.ndarray:
        """``K_ij = g_i . g_j`` via ``<a_i d_i^T, a_j d_j^T> = (a_i.a_j)(d_i.d_j)``."""
        return sum((a @ a.T) * (d @ d.T) for a, d in zip(self.acts, self.deltas))

    def flat_gradients(self) -> np.ndarray:
        """Dense ``n x p`` matrix of margin gradients; small networks only."""
        blocks = [np.einsum("ni,nj->nij", a, d).reshape(len(self), -1) for a, d in zip(self.acts, self.deltas)]
        return np.concatenate(blocks, axis=1)

    def mixed_vjp(self, r_layers: Sequence[np.ndarray], weights: np.ndarray | None = None) -> np.ndarray:
        """Row ``i``: gradient in ``x_i`` of ``r . grad_theta margin(x_i)``.

        Activation patterns and the runner-up class are frozen, so the deltas
        do not depend on ``x`` and only the forward activations do.  The
        optional ``weights`` scale each row's contribution.
        """
        ws = self.params.layer_weights
        L = len(ws)
        b = None
        for k in range(L - 1, -1, -1):
            # term for layer k+1 lives in the space of acts[k]
            term = self.deltas[k] @ r_layers[k].T
            b = term if b is None else b + term
            if k > 0:
                b = (b * self.masks[k - 1]) @ ws[k - 1].T
        if weights is not None:
            b = b * weights[:, None]
        return b

    def grad_x(self) -> np.ndarray:
        """Row ``i``: gradient of margin ``i`` with respect to its input."""
        ws = self.params.layer_weights
        b = self.deltas[0] @ ws[0].T
        return b


def grad_theta_margin(params: MlpParams, x, y) -> np.ndarray:
    """Flattened gradient of the margin with respect to all weights."""
    X, single = _as_batch(params, x)
    jac = MarginJacobian(params, X, np.atleast_1d(y))
    g = jac.flat_gradients()
    return g[0] if single else g


def grad_x_margin(params: MlpParams, x, y) -> np.ndarray:
    X, single = _as_batch(params, x)
    g = MarginJacobian(params, X, np.atleast_1d(y)).grad_x()
    return g[0] if single else g


def mixed_vjp(params: MlpParams, x, y, r) -> np.ndarray:
    """Gradient in ``x`` of ``s(x) = r . grad_theta_margin(params, x, y)``.

    ``r`` is a flat length-``p`` vector shared by every sample of the batch.
    """
    X, single = _as_batch(params, x)
    r = np.asarray(r, dtype=params.dtype)
    jac = MarginJacobian(params, X, np.atleast_1d(y))
    out = jac.mixed_vjp(params.unflatten(r))
    return out[0] if single else out
