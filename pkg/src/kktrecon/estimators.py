"""scikit-learn style front ends for training and reconstruction.

``HomogeneousMLPClassifier`` is a regular classifier (``fit`` / ``predict`` /
``decision_function``) so it drops into pipelines, ``clone`` and model
selection.  ``KKTReconstructor`` consumes a fitted classifier, or raw
:class:`MlpParams`, and exposes the recovered candidates as attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .mlp import InitScheme, MlpParams, forward, init_params, margin
from .reconstructor import ReconConfig, reconstruct, recon_loss
from .trainer import TrainConfig, kkt_audit, train
from .validation import check_samples, check_training_set


class HomogeneousMLPClassifier(ClassifierMixin, BaseEstimator):
    """Bias-free ReLU MLP trained by full-batch gradient descent.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the hidden layers; ``()`` gives a linear model.
    learning_rate : float
    epochs : int
    weight_decay : float
        Coupled L2 penalty added to the gradient.
    init : {"standard", "small_first_layer"}
    checkpoint_every : int
    random_state : int
        Seeds the weight initialization.
    precision : {32, 64}
    margin_eps : float
        Tolerance for the on-margin fraction recorded at checkpoints.

    Attributes
    ----------
    params_ : MlpParams
    report_ : TrainReport
    classes_ : ndarray
    n_features_in_ : int
    """

    def __init__(self, hidden_layer_sizes=(100,), learning_rate=0.5, epochs=1000, weight_decay=0.0,
                 init="standard", checkpoint_every=100, random_state=0, precision=64, margin_eps=0.1):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.init = init
        self.checkpoint_every = checkpoint_every
        self.random_state = random_state
        self.precision = precision
        self.margin_eps = margin_eps

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            init=InitScheme(self.init, int(self.random_state)),
            checkpoint_every=self.checkpoint_every,
            seed=int(self.random_state),
            margin_eps=self.margin_eps,
        )

    def fit(self, X, y, X_test=None, y_test=None, warm_start_params=None):
        X, y_enc, classes = check_training_set(X, y)
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        n_classes = max(len(classes), 2)
        config = self._train_config()
        if warm_start_params is not None:
            params = warm_start_params.copy()
        else:
            dims = [X.shape[1], *self.hidden_layer_sizes, n_classes]
            params = init_params(config.init, dims, self.precision)
        train_set = Dataset(X, y_enc, n_classes)
        test_set = None
        if X_test is not None:
            X_test = check_samples(X_test, self.n_features_in_)
            test_set = Dataset(X_test, self._encode(y_test), n_classes)
        self.params_, self.report_ = train(params, train_set, config, test_set)
        return self

    def continue_fit(self, X, y, **overrides):
        """Resume training from the current weights with updated hyperparameters.

        Useful for staged schedules, e.g. a larger step size once the data
        are separated.  The new report replaces ``report_``.
        """
        check_is_fitted(self, "params_")
        for k, v in overrides.items():
            setattr(self, k, v)
        return self.fit(X, y, warm_start_params=self.params_)

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, check_samples(X, self.n_features_in_))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def margins(self, X, y):
        """Distance to the nearest decision boundary, ``Phi_y - max_{j != y} Phi_j``."""
        check_is_fitted(self, "params_")
        return margin(self.params_, check_samples(X, self.n_features_in_), self._encode(y))

    def kkt_audit(self, X, y, **kwargs):
        check_is_fitted(self, "params_")
        X = check_samples(X, self.n_features_in_)
        return kkt_audit(self.params_, Dataset(X, self._encode(y), self.params_.n_classes), **kwargs)


class KKTReconstructor(BaseEstimator):
    """Recover candidate training samples from trained weights.

    ``fit`` takes a fitted :class:`HomogeneousMLPClassifier` or raw
    :class:`MlpParams`; the model's training data is never touched.

    Parameters
    ----------
    n_candidates : int
    lambda_min : float
        Lower bound on every dual coefficient.
    init_scale : float
        Standard deviation of the Gaussian candidate initialization.
    lr_x, lr_a : float
        Step sizes for the candidates and the dual parameters.
    momentum : float
    max_iter : int
    labels : sequence of int, optional
        Candidate labels; balanced over classes by default.
    random_state : int
    precision : {32, 64}
    relative_steps : bool
        Divide both step sizes by ``||theta||**2`` so one setting works
        across weight scales.

    Attributes
    ----------
    candidates_ : ndarray of shape (n_candidates, n_features)
    candidate_labels_ : ndarray
        Class labels (in the classifier's label space when one was given).
    duals_ : ndarray
        ``a**2 + lambda_min`` per candidate.
    loss_curve_ : list of float
    state_ : ReconState
    """

    def __init__(self, n_candidates=10, lambda_min=0.0, init_scale=0.1, lr_x=0.01, lr_a=0.01,
                 momentum=0.9, max_iter=1000, labels=None, random_state=0, precision=64, relative_steps=True):
        self.n_candidates = n_candidates
        self.lambda_min = lambda_min
        self.init_scale = init_scale
        self.lr_x = lr_x
        self.lr_a = lr_a
        self.momentum = momentum
        self.max_iter = max_iter
        self.labels = labels
        self.random_state = random_state
        self.precision = precision
        self.relative_steps = relative_steps

    def _config(self, params: MlpParams) -> ReconConfig:
        scale = 1.0
        if self.relative_steps:
            scale = 1.0 / float(sum(np.vdot(w, w) for w in params.layer_weights))
        return ReconConfig(
            m=self.n_candidates, labels=self.labels, lambda_min=self.lambda_min,
            init_scale=self.init_scale, lr_x=self.lr_x * scale, lr_a=self.lr_a * scale, momentum=self.momentum,
            iterations=self.max_iter, seed=int(self.random_state), precision=self.precision,
        )

    @staticmethod
    def _params_of(model) -> tuple[MlpParams, np.ndarray | None]:
        if isinstance(model, MlpParams):
            return model, None
        check_is_fitted(model, "params_")
        return model.params_, getattr(model, "classes_", None)

    def fit(self, model, y=None):
        params, classes = self._params_of(model)
        self.params_ = params
        self.state_ = reconstruct(params, self._config(params))
        self.candidates_ = self.state_.X
        self.candidate_labels_ = self.state_.y if classes is None else classes[self.state_.y]
        self.duals_ = self.state_.duals
        self.loss_curve_ = self.state_.loss_trace
        return self

    def score(self, model=None, y=None):
        """Negative stationarity loss of the fitted candidates (higher is better)."""
        check_is_fitted(self, "state_")
        params = self.params_ if model is None else self._params_of(model)[0]
        return -recon_loss(params, self.state_)

