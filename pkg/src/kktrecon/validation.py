"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_X_y


def check_samples(X, n_features: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=np.float64)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, but the model expects {n_features}")
    return X


def check_training_set(X, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Validate ``(X, y)`` and encode labels to ``0..C-1``.

    Returns ``(X, encoded_y, classes)``; a single class is rejected because
    the margin is undefined.
    """
    X, y = check_X_y(X, y, dtype=np.float64)
    classes, y_enc = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need samples from at least two classes")
    return X, y_enc.astype(np.int64), classes
