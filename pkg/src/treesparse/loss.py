"""Smooth losses, their gradients and Lipschitz bounds.

The solver works on linear scores ``Z = X @ W + b``; every loss therefore
exposes a score-space value/gradient pair (``*_scores``) next to the public
parameter-space helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

__all__ = [
    "Dataset",
    "LOSSES",
    "indicator_response",
    "squared_value_grad",
    "logistic_ova_value_grad",
    "multinomial_value_grad",
    "multinomial_proba",
    "lipschitz_bound",
    "top_singular_value",
    "score_value_grad",
]

LOSSES = ("squared", "ova_squared", "ova_logistic", "multinomial")
_LIPSCHITZ_FACTOR = {"squared": 1.0, "ova_squared": 1.0, "ova_logistic": 0.25, "multinomial": 0.5}


@dataclass
class Dataset:
    """Design matrix with real targets or class labels.

    Class labels may be any integers; they are encoded as 0..c-1 codes in
    sorted order (``classes``).
    """

    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray | None = None
    task: str = "regression"
    classes: np.ndarray = field(init=False, repr=False)
    codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} disagree on n")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite entries")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.groups is not None:
            self.groups = np.asarray(self.groups).reshape(-1)
            if self.groups.shape != self.y.shape:
                raise ValueError("groups must have one id per sample")
        if self.task == "classification":
            if np.issubdtype(self.y.dtype, np.floating):
                if not np.all(self.y == np.round(self.y)):
                    raise ValueError("class labels must be integers")
                self.y = self.y.astype(np.int64)
            self.classes, self.codes = np.unique(self.y, return_inverse=True)
            if self.classes.size < 2:
                raise ValueError("classification needs at least 2 classes")
        else:
            self.y = self.y.astype(float)
            if not np.all(np.isfinite(self.y)):
                raise ValueError("y contains non-finite entries")
            self.classes = np.zeros(0)
            self.codes = np.zeros(0, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.classes.size)

    def subset(self, idx) -> "Dataset":
        """Rows ``idx``; the class coding of the parent is kept.

        Validation is skipped so that a part holding a single class (e.g. a
        small test fold) is still representable.
        """
        idx = np.asarray(idx)
        sub = object.__new__(Dataset)
        sub.X = self.X[idx]
        sub.y = self.y[idx]
        sub.groups = None if self.groups is None else self.groups[idx]
        sub.task = self.task
        sub.classes = self.classes
        sub.codes = self.codes[idx] if self.codes.size else self.codes
        return sub


def indicator_response(codes, n_classes: int) -> np.ndarray:
    """(n, c) matrix of +1 at the sample's class and -1 elsewhere."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    Y = -np.ones((codes.size, n_classes))
    Y[np.arange(codes.size), codes] = 1.0
    return Y


# ---------------------------------------------------------------------------
# score space


def _squared_scores(Z, Y):
    n = Z.shape[0]
    R = Y - Z
    return 0.5 * float(np.sum(R * R)) / n, -R / n


def _logistic_scores(Z, Ybar):
    n = Z.shape[0]
    M = Ybar * Z
    val = -float(np.sum(log_expit(M))) / n
    return val, -(Ybar * expit(-M)) / n


def _multinomial_scores(Z, codes):
    n = Z.shape[0]
    rows = np.arange(n)
    val = float(np.sum(logsumexp(Z, axis=1) - Z[rows, codes])) / n
    G = softmax(Z, axis=1)
    G[rows, codes] -= 1.0
    return val, G / n


def score_value_grad(kind: str, Z, target):
    """Loss value and gradient with respect to the scores ``Z``.

    ``target`` is y (squared), the indicator matrix (OVA losses) or the
    integer class codes (multinomial).
    """
    if kind in ("squared", "ova_squared"):
        return _squared_scores(Z, target)
    if kind == "ova_logistic":
        return _logistic_scores(Z, target)
    if kind == "multinomial":
        return _multinomial_scores(Z, target)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


# ---------------------------------------------------------------------------
# parameter space


def _check_dims(X, W, b=None):
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ValueError(f"X {X.shape} incompatible with coefficients {W.shape}")
    if b is not None:
        b = np.asarray(b, dtype=float)
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ValueError(f"intercepts {b.shape} incompatible with W {W.shape}")
    return X, W, b


def squared_value_grad(w, X, y):
    """``(1/2n) ||y - X w||^2`` and its gradient ``-(1/n) X^T (y - X w)``."""
    X, w, _ = _check_dims(X, w)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != X.shape[0]:
        raise ValueError("y and X disagree on n")
    val, dZ = _squared_scores(X @ w, y)
    return val, X.T @ dZ


def logistic_ova_value_grad(W, b, X, Ybar):
    """One-versus-all logistic loss; returns ``(value, grad_W, grad_b)``."""
    X, W, b = _check_dims(X, W, b)
    Ybar = np.asarray(Ybar, dtype=float)
    if Ybar.shape != (X.shape[0], W.shape[1]):
        raise ValueError(f"indicator matrix {Ybar.shape} does not match (n, c)")
    val, dZ = _logistic_scores(X @ W + b, Ybar)
    return val, X.T @ dZ, dZ.sum(axis=0)


def multinomial_value_grad(W, b, X, y):
    """Negative mean log-likelihood of the softmax model.

    ``y`` holds class codes in 0..c-1.  Returns ``(value, grad_W, grad_b)``.
    """
    X, W, b = _check_dims(X, W, b)
    y = np.asarray(y, dtype=np.int64)
    c = W.shape[1]
    if y.shape != (X.shape[0],):
        raise ValueError("y and X disagree on n")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    val, dZ = _multinomial_scores(X @ W + b, y)
    return val, X.T @ dZ, dZ.sum(axis=0)


def multinomial_proba(W, b, X) -> np.ndarray:
    X, W, b = _check_dims(X, W, b)
    return softmax(X @ W + b, axis=1)


def top_singular_value(X, rtol=1e-6, max_iter=100_000) -> float:
    """Largest singular value of ``X`` by power iteration on ``X^T X``."""
    X = np.asarray(X, dtype=float)
    if X.size == 0 or not np.any(X):
        return 0.0
    v = np.random.default_rng(0).standard_normal(X.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        u = X.T @ (X @ v)
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return 0.0
        v = u / new
        if abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return float(np.sqrt(est))


def lipschitz_bound(X, loss_kind: str, intercept: bool = False) -> float:
    """Upper bound on the Lipschitz constant of the loss gradient.

    With ``intercept`` the bound covers the joint (W, b) variable, i.e. it is
    computed on ``[X, 1]``.
    """
    if loss_kind not in _LIPSCHITZ_FACTOR:
        raise ValueError(f"unknown loss {loss_kind!r}; expected one of {LOSSES}")
    X = np.asarray(X, dtype=float)
    if intercept:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    s = top_singular_value(X)
    return 1.01 * _LIPSCHITZ_FACTOR[loss_kind] * s * s / X.shape[0]
