"""Linear detection and threat-classification heads over fixed embeddings.

A head with ``k == 1`` is a binary detector scoring ``w . e + b`` (positive
score means adversarial). A head with ``k >= 2`` is a k-way threat
classifier taking the argmax of ``W e + b``. Both are fit by minimizing the
summed cross-entropy plus ``lam * ||params||^2`` with L-BFGS.
"""
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import InvalidInputError
from .solver import SolverConfig, solve


@dataclass(frozen=True, eq=False)
class LinearHead:
    W: np.ndarray
    b: np.ndarray
    lam: float = 1.0
    regularize_bias: bool = True

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if b.shape != (W.shape[0],):
            raise InvalidInputError(f"bias shape {b.shape} does not match W rows {W.shape[0]}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise InvalidInputError("head parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def num_classes(self):
        return self.W.shape[0]

    @property
    def embed_dim(self):
        return self.W.shape[1]

    @classmethod
    def zeros(cls, k, d, lam=1.0, regularize_bias=True):
        return cls(np.zeros((k, d)), np.zeros(k), lam, regularize_bias)

    @property
    def flat(self):
        return np.concatenate([self.W.ravel(), self.b])

    def with_flat(self, theta):
        k, d = self.W.shape
        theta = np.asarray(theta, dtype=np.float64)
        return LinearHead(theta[: k * d].reshape(k, d), theta[k * d:], self.lam, self.regularize_bias)

    def scores(self, e):
        e = _check_embeddings(e, self.embed_dim)
        return e @ self.W.T + self.b

    def to_dict(self):
        return {
            "k": int(self.num_classes),
            "d": int(self.embed_dim),
            "lambda": float(self.lam),
            "regularize_bias": bool(self.regularize_bias),
            "W": self.W.ravel().tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            k, dim = int(d["k"]), int(d["d"])
            W = np.asarray(d["W"], dtype=np.float64).reshape(k, dim)
            return cls(W, np.asarray(d["b"], dtype=np.float64), float(d["lambda"]), bool(d["regularize_bias"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidInputError(f"malformed head document: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class LabeledEmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.embeddings, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise InvalidInputError("embeddings must be an n x d matrix")
        if y.shape != (X.shape[0],):
            raise InvalidInputError("labels must be a vector aligned with the embedding rows")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InvalidInputError("labels must be integers")
        object.__setattr__(self, "embeddings", X)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.labels.shape[0]

    @classmethod
    def detection(cls, clean, adversarial):
        """Stack clean rows (label 0) over adversarial rows (label 1)."""
        clean = np.asarray(clean, dtype=np.float64)
        adversarial = np.asarray(adversarial, dtype=np.float64)
        X = np.concatenate([clean, adversarial])
        y = np.concatenate([np.zeros(len(clean), np.int64), np.ones(len(adversarial), np.int64)])
        return cls(X, y)


def _check_embeddings(e, d):
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != d or e.ndim not in (1, 2):
        raise InvalidInputError(f"embedding dimension {e.shape} does not match head dimension {d}")
    return e


def objective_function(X, y, k, lam=1.0, regularize_bias=True, average=False):
    """Return ``f(theta) -> (loss, grad)`` over flat ``[W.ravel(), b]`` parameters."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n, d = X.shape
    scale = 1.0 / n if (average and n) else 1.0
    if k >= 2:
        onehot = np.zeros((n, k))
        onehot[np.arange(n), y] = 1.0

    def fun(theta):
        W = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        Z = X @ W.T + b
        if k == 1:
            z = Z[:, 0]
            data_loss = np.sum(np.logaddexp(0.0, z) - y * z)
            dZ = (expit(z) - y)[:, None]
        else:
            lse = logsumexp(Z, axis=1)
            data_loss = np.sum(lse - Z[np.arange(n), y])
            dZ = np.exp(Z - lse[:, None]) - onehot
        dZ = dZ * scale
        gW = dZ.T @ X + 2.0 * lam * W
        gb = dZ.sum(axis=0)
        penalty = np.sum(W * W)
        if regularize_bias:
            gb = gb + 2.0 * lam * b
            penalty += np.sum(b * b)
        loss = data_loss * scale + lam * penalty
        return float(loss), np.concatenate([gW.ravel(), gb])

    return fun


def logistic_objective(head, data, average=False):
    """Cross-entropy of ``head`` on ``data`` plus the L2 penalty, and its gradient.

    The gradient is flat, ordered as ``W`` row-major then ``b``
    (length ``k * d + k``).
    """
    X = _check_embeddings(data.embeddings, head.embed_dim)
    fun = objective_function(X, data.labels, head.num_classes, head.lam, head.regularize_bias, average)
    return fun(head.flat)


def _fit(data, k, lam, config, regularize_bias, average_loss, init):
    d = data.embeddings.shape[1]
    head = LinearHead.zeros(k, d, lam, regularize_bias)
    theta0 = head.flat if init is None else np.asarray(init, dtype=np.float64)
    if theta0.shape != head.flat.shape:
        raise InvalidInputError(f"init has shape {theta0.shape}, expected {head.flat.shape}")
    fun = objective_function(data.embeddings, data.labels, k, lam, regularize_bias, average_loss)
    result = solve(fun, theta0, config)
    return head.with_flat(result.x), result


def fit_detector(data, lam=1.0, config=SolverConfig(), regularize_bias=True, average_loss=False,
                 init=None, return_result=False):
    """Fit a single-logit clean (0) vs adversarial (1) detector."""
    labels = set(np.unique(data.labels).tolist())
    if labels != {0, 1}:
        raise InvalidInputError(f"detection data needs both labels 0 and 1, got {sorted(labels)}")
    head, result = _fit(data, 1, lam, config, regularize_bias, average_loss, init)
    return (head, result) if return_result else head


def fit_classifier(data, lam=1.0, config=SolverConfig(), num_classes=None, regularize_bias=True,
                   average_loss=False, init=None, return_result=False):
    """Fit a k-way multinomial head; every class in ``range(k)`` must be present."""
    present = np.unique(data.labels)
    if present.size and present.min() < 0:
        raise InvalidInputError("class labels must be non-negative")
    k = int(num_classes) if num_classes is not None else int(present.max()) + 1 if present.size else 0
    if k < 2:
        raise InvalidInputError("classification needs at least two classes")
    missing = sorted(set(range(k)) - set(present.tolist()))
    if missing:
        raise InvalidInputError(f"classes missing from training data: {missing}")
    if present.max() >= k:
        raise InvalidInputError(f"label {present.max()} out of range for {k} classes")
    head, result = _fit(data, k, lam, config, regularize_bias, average_loss, init)
    return (head, result) if return_result else head


def detect(head, e):
    """1 (adversarial) where ``w . e + b > 0``, else 0; a zero score counts as clean."""
    if head.num_classes != 1:
        raise InvalidInputError("detect requires a single-logit head")
    s = head.scores(e)[..., 0]
    out = (s > 0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def classify(head, e):
    """Argmax of ``W e + b``; ties go to the lowest index."""
    if head.num_classes < 2:
        raise InvalidInputError("classify requires a head with at least two classes")
    out = np.argmax(head.scores(e), axis=-1)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def ensemble_detect(heads, e):
    """Flag as adversarial when any member detector does."""
    heads = list(heads)
    if not heads:
        raise InvalidInputError("ensemble needs at least one detector")
    dims = {h.embed_dim for h in heads}
    if len(dims) != 1 or any(h.num_classes != 1 for h in heads):
        raise InvalidInputError("ensemble members must be detectors over the same embedding dimension")
    votes = np.stack([np.atleast_1d(detect(h, e)) for h in heads])
    out = votes.max(axis=0)
    return int(out[0]) if np.ndim(e) == 1 else out
