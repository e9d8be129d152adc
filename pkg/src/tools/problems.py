#!/usr/bin/env python3
"""
Problems - desk-scale objectives with per-sample gradients

Every problem exposes the same interface to the training loop:

    per_sample_losses(x, idx)     -> (B,)
    per_sample_gradients(x, idx)  -> (B, d)
    loss(x)                       -> mean training loss
    full_gradient(x)              -> exact grad F(x), or None
    test_accuracy(x)              -> float, or None without labeled test data

Available problems:
    - QuadraticProblem: F(x) = 1/2 (x - x*)^T A (x - x*), spectrum in [mu, L]
    - LogisticProblem: binary (sigmoid) or multinomial (softmax) linear model
    - MLPProblem: in -> hidden (tanh) -> classes, cross-entropy

Usage:
    from src.tools.problems import QuadraticProblem

    problem = QuadraticProblem.create(d=512, n=1000, mu=0.1, L=1.0, tau=0.1, seed=0)
    grads = problem.per_sample_gradients(x, np.arange(32))
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import numpy.typing as npt
from scipy import special

from .rng import CounterStream
from .spectral import ParamVector

logger = logging.getLogger(__name__)

# Training loss of classification problems is evaluated on at most this many examples
DEFAULT_EVAL_EXAMPLES = 2048


class NonFiniteActivationError(ArithmeticError):
    """A forward pass produced NaN or Inf."""

    def __init__(self, layer: str, detail: str = ""):
        self.layer = layer
        super().__init__(f"Non-finite activations in layer '{layer}'" + (f": {detail}" if detail else ""))


# ============================================================================
# Problem interface
# ============================================================================

class Problem(ABC):
    """Finite-sum objective F(x) = (1/N) sum_i f(x; xi_i)."""

    name: str = "problem"

    def __init__(self, d: int, n: int):
        self.d = d
        self.n = n
        self.gradient_evaluations = 0

    @property
    def smoothness(self) -> Optional[float]:
        """Lipschitz constant L of grad F when known by construction."""
        return None

    @property
    def has_exact_gradient(self) -> bool:
        return False

    @abstractmethod
    def per_sample_losses(self, x: ParamVector, idx: npt.ArrayLike) -> np.ndarray:
        ...

    @abstractmethod
    def _per_sample_gradients(self, x: ParamVector, idx: np.ndarray) -> np.ndarray:
        ...

    def per_sample_gradients(self, x: ParamVector, idx: npt.ArrayLike) -> np.ndarray:
        """(B, d) per-sample gradients; counts one batch gradient evaluation."""
        self.gradient_evaluations += 1
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return np.zeros((0, self.d))
        return self._per_sample_gradients(np.asarray(x, dtype=np.float64), idx)

    @abstractmethod
    def loss(self, x: ParamVector) -> float:
        ...

    def full_gradient(self, x: ParamVector) -> Optional[ParamVector]:
        return None

    def test_accuracy(self, x: ParamVector) -> Optional[float]:
        return None

    @abstractmethod
    def initial_point(self, rng: CounterStream) -> ParamVector:
        ...

    def describe(self) -> dict:
        return {"name": self.name, "d": self.d, "n": self.n}


def gradient_check(
    problem: Problem,
    x: ParamVector,
    idx: npt.ArrayLike,
    rng: CounterStream,
    directions: int = 20,
    h: float = 1e-5,
) -> float:
    """
    Worst relative error between per-sample gradients and central differences.

    Each check draws a random unit direction u and compares g . u with
    (f(x + h u) - f(x - h u)) / (2h) for every example in idx.
    """
    idx = np.asarray(idx, dtype=np.int64)
    grads = problem.per_sample_gradients(x, idx)
    worst = 0.0
    for _ in range(directions):
        u = rng.normal(problem.d)
        u /= np.linalg.norm(u)
        analytic = grads @ u
        numeric = (problem.per_sample_losses(x + h * u, idx) - problem.per_sample_losses(x - h * u, idx)) / (2 * h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return worst


# ============================================================================
# Synthetic quadratic
# ============================================================================

@dataclass(frozen=True)
class QuadraticSpec:
    """
    A = Q diag(eigenvalues) Q^T with Q a seeded rotation (None means A is diagonal).

    zeta holds one perturbation direction per example; its rows sum to zero so
    the dataset mean of the per-sample gradients is exactly A (x - x*).
    """
    eigenvalues: np.ndarray = field(repr=False)
    rotation: Optional[np.ndarray] = field(repr=False)
    x_star: np.ndarray = field(repr=False)
    tau: float
    zeta: Optional[np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.eigenvalues.min() <= 0:
            raise ValueError("Hessian eigenvalues must be positive")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")

    @property
    def d(self) -> int:
        return int(self.eigenvalues.shape[0])

    def hessian_apply(self, v: np.ndarray) -> np.ndarray:
        """A v for a vector or a (B, d) stack."""
        if self.rotation is None:
            return v * self.eigenvalues
        return ((v @ self.rotation) * self.eigenvalues) @ self.rotation.T

    def hessian(self) -> np.ndarray:
        if self.rotation is None:
            return np.diag(self.eigenvalues)
        return (self.rotation * self.eigenvalues) @ self.rotation.T


def quadratic_gradient(spec: QuadraticSpec, x: npt.ArrayLike, xi: int) -> ParamVector:
    """A (x - x*) + tau * zeta_xi"""
    grad = spec.hessian_apply(np.asarray(x, dtype=np.float64) - spec.x_star)
    if spec.zeta is not None and spec.tau > 0:
        grad = grad + spec.tau * spec.zeta[xi]
    return grad


class QuadraticProblem(Problem):
    """Strongly convex quadratic with exact gradients and F* = 0."""

    name = "quadratic"

    def __init__(self, spec: QuadraticSpec, n: int):
        super().__init__(spec.d, n)
        self.spec = spec

    @classmethod
    def create(
        cls,
        d: int,
        n: int,
        mu: float = 0.1,
        L: float = 1.0,
        tau: float = 0.0,
        seed: int = 0,
        rotate: bool = True,
    ) -> "QuadraticProblem":
        """
        Args:
            d: Dimension
            n: Number of examples
            mu, L: Extreme Hessian eigenvalues, spectrum linspace(mu, L, d)
            tau: Per-sample perturbation scale
            seed: Problem seed (rotation, optimum, perturbations)
            rotate: False keeps A diagonal (cheap at large d)
        """
        if not 0 < mu <= L:
            raise ValueError(f"Need 0 < mu <= L, got mu={mu}, L={L}")
        stream = CounterStream(seed, "data")
        eigenvalues = np.linspace(mu, L, d)
        rotation = None
        if rotate:
            q, r = np.linalg.qr(stream.normal((d, d)))
            rotation = q * np.sign(np.diag(r))
        x_star = stream.normal(d)
        zeta = None
        if tau > 0:
            raw = stream.normal((n, d))
            zeta = raw - raw.mean(axis=0)
        spec = QuadraticSpec(eigenvalues=eigenvalues, rotation=rotation, x_star=x_star, tau=float(tau), zeta=zeta)
        return cls(spec, n)

    @property
    def smoothness(self) -> float:
        return float(self.spec.eigenvalues.max())

    @property
    def strong_convexity(self) -> float:
        return float(self.spec.eigenvalues.min())

    @property
    def has_exact_gradient(self) -> bool:
        return True

    def per_sample_losses(self, x: ParamVector, idx: npt.ArrayLike) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        diff = np.asarray(x, dtype=np.float64) - self.spec.x_star
        base = 0.5 * float(diff @ self.spec.hessian_apply(diff))
        if self.spec.zeta is None:
            return np.full(idx.shape[0], base)
        return base + self.spec.tau * (self.spec.zeta[idx] @ diff)

    def _per_sample_gradients(self, x: ParamVector, idx: np.ndarray) -> np.ndarray:
        base = self.spec.hessian_apply(x - self.spec.x_star)
        if self.spec.zeta is None:
            return np.broadcast_to(base, (idx.shape[0], self.d)).copy()
        return base + self.spec.tau * self.spec.zeta[idx]

    def loss(self, x: ParamVector) -> float:
        diff = np.asarray(x, dtype=np.float64) - self.spec.x_star
        return 0.5 * float(diff @ self.spec.hessian_apply(diff))

    def full_gradient(self, x: ParamVector) -> ParamVector:
        return self.spec.hessian_apply(np.asarray(x, dtype=np.float64) - self.spec.x_star)

    def initial_point(self, rng: CounterStream) -> ParamVector:
        return self.spec.x_star + rng.normal(self.d)

    def describe(self) -> dict:
        return {
            **super().describe(),
            "mu": self.strong_convexity,
            "L": self.smoothness,
            "tau": self.spec.tau,
            "rotated": self.spec.rotation is not None,
        }


# ============================================================================
# Classification data
# ============================================================================

@dataclass(frozen=True)
class ClassificationData:
    """Features (N, p) and integer labels (N,)."""
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])


def make_classification(
    n: int,
    n_features: int = 784,
    n_classes: int = 10,
    separation: float = 3.0,
    seed: int = 0,
) -> ClassificationData:
    """
    Seeded Gaussian clusters, one per class.

    Cluster centres have norm ~ separation and within-class noise has norm ~ 1.
    """
    stream = CounterStream(seed, "data")
    centres = stream.normal((n_classes, n_features)) * (separation / np.sqrt(n_features))
    labels = np.arange(n) % n_classes
    labels = labels[stream.permutation(n)]
    features = centres[labels] + stream.normal((n, n_features)) / np.sqrt(n_features)
    return ClassificationData(features=features, labels=labels.astype(np.int64))


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class _ClassificationProblem(Problem):
    def __init__(
        self,
        d: int,
        train: ClassificationData,
        test: Optional[ClassificationData],
        n_classes: int,
        eval_examples: int = DEFAULT_EVAL_EXAMPLES,
    ):
        super().__init__(d, train.n)
        self.train = train
        self.test = test
        self.n_classes = n_classes
        self._eval_idx = np.arange(min(train.n, eval_examples))

    @abstractmethod
    def predict(self, x: ParamVector, features: np.ndarray) -> np.ndarray:
        ...

    def loss(self, x: ParamVector) -> float:
        return float(np.mean(self.per_sample_losses(x, self._eval_idx)))

    def test_accuracy(self, x: ParamVector) -> Optional[float]:
        if self.test is None:
            return None
        return float(np.mean(self.predict(x, self.test.features) == self.test.labels))

    def describe(self) -> dict:
        return {**super().describe(), "n_classes": self.n_classes, "n_test": self.test.n if self.test else 0}


# ============================================================================
# Logistic regression
# ============================================================================

def logistic_gradient(
    x: npt.ArrayLike,
    feature: npt.ArrayLike,
    label: int,
    n_classes: int = 10,
    fit_intercept: bool = True,
) -> ParamVector:
    """Cross-entropy gradient of a linear model at one example."""
    feature = np.asarray(feature, dtype=np.float64)
    data = ClassificationData(features=feature[None, :], labels=np.array([label]))
    problem = LogisticProblem(data, n_classes=n_classes, fit_intercept=fit_intercept)
    return problem.per_sample_gradients(x, [0])[0]


class LogisticProblem(_ClassificationProblem):
    """
    Linear classifier with cross-entropy loss.

    n_classes == 2: sigmoid on a single logit, x = [w (p), b].
    n_classes > 2: softmax, x = [W (p x K, row-major), b (K)].
    """

    name = "logistic"

    def __init__(
        self,
        train: ClassificationData,
        test: Optional[ClassificationData] = None,
        n_classes: int = 10,
        fit_intercept: bool = True,
        eval_examples: int = DEFAULT_EVAL_EXAMPLES,
    ):
        if n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {n_classes}")
        p = train.n_features
        outputs = 1 if n_classes == 2 else n_classes
        d = p * outputs + (outputs if fit_intercept else 0)
        super().__init__(d, train, test, n_classes, eval_examples)
        self.n_outputs = outputs
        self.fit_intercept = fit_intercept

    def _split(self, x: ParamVector) -> tuple[np.ndarray, np.ndarray]:
        p = self.train.n_features
        weights = x[: p * self.n_outputs].reshape(p, self.n_outputs)
        bias = x[p * self.n_outputs:] if self.fit_intercept else np.zeros(self.n_outputs)
        return weights, bias

    def _logits(self, x: ParamVector, features: np.ndarray) -> np.ndarray:
        weights, bias = self._split(np.asarray(x, dtype=np.float64))
        return features @ weights + bias

    def per_sample_losses(self, x: ParamVector, idx: npt.ArrayLike) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        logits = self._logits(x, self.train.features[idx])
        labels = self.train.labels[idx]
        if self.n_outputs == 1:
            z = logits[:, 0]
            return np.logaddexp(0.0, z) - labels * z
        return special.logsumexp(logits, axis=1) - logits[np.arange(idx.shape[0]), labels]

    def _per_sample_gradients(self, x: ParamVector, idx: np.ndarray) -> np.ndarray:
        features = self.train.features[idx]
        logits = self._logits(x, features)
        labels = self.train.labels[idx]
        if self.n_outputs == 1:
            residual = special.expit(logits) - labels[:, None]
        else:
            residual = special.softmax(logits, axis=1) - _one_hot(labels, self.n_outputs)
        # outer(feature_i, residual_i) flattened row-major
        weight_grads = (features[:, :, None] * residual[:, None, :]).reshape(idx.shape[0], -1)
        if not self.fit_intercept:
            return weight_grads
        return np.concatenate([weight_grads, residual], axis=1)

    def predict(self, x: ParamVector, features: np.ndarray) -> np.ndarray:
        logits = self._logits(x, features)
        if self.n_outputs == 1:
            return (logits[:, 0] > 0).astype(np.int64)
        return np.argmax(logits, axis=1)

    def initial_point(self, rng: CounterStream) -> ParamVector:
        return np.zeros(self.d)


# ============================================================================
# Tiny MLP
# ============================================================================

@dataclass(frozen=True)
class MLPShape:
    n_inputs: int = 784
    n_hidden: int = 64
    n_classes: int = 10

    @property
    def size(self) -> int:
        """784*64 + 64 + 64*10 + 10 = 50,890 for the default shape"""
        return self.n_inputs * self.n_hidden + self.n_hidden + self.n_hidden * self.n_classes + self.n_classes

    def unflatten(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(W1 [in x hidden], b1, W2 [hidden x classes], b2)"""
        if params.shape[-1] != self.size:
            raise ValueError(f"Expected {self.size} parameters, got {params.shape[-1]}")
        i, h, k = self.n_inputs, self.n_hidden, self.n_classes
        o1 = i * h
        o2 = o1 + h
        o3 = o2 + h * k
        return (
            params[:o1].reshape(i, h),
            params[o1:o2],
            params[o2:o3].reshape(h, k),
            params[o3:],
        )


def _mlp_batch(
    shape: MLPShape,
    params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    with_grad: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Per-sample losses and (B, d) per-sample gradients by vectorized backprop."""
    w1, b1, w2, b2 = shape.unflatten(params)

    with np.errstate(over="ignore", invalid="ignore"):
        pre = features @ w1 + b1
    if not np.all(np.isfinite(pre)):
        raise NonFiniteActivationError("hidden", "pre-activations overflowed")
    hidden = np.tanh(pre)
    with np.errstate(over="ignore", invalid="ignore"):
        logits = hidden @ w2 + b2
    if not np.all(np.isfinite(logits)):
        raise NonFiniteActivationError("output", "logits overflowed")

    batch = np.arange(labels.shape[0])
    losses = special.logsumexp(logits, axis=1) - logits[batch, labels]
    if not with_grad:
        return losses, None

    d_logits = special.softmax(logits, axis=1) - _one_hot(labels, shape.n_classes)
    d_pre = (d_logits @ w2.T) * (1.0 - hidden**2)
    n = labels.shape[0]
    grads = np.concatenate(
        [
            (features[:, :, None] * d_pre[:, None, :]).reshape(n, -1),
            d_pre,
            (hidden[:, :, None] * d_logits[:, None, :]).reshape(n, -1),
            d_logits,
        ],
        axis=1,
    )
    return losses, grads


def mlp_forward_backward(
    params: npt.ArrayLike,
    feature: npt.ArrayLike,
    label: int,
    shape: MLPShape = MLPShape(),
) -> tuple[float, ParamVector]:
    """
    Loss and flattened gradient of the tanh MLP at one example.

    Raises:
        NonFiniteActivationError: NaN/Inf in the named layer
    """
    params = np.asarray(params, dtype=np.float64)
    features = np.asarray(feature, dtype=np.float64)[None, :]
    losses, grads = _mlp_batch(shape, params, features, np.array([label], dtype=np.int64))
    return float(losses[0]), grads[0]


class MLPProblem(_ClassificationProblem):
    """n_inputs -> n_hidden (tanh) -> n_classes, softmax cross-entropy."""

    name = "mlp"

    def __init__(
        self,
        train: ClassificationData,
        test: Optional[ClassificationData] = None,
        n_hidden: int = 64,
        n_classes: int = 10,
        eval_examples: int = DEFAULT_EVAL_EXAMPLES,
    ):
        self.shape = MLPShape(n_inputs=train.n_features, n_hidden=n_hidden, n_classes=n_classes)
        super().__init__(self.shape.size, train, test, n_classes, eval_examples)

    def per_sample_losses(self, x: ParamVector, idx: npt.ArrayLike) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        losses, _ = _mlp_batch(
            self.shape, np.asarray(x, dtype=np.float64), self.train.features[idx], self.train.labels[idx],
            with_grad=False,
        )
        return losses

    def _per_sample_gradients(self, x: ParamVector, idx: np.ndarray) -> np.ndarray:
        _, grads = _mlp_batch(self.shape, x, self.train.features[idx], self.train.labels[idx])
        return grads

    def predict(self, x: ParamVector, features: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = self.shape.unflatten(np.asarray(x, dtype=np.float64))
        return np.argmax(np.tanh(features @ w1 + b1) @ w2 + b2, axis=1)

    def initial_point(self, rng: CounterStream) -> ParamVector:
        """Weights N(0, 1/fan_in), zero biases."""
        s = self.shape
        w1 = rng.normal((s.n_inputs, s.n_hidden), scale=1.0 / np.sqrt(s.n_inputs))
        w2 = rng.normal((s.n_hidden, s.n_classes), scale=1.0 / np.sqrt(s.n_hidden))
        return np.concatenate([w1.ravel(), np.zeros(s.n_hidden), w2.ravel(), np.zeros(s.n_classes)])
