"""Dense float64 algebra, the closed differentiable op set and the seeded generator.

`Matrix` is a float64 numpy array. The generator is PCG64 wrapped in a
`numpy.random.Generator`; equal seeds give equal streams on every platform.
"""
from collections.abc import Callable
from logging import getLogger

import numpy as np
import numpy.typing as npt

from .const import DISTRIBUTION_TOLERANCE, GRAD_CHECK_MAX_EPS
from .exceptions import InvalidDistribution, InvalidNumericState

_LOGGER = getLogger(__name__)

Matrix = npt.NDArray[np.float64]
Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(int(seed)))


def ensure_finite(values: npt.ArrayLike, what: str = "value") -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidNumericState(f"non-finite {what}")


def as_matrix(values: npt.ArrayLike) -> Matrix:
    return np.asarray(values, dtype=np.float64)


def softmax(logits: npt.ArrayLike) -> Matrix:
    """Row-wise softmax with max-subtraction; accepts a vector or a batch."""
    z = as_matrix(logits)
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidNumericState("softmax of an empty vector")
    ensure_finite(z, "logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: npt.ArrayLike) -> Matrix:
    z = as_matrix(logits)
    ensure_finite(z, "logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _entropy_terms(p: Matrix) -> Matrix:
    safe = np.where(p > 0.0, p, 1.0)
    return np.where(p > 0.0, -p * np.log(safe), 0.0)


def entropy(p: npt.ArrayLike) -> float:
    """Shannon entropy in nats with 0 ln 0 = 0."""
    probs = as_matrix(p)
    ensure_finite(probs, "probabilities")
    if probs.ndim != 1 or probs.size == 0:
        raise InvalidDistribution("entropy expects a non-empty probability vector")
    if np.any(probs < 0.0):
        raise InvalidDistribution("negative probability")
    if abs(float(np.sum(probs)) - 1.0) > DISTRIBUTION_TOLERANCE:
        raise InvalidDistribution(f"probabilities sum to {float(np.sum(probs))!r}")
    return float(np.clip(np.sum(_entropy_terms(probs)), 0.0, np.log(probs.size)))


def entropy_rows(p: npt.ArrayLike) -> Matrix:
    """Entropy of every row of a batch of distributions."""
    probs = as_matrix(p)
    if probs.ndim != 2 or probs.shape[1] == 0:
        raise InvalidDistribution("entropy_rows expects a 2-d batch")
    ensure_finite(probs, "probabilities")
    if np.any(probs < 0.0):
        raise InvalidDistribution("negative probability")
    if np.any(np.abs(np.sum(probs, axis=1) - 1.0) > DISTRIBUTION_TOLERANCE):
        raise InvalidDistribution("a row does not sum to 1")
    return np.clip(np.sum(_entropy_terms(probs), axis=1), 0.0, np.log(probs.shape[1]))


def relu(z: Matrix) -> Matrix:
    return np.maximum(z, 0.0)


def relu_backward(z: Matrix, upstream: Matrix) -> Matrix:
    return np.where(z > 0.0, upstream, 0.0)


def softmax_cross_entropy(logits: Matrix, labels: npt.NDArray[np.integer]) -> tuple[float, Matrix]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    log_p = log_softmax(logits)
    rows = np.arange(n)
    loss = -float(np.mean(log_p[rows, labels]))
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def grad_check(
        loss_fn: Callable[[Matrix], float],
        point: npt.ArrayLike,
        analytic_grad: npt.ArrayLike,
        eps: float = 1e-6,
) -> float:
    """Max relative error between central differences and an analytic gradient."""
    if not 0.0 < eps <= GRAD_CHECK_MAX_EPS:
        raise ValueError(f"eps must lie in (0, {GRAD_CHECK_MAX_EPS}], got {eps}")
    x = as_matrix(point).copy()
    analytic = as_matrix(analytic_grad).reshape(x.shape)
    ensure_finite(x, "grad_check point")
    ensure_finite(analytic, "analytic gradient")
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = float(loss_fn(x))
        flat[i] = original - eps
        lower = float(loss_fn(x))
        flat[i] = original
        fd = (upper - lower) / (2.0 * eps)
        if not np.isfinite(fd):
            raise InvalidNumericState("non-finite finite difference")
        an = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    _LOGGER.debug("grad_check over %d coordinates: max relative error %.3e", flat.size, worst)
    return worst
