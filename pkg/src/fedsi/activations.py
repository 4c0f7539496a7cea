"""Standard and scale-invariant activations.

Every function accepts either a :class:`~fedsi.autodiff.Tensor` (and then
records onto its graph) or a plain array (and then returns a plain array).
Normalizing activations reduce over ``axis`` (the hidden dimension).
"""

from __future__ import annotations

import enum

import numpy as np

from fedsi import autodiff as ad
from fedsi.autodiff import Tensor

DEFAULT_EPS = 1e-6


class ActivationKind(enum.Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    SOFTMAX = "softmax"
    SI_SIGMOID = "si_sigmoid"
    SI_TANH = "si_tanh"


def _guarded_quotient(num: Tensor, denom: Tensor, eps: float) -> Tensor:
    # denominators are non-negative; 0/0 -> 0 when eps == 0
    safe = ad.clamp_min(denom, eps)
    if eps <= 0:
        safe = ad.where(safe.value > 0, safe, 1.0)
    return num / safe


def _max_normalize(num: Tensor, magnitude: Tensor, eps: float, axis: int) -> Tensor:
    return _guarded_quotient(num, magnitude.max(axis=axis, keepdims=True), eps)


def maxn(x, eps: float = DEFAULT_EPS, axis: int = -1):
    """Divide each entry by the largest absolute value along ``axis``."""
    t, unwrap = ad.lift(x)
    return unwrap(_max_normalize(t, ad.abs_(t), eps, axis))


def si_sigmoid(x, eps: float = DEFAULT_EPS, axis: int = -1):
    """ReLU followed by max-normalization; output in [0, 1]."""
    t, unwrap = ad.lift(x)
    r = ad.relu(t)
    return unwrap(_max_normalize(r, r, eps, axis))


def si_tanh(x, eps: float = DEFAULT_EPS, axis: int = -1):
    """Max-normalization of the raw input; output in [-1, 1]."""
    return maxn(x, eps, axis)


def row_normalize(a, eps: float = DEFAULT_EPS, axis: int = -1):
    """Divide each row of a non-negative matrix by its sum (zero rows stay zero)."""
    t, unwrap = ad.lift(a)
    if (t.value < 0).any():
        raise ValueError("row_normalize expects non-negative entries; apply ReLU first")
    return unwrap(_guarded_quotient(t, t.sum(axis=axis, keepdims=True), eps))


def softmax(x, axis: int = -1):
    t, unwrap = ad.lift(x)
    # shifting by the max is exact for softmax, so no gradient flows through it
    shifted = t - ad.stop_gradient(t.max(axis=axis, keepdims=True))
    e = ad.exp(shifted)
    return unwrap(e / e.sum(axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1):
    t, unwrap = ad.lift(x)
    shifted = t - ad.stop_gradient(t.max(axis=axis, keepdims=True))
    return unwrap(shifted - ad.log(ad.exp(shifted).sum(axis=axis, keepdims=True)))


def baseline_activation(kind: ActivationKind, x, axis: int = -1):
    t, unwrap = ad.lift(x)
    if kind is ActivationKind.SIGMOID:
        out = ad.sigmoid(t)
    elif kind is ActivationKind.TANH:
        out = ad.tanh(t)
    elif kind is ActivationKind.RELU:
        out = ad.relu(t)
    elif kind is ActivationKind.SOFTMAX:
        out = softmax(t, axis)
    else:
        raise ValueError(f"{kind} is not a baseline activation")
    return unwrap(out)


def activate(kind: ActivationKind, x, eps: float = DEFAULT_EPS, axis: int = -1):
    """Dispatch any :class:`ActivationKind`."""
    if kind is ActivationKind.SI_SIGMOID:
        return si_sigmoid(x, eps, axis)
    if kind is ActivationKind.SI_TANH:
        return si_tanh(x, eps, axis)
    return baseline_activation(kind, x, axis)


def positive_homogeneity_ok(x: np.ndarray, eps: float = DEFAULT_EPS, margin: float = 10.0) -> bool:
    """True when ``max|x|`` clears the eps guard by ``margin``; below that the
    guard, not the data, sets the denominator and scale invariance breaks."""
    return float(np.max(np.abs(x))) >= margin * eps
