"""Deterministic numerical kernels shared by the whole pruning pipeline.

Everything here operates on float64 numpy arrays. All exported functions are
pure and thread-safe; randomness only enters through explicitly seeded
generators created by :func:`seeded_rng` / :func:`substream`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateVectorError(ValueError):
    """Raised when an operation receives a zero-norm vector."""


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two equal-length vectors, in [-1, 1].

    Raises :class:`DegenerateVectorError` on zero-norm input; callers decide
    the fallback.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine undefined for zero-norm vector")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction), rows sum to 1."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def quantile(values: np.ndarray, gamma: float) -> float:
    """Empirical gamma-quantile with linear interpolation.

    Sorts the values and interpolates between order statistics at fractional
    position ``gamma * (n - 1)`` (zero-indexed). This is the single quantile
    convention used everywhere in the pipeline so thresholds are reproducible.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of empty array")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    s = np.sort(v)
    pos = gamma * (s.size - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    if lo == hi:
        return float(s[lo])
    frac = pos - lo
    return float(s[lo] * (1.0 - frac) + s[hi] * frac)


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a list of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update on every array in ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(f, x: np.ndarray, analytic_grad: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences of f.

    Per-coordinate error is ``|cd_i - a_i| / max(1e-8, |a_i| + |cd_i|)``.
    Every backward pass in the repository is held to < 1e-4 under this check.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if x.shape != analytic.shape:
        raise ValueError("x/analytic_grad shape mismatch")
    flat_x = x.ravel()
    flat_a = analytic.ravel()
    worst = 0.0
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        cd = (f_plus - f_minus) / (2.0 * h)
        err = abs(cd - flat_a[i]) / max(1e-8, abs(flat_a[i]) + abs(cd))
        worst = max(worst, err)
    return worst


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream for ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent child stream of ``seed`` addressed by an integer path.

    Distinct paths give statistically independent streams; the same path
    always reproduces the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))
