"""Float64 micro-numerics: stable softmax, linear layers with explicit
backward passes, Adam with decoupled weight decay, cosine annealing,
seeded sub-streams and a central finite-difference checker.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np


class NumericalError(ValueError):
    """Raised when an input or intermediate value is not finite."""


def _as_array(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = _as_array(v)
    if v.size == 0:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite input")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = _as_array(v)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    v = _as_array(v)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm vector")
    return v / norm


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``v / |v|`` (row-wise) given the upstream gradient."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (grad_out - u * np.sum(u * grad_out, axis=-1, keepdims=True)) / norm


def sigmoid(x):
    x = _as_array(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Linear layer. Works on a single vector (shape (in,)) or a batch (..., in).
# ---------------------------------------------------------------------------


def _check_linear_shapes(x: np.ndarray, W: np.ndarray, b: np.ndarray | None):
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(
            f"shape mismatch: input {tuple(x.shape)} vs weight {tuple(W.shape)}"
        )
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(
            f"shape mismatch: bias {tuple(b.shape)} vs weight {tuple(W.shape)}"
        )


def linear_apply(x, W, b=None) -> np.ndarray:
    x, W = _as_array(x), _as_array(W)
    b = None if b is None else _as_array(b)
    _check_linear_shapes(x, W, b)
    out = x @ W.T
    if b is not None:
        out = out + b
    return out


def linear_backward(x, W, grad_out, with_bias: bool = True):
    """Return ``(dW, db, dx)`` for ``out = x W^T + b``.

    Leading batch axes of ``x``/``grad_out`` are summed out of ``dW``/``db``.
    ``db`` is None when ``with_bias`` is False.
    """
    x, W, grad_out = _as_array(x), _as_array(W), _as_array(grad_out)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    dW = g2.T @ x2
    db = g2.sum(axis=0) if with_bias else None
    dx = grad_out @ W
    return dW, db, dx


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
            self.step_count,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step with decoupled weight decay.

    Returns new dicts; the inputs are left untouched so a failed step
    preserves the previous state.
    """
    # lr == 0 is allowed: it freezes the parameters (used by EMA checks)
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(
                f"shape mismatch: grad {g.shape} vs param {params[name].shape} ({name})"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    t = state.step_count + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v = beta2 * state.second_moment[name] + (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = p - lr * (update + weight_decay * p)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def cosine_lr(t: int, T: int, lr0: float, lr_min: float) -> float:
    if T <= 0:
        raise ValueError("horizon must be positive")
    if t < 0:
        raise ValueError("negative step")
    if t > T:
        raise ValueError("step beyond horizon")
    if lr0 < lr_min:
        raise ValueError("lr0 must be >= lr_min")
    if t == T:
        return float(lr_min)
    lr = lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / T))
    # clamp: the sum can round one ulp past lr0
    return float(min(lr0, max(lr_min, lr)))


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def purpose_key(purpose: str) -> int:
    """Stable 32-bit key for a purpose label (CRC32 of its UTF-8 bytes)."""
    return zlib.crc32(purpose.encode("utf-8"))


def sub_seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for ``seed`` refined by a path of purpose labels / ints.

    String components are mapped through :func:`purpose_key`; integers are
    used verbatim.  Distinct paths give statistically independent streams.
    """
    key = tuple(purpose_key(p) if isinstance(p, str) else int(p) for p in path)
    return np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)


def make_rng(seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(sub_seed_sequence(seed, *path)))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed derived from ``seed`` along ``path``."""
    state = sub_seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def init_weight(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Weights drawn from N(0, 1/fan_in)."""
    return rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    failures: list[tuple[str, tuple]]

    @property
    def ok(self) -> bool:
        return not self.failures

    def passed(self, tolerance: float) -> bool:
        return self.ok and self.max_rel_error < tolerance


def grad_check(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5,
               analytic: dict[str, np.ndarray] | None = None,
               names=None) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)``.  Every coordinate of
    every parameter in ``names`` (default: all) is perturbed by ``±step``.
    The relative error per coordinate is
    ``|a - fd| / max(|a|, |fd|, 1e-12)``; NaNs are reported as failures.
    """
    if analytic is None:
        _, analytic = loss_fn(params)
    names = list(params) if names is None else list(names)
    worst, worst_name, worst_idx = 0.0, None, None
    failures = []
    for name in names:
        base = params[name]
        for idx in np.ndindex(base.shape):
            probe = dict(params)
            plus = base.copy()
            plus[idx] += step
            probe[name] = plus
            f_plus = loss_fn(probe)[0]
            minus = base.copy()
            minus[idx] -= step
            probe[name] = minus
            f_minus = loss_fn(probe)[0]
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name][idx])
            if not (math.isfinite(fd) and math.isfinite(a)):
                failures.append((name, idx))
                continue
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            if rel > worst:
                worst, worst_name, worst_idx = rel, name, idx
    return GradCheckResult(worst, worst_name, worst_idx, failures)
