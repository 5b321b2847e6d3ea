"""Entropy-distribution alignment and feature alignment.

Feature entropy, the two FIFO entropy buffers, the momentum (EMA) model,
the energy-distance loss over entropy samples, the in-batch InfoNCE loss
and the weighted composite objective.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .numerics import NumericalError, l2_normalize, l2_normalize_backward, log_softmax


@dataclass(frozen=True)
class AlignmentConfig:
    M: int = 2048
    m: float = 0.995
    r: int = 50
    tau: float = 0.07
    lam: float = 5.0
    gamma: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0

    def validate(self) -> None:
        if int(self.M) < 2:
            raise ValueError(f"align.M must be >= 2, got {self.M}")
        if not 0.0 < self.m < 1.0:
            raise ValueError(f"align.m must be in (0, 1), got {self.m}")
        if int(self.r) < 1:
            raise ValueError(f"align.r must be >= 1, got {self.r}")
        if not self.tau > 0:
            raise ValueError(f"align.tau must be > 0, got {self.tau}")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("align.lam and align.gamma must be >= 0")
        if not self.alpha > 0 or self.beta < 0:
            raise ValueError("align.alpha must be > 0 and align.beta >= 0")


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------


def feature_entropy(z) -> np.ndarray | float:
    """Shannon entropy of softmax(z) along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 1:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite input")
    logp = log_softmax(z)
    H = -np.sum(np.exp(logp) * logp, axis=-1)
    return float(H) if H.ndim == 0 else H


def feature_entropy_grad(z) -> tuple[np.ndarray, np.ndarray]:
    """Entropy and its gradient, ``dH/dz = -p * (log p + H)``."""
    z = np.asarray(z, dtype=np.float64)
    logp = log_softmax(z)
    p = np.exp(logp)
    H = -np.sum(p * logp, axis=-1)
    return H, -p * (logp + H[..., None])


def fused_entropy(H_v: float, H_s: float, alpha: float, beta: float) -> float:
    if H_v < 0 or H_s < 0:
        raise ValueError("entropies must be non-negative")
    if not alpha > 0 or beta < 0:
        raise ValueError("need alpha > 0 and beta >= 0")
    return alpha * H_v + beta * H_s


# ---------------------------------------------------------------------------
# Entropy buffers
# ---------------------------------------------------------------------------


class Entry(NamedTuple):
    sample_id: int
    entropy: float
    insertion_index: int


class EntropyBuffer:
    """Bounded FIFO of per-sample entropies for one modality."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._entries: deque[Entry] = deque()
        self._counter = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def next_index(self) -> int:
        return self._counter

    def entries(self) -> list[Entry]:
        return list(self._entries)

    def values(self) -> np.ndarray:
        return np.fromiter((e.entropy for e in self._entries), dtype=np.float64,
                           count=len(self._entries))

    def sample_ids(self) -> np.ndarray:
        return np.fromiter((e.sample_id for e in self._entries), dtype=np.int64,
                           count=len(self._entries))

    def push(self, sample_ids: Iterable[int], entropies: Iterable[float]) -> list[Entry]:
        """Append new entries; return the oldest entries evicted to stay within capacity."""
        for sid, h in zip(sample_ids, entropies, strict=True):
            h = float(h)
            if not math.isfinite(h):
                raise NumericalError(f"non-finite entropy for sample {sid}")
            self._entries.append(Entry(int(sid), h, self._counter))
            self._counter += 1
        evicted = []
        while len(self._entries) > self.capacity:
            evicted.append(self._entries.popleft())
        return evicted

    def set_oldest(self, entropies: np.ndarray) -> None:
        """Overwrite the entropy of the ``len(entropies)`` oldest entries in place."""
        for i, h in enumerate(entropies):
            e = self._entries[i]
            self._entries[i] = Entry(e.sample_id, float(h), e.insertion_index)

    def state(self) -> dict[str, np.ndarray]:
        return {
            "sample_id": self.sample_ids(),
            "entropy": self.values(),
            "insertion_index": np.fromiter((e.insertion_index for e in self._entries),
                                           dtype=np.int64, count=len(self._entries)),
            "meta": np.array([self.capacity, self._counter], dtype=np.int64),
        }

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "EntropyBuffer":
        capacity, counter = (int(x) for x in state["meta"])
        buf = cls(capacity)
        for sid, h, idx in zip(state["sample_id"], state["entropy"], state["insertion_index"]):
            buf._entries.append(Entry(int(sid), float(h), int(idx)))
        buf._counter = counter
        return buf


def buffer_push(buf: EntropyBuffer, sample_ids, entropies) -> list[Entry]:
    return buf.push(sample_ids, entropies)


def gate_threshold(M: int) -> int:
    return (int(M) + 1) // 2


def eal_ready(buf_v: EntropyBuffer, buf_s: EntropyBuffer, M: int) -> bool:
    """True once both buffers hold at least ceil(M/2) entries."""
    need = gate_threshold(M)
    return len(buf_v) >= need and len(buf_s) >= need


def refresh_count(M: int, r: int) -> int:
    if r < 1:
        raise ValueError("refresh step must be >= 1")
    return int(M) // int(r)


def buffer_refresh(buf: EntropyBuffer, entropy_of: Callable[[np.ndarray], np.ndarray],
                   M: int, r: int) -> int:
    """Recompute the entropies of the floor(M/r) oldest entries in place.

    ``entropy_of(sample_ids)`` re-encodes the given samples with the current
    momentum model and returns their entropies; it should raise ``KeyError``
    for an id it cannot resolve.  Insertion indices are left untouched.
    """
    if len(buf) == 0:
        raise ValueError("cannot refresh an empty buffer")
    n = min(refresh_count(M, r), len(buf))
    if n == 0:
        return 0
    ids = buf.sample_ids()[:n]
    fresh = np.asarray(entropy_of(ids), dtype=np.float64)
    if fresh.shape != (n,):
        raise ValueError(f"refresh returned shape {fresh.shape}, expected ({n},)")
    buf.set_oldest(fresh)
    return n


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _within_denominator(n: int, unbiased: bool) -> int:
    return n * (n - 1) if unbiased else n * n


def energy_distance(V, S, unbiased: bool = False) -> float:
    """Energy distance between two 1-D samples.

    ``2 mean|v - s| - mean|v - v'| - mean|s - s'|``.  By default the
    within-sample means run over all ordered pairs (the plug-in statistic of
    the two empirical distributions): nonnegative and exactly 0 when V and S
    are the same multiset.  ``unbiased=True`` excludes the ``i == i'`` terms.
    """
    V = np.asarray(V, dtype=np.float64).ravel()
    S = np.asarray(S, dtype=np.float64).ravel()
    if V.size < 2 or S.size < 2:
        raise ValueError("insufficient sample")
    nv, ns = V.size, S.size
    cross = np.abs(V[:, None] - S[None, :]).sum() / (nv * ns)
    within_v = np.abs(V[:, None] - V[None, :]).sum() / _within_denominator(nv, unbiased)
    within_s = np.abs(S[:, None] - S[None, :]).sum() / _within_denominator(ns, unbiased)
    return float(2.0 * cross - within_v - within_s)


def eal_loss(V, S, live=None, unbiased: bool = False) -> tuple[float, np.ndarray]:
    """Energy-distance alignment loss and its gradient w.r.t. ``V[live]``.

    ``live`` indexes the entries of ``V`` produced by the live model in this
    step; all other entries (and all of ``S``) are treated as constants.
    With ``live=None`` the gradient covers every entry of ``V``.
    """
    V = np.asarray(V, dtype=np.float64).ravel()
    S = np.asarray(S, dtype=np.float64).ravel()
    loss = energy_distance(V, S, unbiased)
    nv, ns = V.size, S.size
    Vl = V if live is None else V[live]
    # each unordered pair appears twice in the within sum, hence the factor 2
    g_cross = 2.0 * np.sign(Vl[:, None] - S[None, :]).sum(axis=1) / (nv * ns)
    g_within = 2.0 * np.sign(Vl[:, None] - V[None, :]).sum(axis=1) / _within_denominator(nv, unbiased)
    return loss, g_cross - g_within


def fal_loss(zt_v, z_s, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """In-batch InfoNCE from image rows to caption rows with cosine similarity.

    Returns the loss and gradients w.r.t. both inputs.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    zt_v = np.asarray(zt_v, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if zt_v.ndim != 2 or zt_v.shape[0] == 0:
        raise ValueError("empty batch")
    if zt_v.shape != z_s.shape:
        raise ValueError(f"shape mismatch: {zt_v.shape} vs {z_s.shape}")
    N = zt_v.shape[0]
    u = l2_normalize(zt_v)
    w = l2_normalize(z_s)
    logits = (u @ w.T) / tau
    logp = log_softmax(logits, axis=1)
    loss = float(-np.trace(logp) / N)
    d_logits = (np.exp(logp) - np.eye(N)) / N
    d_u = d_logits @ w / tau
    d_w = d_logits.T @ u / tau
    return loss, l2_normalize_backward(zt_v, d_u), l2_normalize_backward(z_s, d_w)


def total_loss(L_mse: float, L_eal: float, L_fal: float, lam: float, gamma: float) -> float:
    for name, value in (("L_mse", L_mse), ("L_eal", L_eal), ("L_fal", L_fal)):
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss component {name}")
    return L_mse + lam * L_eal + gamma * L_fal


# ---------------------------------------------------------------------------
# Momentum model
# ---------------------------------------------------------------------------


def momentum_update(theta, xi, m: float):
    """Elementwise ``m * xi + (1 - m) * theta`` for arrays or dicts of arrays."""
    if not 0.0 < m <= 1.0:
        raise ValueError("momentum must be in (0, 1]")
    if isinstance(theta, dict):
        if theta.keys() != xi.keys():
            raise ValueError("parameter groups differ between model and momentum model")
        return {k: momentum_update(theta[k], xi[k], m) for k in xi}
    theta = np.asarray(theta, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if theta.shape != xi.shape:
        raise ValueError(f"shape mismatch: {theta.shape} vs {xi.shape}")
    return m * xi + (1.0 - m) * theta


class MomentumModel:
    """EMA copy of the trainable parameters; never sees a gradient."""

    def __init__(self, params: dict[str, np.ndarray], m: float):
        if not 0.0 < m < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        self.params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
        self.m = float(m)

    def update(self, theta: dict[str, np.ndarray]) -> None:
        self.params = momentum_update(theta, self.params, self.m)
