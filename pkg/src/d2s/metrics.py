"""Regression metrics (SRCC, PCC, RMSE, RMAE) and the effective-dimension /
Rademacher-bound diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

REPORT_FIELDS = ("srcc", "pcc", "rmse", "rmae", "n")


def _pair(y, y_hat, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size != y_hat.size:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {y.size}")
    return y, y_hat


def _pearson(a: np.ndarray, b: np.ndarray, what: str) -> float:
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = math.sqrt(np.dot(a, a)), math.sqrt(np.dot(b, b))
    if sa == 0.0 or sb == 0.0:
        raise ValueError(f"zero {what} variance")
    r = float(np.dot(a, b) / (sa * sb))
    return max(-1.0, min(1.0, r))


def pcc(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat, 2)
    return _pearson(y, y_hat, "")


def srcc(y, y_hat) -> float:
    """Spearman correlation; tied values share their average rank."""
    y, y_hat = _pair(y, y_hat, 2)
    return _pearson(rankdata(y), rankdata(y_hat), "rank")


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat, 1)
    return math.sqrt(float(np.mean((y - y_hat) ** 2)))


def rmae(y, y_hat) -> float:
    """Root of the mean absolute error."""
    y, y_hat = _pair(y, y_hat, 1)
    return math.sqrt(float(np.mean(np.abs(y - y_hat))))


@dataclass(frozen=True)
class MetricsReport:
    srcc: float
    pcc: float
    rmse: float
    rmae: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_header(self) -> str:
        return ",".join(REPORT_FIELDS)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow([getattr(self, f) for f in REPORT_FIELDS])
        return buf.getvalue()

    def text(self) -> str:
        return " ".join(f"{f}={getattr(self, f)}" for f in REPORT_FIELDS)


def evaluate(y, y_hat) -> MetricsReport:
    y, y_hat = _pair(y, y_hat, 2)
    return MetricsReport(srcc(y, y_hat), pcc(y, y_hat), rmse(y, y_hat), rmae(y, y_hat), int(y.size))


def effective_dim(features, variance_threshold: float = 0.95) -> int:
    """Number of principal components needed to explain the given variance share."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need an n x d feature matrix with n >= 2")
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError("variance_threshold must lie in (0, 1]")
    Xc = X - X.mean(axis=0)
    eig = np.clip(np.linalg.eigvalsh(Xc.T @ Xc / (X.shape[0] - 1)), 0.0, None)[::-1]
    total = eig.sum()
    if total <= 1e-12 * max(1.0, float(np.abs(X).max()) ** 2):
        return 0
    share = np.cumsum(eig) / total
    # slack absorbs rounding when the threshold is exactly 1
    return int(np.searchsorted(share, variance_threshold - 1e-12) + 1)


@dataclass(frozen=True)
class RademacherEstimate:
    B: float
    d_eff: int
    n: int
    bound: float


def rademacher_bound(B: float, d_eff: float, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    if B < 0 or d_eff < 0:
        raise ValueError("B and d_eff must be non-negative")
    return B * math.sqrt(d_eff) / math.sqrt(n)


def rademacher_estimate(features, variance_threshold: float = 0.95) -> RademacherEstimate:
    X = np.asarray(features, dtype=np.float64)
    B = float(np.linalg.norm(X, axis=1).max())
    d = effective_dim(X, variance_threshold)
    return RademacherEstimate(B, d, X.shape[0], rademacher_bound(B, d, X.shape[0]))
