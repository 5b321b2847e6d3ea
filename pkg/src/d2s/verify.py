"""Self-contained oracle suite behind ``d2s verify``.

Each check compares a production routine against a deliberately naive
reference (explicit loops, closed forms, finite differences) and returns a
:class:`CheckResult`.  ``run_all`` accepts an alternative ``eal_fn`` so a
mutated loss can be injected to confirm the suite notices.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import alignment as al
from . import metrics as mt
from .config import TrainConfig
from .encoders import ModelDims, init_text, init_trainable, embed_captions
from .numerics import grad_check, make_rng


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


# -- naive references ------------------------------------------------------


def energy_distance_loops(V, S, unbiased: bool = False) -> float:
    V, S = [float(x) for x in V], [float(x) for x in S]
    nv, ns = len(V), len(S)
    cross = sum(abs(v - s) for v in V for s in S) / (nv * ns)
    vv = sum(abs(V[i] - V[j]) for i in range(nv) for j in range(nv) if i != j or not unbiased)
    ss = sum(abs(S[i] - S[j]) for i in range(ns) for j in range(ns) if i != j or not unbiased)
    dv = nv * (nv - 1) if unbiased else nv * nv
    ds = ns * (ns - 1) if unbiased else ns * ns
    return 2.0 * cross - vv / dv - ss / ds


def ranks_loops(x) -> list[float]:
    x = [float(v) for v in x]
    out = []
    for v in x:
        below = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        out.append(below + (equal + 1) / 2.0)
    return out


def pearson_loops(a, b) -> float:
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


# -- checks ----------------------------------------------------------------


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        name, ok, detail = fn(*args, **kwargs)
        return CheckResult(name, ok, detail, time.perf_counter() - t0)
    wrapper.__name__ = fn.__name__
    return wrapper


@_timed
def check_energy_distance(eal_fn=None, n_pairs: int = 200, seed: int = 0, tol: float = 1e-12):
    eal_fn = eal_fn or (lambda V, S: al.eal_loss(V, S)[0])
    rng = make_rng(seed, "verify", "energy")
    worst = 0.0
    for _ in range(n_pairs):
        V = rng.normal(size=int(rng.integers(2, 65))) * rng.uniform(0.1, 3.0)
        S = rng.normal(size=int(rng.integers(2, 65))) + rng.normal()
        ref = energy_distance_loops(V, S)
        worst = max(worst,
                    abs(eal_fn(V, S) - ref),
                    abs(eal_fn(V, S) - eal_fn(S, V)),
                    abs(eal_fn(V, V.copy())))
    return "energy distance vs double loop", worst <= tol, f"max abs diff {worst:.3e} (tol {tol:g})"


@_timed
def check_metrics(n_pairs: int = 100, seed: int = 0, tol: float = 1e-10):
    rng = make_rng(seed, "verify", "metrics")
    worst = 0.0
    monotone_ok = True
    for _ in range(n_pairs):
        n = int(rng.integers(3, 101))
        y = rng.normal(size=n)
        y_hat = y + rng.normal(size=n)
        # inject ties on both sides
        y_hat[rng.integers(0, n, size=n // 3)] = y_hat[0]
        y = np.round(y, 1)
        if np.ptp(y) == 0 or np.ptp(y_hat) == 0:
            continue
        ry, rh = ranks_loops(y), ranks_loops(y_hat)
        ref = dict(srcc=pearson_loops(ry, rh), pcc=pearson_loops(list(y), list(y_hat)),
                   rmse=math.sqrt(sum((a - b) ** 2 for a, b in zip(y, y_hat)) / n),
                   rmae=math.sqrt(sum(abs(a - b) for a, b in zip(y, y_hat)) / n))
        got = mt.evaluate(y, y_hat)
        worst = max(worst, *(abs(getattr(got, k) - v) for k, v in ref.items()))
        monotone_ok &= mt.srcc(y, np.exp(y_hat)) == got.srcc
    ok = worst <= tol and monotone_ok
    return ("SRCC/PCC/RMSE/RMAE vs brute force", ok,
            f"max abs diff {worst:.3e} (tol {tol:g}); monotone invariance {'exact' if monotone_ok else 'broken'}")


@_timed
def check_ema(t: int = 1000, m: float = 0.995, seed: int = 0, tol: float = 1e-12):
    rng = make_rng(seed, "verify", "ema")
    xi0 = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    theta = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    xi = xi0
    for _ in range(t):
        xi = al.momentum_update(theta, xi, m)
    mt_ = m ** t
    err = max(float(np.max(np.abs(xi[k] - (mt_ * xi0[k] + (1 - mt_) * theta[k])))) for k in xi)
    return f"EMA closed form (t={t}, m={m})", err <= tol, f"max abs diff {err:.3e} (tol {tol:g})"


def _grad_fixture(case: str, seed: int = 0, n: int = 4):
    """A 4-sample batch, random buffers and a compact model for gradient checks."""
    from .synthdata import generate_dataset
    from .synthdata import Dataset
    cfg = TrainConfig(model=ModelDims(d_tok=8, d_hidden=12, d_v=10, d_t=6, head_hidden=8))
    cfg = cfg.with_case(case)
    ds = Dataset(generate_dataset(n, seed, cfg.data.gen, "verify"))
    rng = make_rng(seed, "verify", "grad")
    params = init_trainable(cfg.model, seed)
    # non-zero biases and query so every path carries gradient
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    text = init_text(cfg.model, cfg.data.gen.vocab_size, seed)
    z_s = embed_captions(ds.captions, text)
    V_old = rng.uniform(0.5, 2.0, size=12)
    S = rng.uniform(0.5, 2.0, size=16)
    return cfg, ds, params, z_s, (V_old, S)


@_timed
def check_gradients(cases=("a", "b", "c", "d", "e"), tol: float = 1e-4, step: float = 1e-4):
    from .trainer import composite_loss
    worst, where = 0.0, ""
    failures = 0
    for case in cases:
        cfg, ds, params, z_s, ctx = _grad_fixture(case)

        def loss_fn(p, cfg=cfg, ds=ds, z_s=z_s, ctx=ctx):
            comps, grads = composite_loss(p, ds.images, ds.gts, z_s, cfg, ctx)
            return comps["L_total"], grads

        res = grad_check(loss_fn, params, step=step)
        failures += len(res.failures)
        if res.max_rel_error > worst:
            worst, where = res.max_rel_error, f"case {case} {res.worst_param}{list(res.worst_index)}"
    ok = worst < tol and failures == 0
    return ("composite-loss gradient vs central differences", ok,
            f"max relative error {worst:.3e} at {where or '-'} (tol {tol:g})")


def run_all(eal_fn: Callable | None = None) -> list[CheckResult]:
    return [check_energy_distance(eal_fn), check_metrics(), check_ema(), check_gradients()]
