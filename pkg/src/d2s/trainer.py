"""Training loop with entropy buffers and a momentum model, vision-only
inference, checkpoints, and the five-case ablation sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import alignment as al
from .config import CASES, SEEDS, TrainConfig
from .encoders import (
    HEAD_KEYS,
    VISION_KEYS,
    encode_images,
    encode_images_backward,
    embed_captions,
    init_text,
    init_trainable,
    predict_scores,
    predict_scores_backward,
    project_visual,
    project_visual_backward,
)
from .metrics import MetricsReport, evaluate, rademacher_estimate
from .numerics import AdamState, NumericalError, adam_step, cosine_lr, make_rng
from .synthdata import Dataset, generate_dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "L_mse", "L_eal", "L_fal", "L_total", "B_v", "B_s")


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# Composite objective
# ---------------------------------------------------------------------------


def composite_loss(params, images, gts, z_s, cfg: TrainConfig, eal_context=None):
    """Forward and backward pass of ``L_mse + lam * L_eal + gamma * L_fal``.

    ``eal_context`` is ``(V_old, S)``: the detached visual-buffer entropies
    that precede the current batch and the full text-buffer sample.  The
    live batch's visual entropies are appended to ``V_old``, so the EAL
    gradient reaches the model only through them.  When ``eal_context`` is
    None (gate closed or EAL disabled) ``L_eal`` is 0.

    Returns ``(components, grads)``; components holds L_mse, L_eal, L_fal,
    L_total.
    """
    lam, gamma = cfg.align.lam, cfg.align.gamma
    gts = np.asarray(gts, dtype=np.float64)
    N = gts.shape[0]
    z_v, vcache = encode_images(images, params, cfg.model, cfg.attn_pool)
    y_hat, hcache = predict_scores(z_v, params)
    L_mse = float(np.mean((y_hat - gts) ** 2))
    grads, dz_v = predict_scores_backward(2.0 * (y_hat - gts) / N, hcache, params)

    L_fal = 0.0
    if cfg.fal:
        zt_v = project_visual(z_v, params)
        L_fal, d_zt, _ = al.fal_loss(zt_v, z_s, cfg.align.tau)
        g_conn, dz_fal = project_visual_backward(z_v, params, gamma * d_zt)
        grads.update(g_conn)
        dz_v = dz_v + dz_fal
    else:
        grads["connector.W_v"] = np.zeros_like(params["connector.W_v"])

    L_eal = 0.0
    if cfg.eal and eal_context is not None:
        V_old, S = eal_context
        H, dH = al.feature_entropy_grad(z_v)
        V = np.concatenate([np.asarray(V_old, dtype=np.float64), H])
        L_eal, g_live = al.eal_loss(V, S, live=slice(len(V_old), None))
        dz_v = dz_v + lam * g_live[:, None] * dH

    grads.update(encode_images_backward(dz_v, vcache, params))
    L_total = al.total_loss(L_mse, L_eal, L_fal, lam, gamma)
    return dict(L_mse=L_mse, L_eal=L_eal, L_fal=L_fal, L_total=L_total), grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    text: dict[str, np.ndarray]
    mom: dict[str, np.ndarray]
    adam: AdamState
    buffers: dict[str, dict[str, np.ndarray]]
    step: int

    def inference_params(self) -> dict[str, np.ndarray]:
        """Only the vision encoder and the score head: all inference ever reads."""
        return {k: self.params[k] for k in VISION_KEYS + HEAD_KEYS}

    def save(self, path) -> None:
        arrays = {"meta/config": np.array(self.config.to_json()),
                  "meta/step": np.array(self.step, dtype=np.int64),
                  "meta/adam_step": np.array(self.adam.step_count, dtype=np.int64)}
        for prefix, group in (("param", self.params), ("text", self.text), ("mom", self.mom),
                              ("adam_m", self.adam.first_moment),
                              ("adam_v", self.adam.second_moment)):
            arrays.update({f"{prefix}/{k}": v for k, v in group.items()})
        for name, state in self.buffers.items():
            arrays.update({f"buffer/{name}/{k}": v for k, v in state.items()})
        path = Path(path)
        try:
            with open(path, "wb") as fh:
                np.savez(fh, **arrays)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            data = np.load(path, allow_pickle=False)
        except OSError as exc:
            raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
        groups: dict[str, dict] = {}
        buffers: dict[str, dict] = {}
        with data:
            for key in data.files:
                head, _, rest = key.partition("/")
                if head == "buffer":
                    name, _, fld = rest.partition("/")
                    buffers.setdefault(name, {})[fld] = data[key]
                else:
                    groups.setdefault(head, {})[rest] = data[key]
        meta = groups["meta"]
        config = TrainConfig.from_dict(json.loads(str(meta["config"])))
        adam = AdamState(groups.get("adam_m", {}), groups.get("adam_v", {}), int(meta["adam_step"]))
        return cls(config, groups.get("param", {}), groups.get("text", {}), groups.get("mom", {}),
                   adam, buffers, int(meta["step"]))


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)

    @property
    def first_gate_iter(self) -> int | None:
        return next((row["iter"] for row in self.log if row["gate"]), None)


class Trainer:
    """Owns all mutable training state; steps are strictly sequential."""

    def __init__(self, cfg: TrainConfig, train_set: Dataset, checkpoint: Checkpoint | None = None):
        cfg.validate()
        if len(train_set) == 0:
            raise ValueError("training set is empty")
        G = cfg.model.image_size
        if train_set.images.shape[1:] != (G, G):
            raise ValueError(
                f"dataset images are {train_set.images.shape[1:]}, config expects {(G, G)}")
        vocab = cfg.data.gen.vocab_size
        if max(max(c) for c in train_set.captions if c) >= vocab:
            raise ValueError(f"dataset captions use token ids beyond vocabulary size {vocab}")
        if cfg.batch_size > cfg.align.M:
            raise ValueError("train.batch_size must not exceed align.M")
        self.cfg = cfg
        self.data = train_set
        self.n = len(train_set)
        self.iters_per_epoch = math.ceil(self.n / cfg.batch_size)
        self.total_steps = cfg.epochs * self.iters_per_epoch

        if checkpoint is None:
            self.params = init_trainable(cfg.model, cfg.seed)
            self.text = init_text(cfg.model, vocab, cfg.data.seed)
            self.mom = al.MomentumModel(self.params, cfg.align.m)
            self.adam = AdamState.zeros_like(self.params)
            self.buf_v = al.EntropyBuffer(cfg.align.M)
            self.buf_s = al.EntropyBuffer(cfg.align.M)
            self.step = 0
        else:
            self.params = {k: v.copy() for k, v in checkpoint.params.items()}
            self.text = {k: v.copy() for k, v in checkpoint.text.items()}
            self.mom = al.MomentumModel(checkpoint.mom, cfg.align.m)
            self.adam = checkpoint.adam.copy()
            self.buf_v = al.EntropyBuffer.from_state(checkpoint.buffers["v"])
            self.buf_s = al.EntropyBuffer.from_state(checkpoint.buffers["s"])
            self.step = checkpoint.step

        # captions are embedded once; the text branch is frozen
        self.caption_cache = embed_captions(train_set.captions, self.text)
        self.text_entropy = al.feature_entropy(self.caption_cache)
        self._order_epoch = -1
        self._order = None

    # -- data order ------------------------------------------------------

    def batch_ids(self, step: int) -> np.ndarray:
        epoch, i = divmod(step, self.iters_per_epoch)
        if epoch != self._order_epoch:
            self._order = make_rng(self.cfg.seed, "order", epoch).permutation(self.n)
            self._order_epoch = epoch
        N = self.cfg.batch_size
        return self._order[i * N:(i + 1) * N]

    # -- momentum-model entropies ---------------------------------------

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        bad = ids[(ids < 0) | (ids >= self.n)]
        if bad.size:
            raise KeyError(f"unresolvable sample id {int(bad[0])}")
        return ids

    def mom_visual_entropy(self, ids) -> np.ndarray:
        ids = self._check_ids(ids)
        z_v, _ = encode_images(self.data.images[ids], self.mom.params, self.cfg.model,
                               self.cfg.attn_pool)
        return al.feature_entropy(z_v)

    def text_entropy_of(self, ids) -> np.ndarray:
        return self.text_entropy[self._check_ids(ids)]

    # -- one iteration ---------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.cfg, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.text.items()},
                          {k: v.copy() for k, v in self.mom.params.items()},
                          self.adam.copy(),
                          {"v": self.buf_v.state(), "s": self.buf_s.state()}, self.step)

    def train_step(self) -> dict:
        cfg = self.cfg
        if self.step >= self.total_steps:
            raise RuntimeError("training horizon already reached")
        good = self.checkpoint()
        try:
            row = self._step()
        except NumericalError as exc:
            self._restore(good)
            raise TrainingAborted(f"iteration {good.step}: {exc}", good) from exc
        self.step += 1
        return row

    def _restore(self, ckpt: Checkpoint) -> None:
        self.params, self.adam = ckpt.params, ckpt.adam
        self.mom = al.MomentumModel(ckpt.mom, self.cfg.align.m)
        self.buf_v = al.EntropyBuffer.from_state(ckpt.buffers["v"])
        self.buf_s = al.EntropyBuffer.from_state(ckpt.buffers["s"])

    def _step(self) -> dict:
        cfg, a = self.cfg, self.cfg.align
        ids = self.batch_ids(self.step)
        images, gts, z_s = self.data.images[ids], self.data.gts[ids], self.caption_cache[ids]

        self.buf_v.push(ids, self.mom_visual_entropy(ids))
        self.buf_s.push(ids, self.text_entropy_of(ids))
        gate = al.eal_ready(self.buf_v, self.buf_s, a.M)
        ed_buf = al.energy_distance(self.buf_v.values(), self.buf_s.values()) if gate else float("nan")

        context = None
        if cfg.eal and gate:
            context = (self.buf_v.values()[:-len(ids)], self.buf_s.values())
        lr = cosine_lr(self.step, self.total_steps, cfg.lr0, cfg.lr_min)
        comps, grads = composite_loss(self.params, images, gts, z_s, cfg, context)
        self.params, self.adam = adam_step(self.params, grads, self.adam, lr, cfg.beta1,
                                           cfg.beta2, cfg.eps, cfg.weight_decay)
        self.mom.update(self.params)
        refreshed = al.buffer_refresh(self.buf_v, self.mom_visual_entropy, a.M, a.r)
        al.buffer_refresh(self.buf_s, self.text_entropy_of, a.M, a.r)

        return {"iter": self.step, "lr": lr, **comps, "B_v": len(self.buf_v),
                "B_s": len(self.buf_s), "gate": gate, "ed_buf": ed_buf, "refreshed": refreshed}

    def run(self, steps: int | None = None) -> list[dict]:
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        rows = []
        while self.step < end:
            row = self.train_step()
            rows.append(row)
            if row["iter"] % self.iters_per_epoch == self.iters_per_epoch - 1:
                log.info("epoch %d  iter %d  L_total=%.5f  L_mse=%.5f  L_eal=%.5f  L_fal=%.5f",
                         row["iter"] // self.iters_per_epoch, row["iter"], row["L_total"],
                         row["L_mse"], row["L_eal"], row["L_fal"])
        return rows

    def visual_features(self, images) -> np.ndarray:
        return encode_images(images, self.params, self.cfg.model, self.cfg.attn_pool)[0]


def train(cfg: TrainConfig, train_set: Dataset, run_dir=None) -> TrainResult:
    trainer = Trainer(cfg, train_set)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        np.save(run_dir / "caption_cache.npy", trainer.caption_cache)
    try:
        rows = trainer.run()
    except TrainingAborted as exc:
        if run_dir is not None:
            exc.checkpoint.save(run_dir / "checkpoint_last_good.npz")
        raise
    result = TrainResult(trainer.checkpoint(), rows)
    if run_dir is not None:
        write_log_csv(rows, run_dir / "log.csv")
        result.checkpoint.save(run_dir / "checkpoint.npz")
    return result


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "lr", "L_mse", "L_eal", "L_fal", "L_total", "|B_v|", "|B_s|"])
        for r in rows:
            w.writerow([r[c] for c in LOG_COLUMNS])


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def infer(checkpoint: Checkpoint, images) -> np.ndarray:
    """Scores from images alone: vision encoder then head."""
    cfg = checkpoint.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    G = cfg.model.image_size
    if images.ndim != 3 or images.shape[1:] != (G, G):
        raise ValueError(f"images of shape {images.shape[1:]} do not match checkpoint size {(G, G)}")
    params = checkpoint.inference_params()
    z_v, _ = encode_images(images, params, cfg.model, cfg.attn_pool)
    return predict_scores(z_v, params)[0]


def visual_features(checkpoint: Checkpoint, images) -> np.ndarray:
    cfg = checkpoint.config
    return encode_images(images, checkpoint.inference_params(), cfg.model, cfg.attn_pool)[0]


def evaluate_checkpoint(checkpoint: Checkpoint, dataset: Dataset) -> MetricsReport:
    return evaluate(dataset.gts, infer(checkpoint, dataset.images))


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def benchmark_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    return (Dataset(generate_dataset(d.n_train, d.seed, d.gen, "train")),
            Dataset(generate_dataset(d.n_test, d.seed, d.gen, "test")))


def run_case(cfg: TrainConfig, case: str, seed: int, train_set: Dataset, test_set: Dataset,
             run_dir=None) -> dict:
    case_cfg = cfg.with_case(case).with_seed(seed)
    result = train(case_cfg, train_set, run_dir)
    ckpt = result.checkpoint
    report = evaluate_checkpoint(ckpt, test_set)
    feats = visual_features(ckpt, test_set.images)
    rad = rademacher_estimate(feats)
    gate_rows = [r for r in result.log if r["gate"]]
    row = {"case": case, "seed": seed, **report.as_dict(),
           "d_eff": rad.d_eff, "B": rad.B, "rademacher_bound": rad.bound,
           "ed_first_gate": gate_rows[0]["ed_buf"] if gate_rows else float("nan"),
           "ed_end": gate_rows[-1]["ed_buf"] if gate_rows else float("nan"),
           "first_gate_iter": result.first_gate_iter}
    if run_dir is not None:
        Path(run_dir, "metrics.json").write_text(json.dumps(row, indent=2) + "\n", encoding="utf-8")
    return row


ABLATION_FIELDS = ("srcc", "pcc", "rmse", "rmae", "d_eff", "rademacher_bound",
                   "ed_first_gate", "ed_end")


def summarize(rows: list[dict]) -> list[dict]:
    """Per-case mean and (population) std of every metric over seeds."""
    out = []
    for case in sorted({r["case"] for r in rows}):
        sub = [r for r in rows if r["case"] == case]
        summary = {"case": case, "n_seeds": len(sub)}
        for f in ABLATION_FIELDS:
            vals = np.array([r[f] for r in sub], dtype=np.float64)
            summary[f"{f}_mean"] = float(np.mean(vals))
            summary[f"{f}_std"] = float(np.std(vals))
        out.append(summary)
    return out


def ablate(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, cases=("a", "b", "c", "d", "e"),
           seeds=SEEDS, out_dir=None) -> dict:
    bad = [c for c in cases if c not in CASES]
    if bad:
        raise ValueError(f"unknown ablation case(s) {bad}")
    rows = []
    for case in cases:
        for seed in seeds:
            run_dir = None if out_dir is None else Path(out_dir) / f"case_{case}_seed_{seed}"
            log.info("ablation case %s seed %d", case, seed)
            rows.append(run_case(cfg, case, seed, train_set, test_set, run_dir))
    report = {"runs": rows, "summary": summarize(rows)}
    if out_dir is not None:
        write_ablation_report(report, out_dir)
    return report


def write_ablation_report(report: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for name, rows in (("ablation_runs.csv", report["runs"]), ("ablation_summary.csv", report["summary"])):
        with open(out_dir / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
