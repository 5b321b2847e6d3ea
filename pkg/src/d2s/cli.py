"""Command-line entry point: ``d2s <subcommand> [options]``.

Subcommands: gen-data, train, eval, infer, ablate, verify.  Without
``--config`` the bundled benchmark configuration is used; ``--set
section.key=value`` overrides are applied after the file is parsed.

Exit codes: 0 success, 1 failed verification or other runtime error,
2 configuration error, 3 I/O or dataset-format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import CASES, SEEDS, ConfigError, TrainConfig, apply_overrides
from .synthdata import Dataset, DatasetFormatError, decile_histogram, generate_dataset, read_dataset, write_dataset

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("d2s")


def _setup_logging() -> None:
    name = os.environ.get("D2S_LOG_LEVEL", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"D2S_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def _load(args) -> TrainConfig:
    if args.config is None:
        text = resources.files("d2s").joinpath("configs/benchmark.json").read_text(encoding="utf-8")
        source = "bundled benchmark"
    else:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
        source = args.config
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc})") from exc
    cfg = TrainConfig.from_dict(apply_overrides(raw, args.overrides))
    cfg.validate()
    return cfg


def _single_seed(args, default: int) -> int:
    if not args.seed:
        return default
    if len(args.seed) > 1:
        raise ConfigError("this subcommand takes a single --seed")
    return args.seed[0]


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset(path, cfg: TrainConfig, split: str) -> Dataset:
    if path is not None:
        return Dataset(read_dataset(path))
    n = cfg.data.n_train if split == "train" else cfg.data.n_test
    return Dataset(generate_dataset(n, cfg.data.seed, cfg.data.gen, split))


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    seed = _single_seed(args, cfg.data.seed)
    n = cfg.data.n_train if args.n is None else args.n
    if n < 0:
        raise ConfigError("--n must be >= 0")
    if n == 0:
        log.warning("n=0: writing an empty dataset")
    samples = generate_dataset(n, seed, cfg.data.gen, args.split)
    out = _out_dir(args)
    write_dataset(samples, out / "dataset.jsonl")
    manifest = {"count": len(samples), "seed": seed, "split": args.split,
                "gt_deciles": decile_histogram(s.gt for s in samples),
                "generator": cfg.to_dict()["data"]}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(samples)} samples to {out / 'dataset.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import evaluate_checkpoint, train
    cfg = _load(args)
    cfg = cfg.with_seed(_single_seed(args, cfg.seed))
    out = _out_dir(args)
    train_set = _dataset(args.data, cfg, "train")
    test_set = _dataset(args.test_data, cfg, "test")
    if args.data is not None or args.test_data is not None:
        _write_json(out / "data_sources.json", {"train": args.data, "test": args.test_data})
    result = train(cfg, train_set, out)
    gate = result.first_gate_iter
    log.info("EAL gate first open at iteration %s", gate)
    if len(test_set) >= 2:
        report = evaluate_checkpoint(result.checkpoint, test_set)
        _write_json(out / "metrics.json", report.as_dict())
        print(report.text())
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Checkpoint, evaluate_checkpoint
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = TrainConfig.from_dict(apply_overrides(ckpt.config.to_dict(), args.overrides))
    data = _dataset(args.data, cfg, "test")
    report = evaluate_checkpoint(ckpt, data)
    if args.out is not None:
        out = _out_dir(args)
        _write_json(out / "metrics.json", report.as_dict())
        (out / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n",
                                         encoding="utf-8")
    print(report.text())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .trainer import Checkpoint, infer
    if args.checkpoint is None:
        raise ConfigError("infer needs --checkpoint")
    if args.data is None:
        raise ConfigError("infer needs --data")
    ckpt = Checkpoint.load(args.checkpoint)
    samples = read_dataset(args.data)
    scores = infer(ckpt, np.stack([s.image for s in samples])) if samples else np.zeros(0)
    if args.out is None:
        fh, close = sys.stdout, False
    else:
        fh, close = open(_out_dir(args) / "predictions.csv", "w", newline="", encoding="utf-8"), True
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "seed", "score"])
        for i, (s, y) in enumerate(zip(samples, scores)):
            w.writerow([i, s.seed, repr(float(y))])
    finally:
        if close:
            fh.close()
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablate
    cfg = _load(args)
    seeds = tuple(args.seed) if args.seed else SEEDS
    cases = tuple(args.cases)
    bad = [c for c in cases if c not in CASES]
    if bad:
        raise ConfigError(f"unknown ablation case(s) {bad}; expected letters from {''.join(CASES)}")
    out = _out_dir(args)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    train_set = _dataset(args.data, cfg, "train")
    test_set = _dataset(args.test_data, cfg, "test")
    report = ablate(cfg, train_set, test_set, cases, seeds, out)
    print("case  n  srcc_mean  srcc_std  pcc_mean  rmse_mean  d_eff_mean")
    for s in report["summary"]:
        print(f"{s['case']:>4} {s['n_seeds']:>2}  {s['srcc_mean']:.4f}     {s['srcc_std']:.4f}    "
              f"{s['pcc_mean']:.4f}    {s['rmse_mean']:.4f}     {s['d_eff_mean']:.2f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_FAILURE


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (default: bundled benchmark)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", metavar="N", type=int, action="append", default=[],
                        help="seed; repeatable for ablate")
    common.add_argument("--set", metavar="KEY=VALUE", dest="overrides", action="append",
                        default=[], help="dotted-key override, e.g. align.M=512; repeatable")

    p = argparse.ArgumentParser(prog="d2s", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n", type=int, default=None, help="sample count (default data.n_train)")
    g.add_argument("--split", default="train", help="split name used for per-sample seeds")
    g.set_defaults(func=cmd_gen_data, out_default="data")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", metavar="PATH", help="training dataset (default: generated)")
    t.add_argument("--test-data", metavar="PATH", help="held-out dataset (default: generated)")
    t.set_defaults(func=cmd_train, out_default="run")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--data", metavar="PATH", help="dataset (default: generated test split)")
    e.set_defaults(func=cmd_eval, out_default=None)

    i = sub.add_parser("infer", parents=[common], help="score images with a checkpoint")
    i.add_argument("--checkpoint", metavar="PATH")
    i.add_argument("--data", metavar="PATH")
    i.set_defaults(func=cmd_infer, out_default=None)

    a = sub.add_parser("ablate", parents=[common], help="ablation sweep over cases and seeds")
    a.add_argument("--cases", default="abcde", help="case letters to run (default abcde)")
    a.add_argument("--data", metavar="PATH")
    a.add_argument("--test-data", metavar="PATH")
    a.set_defaults(func=cmd_ablate, out_default="ablation")

    v = sub.add_parser("verify", parents=[common], help="run the oracle suite")
    v.set_defaults(func=cmd_verify, out_default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.out is None:
        args.out = args.out_default
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        from .trainer import TrainingAborted
        if isinstance(exc, TrainingAborted):
            log.error("numerical abort: %s", exc)
            return EXIT_NUMERICAL
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
