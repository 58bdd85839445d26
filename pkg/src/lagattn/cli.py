"""Command line front end: gen-data, train, eval, bench, ablate.

Metrics are emitted as newline-delimited JSON records (one object per
line). Exit codes: 0 success, 2 usage, 3 file problems, 4 numerical
failure. The LAGATTN_OUT environment variable sets the default output
directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import statistics
import sys
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import model as M
from . import synthdata as S
from . import xcorr
from .attention import CabParams, correlated_attention

EXIT_USAGE = 2
EXIT_FILE = 3
EXIT_NUMERICAL = 4

ABLATION_PRESETS = ("baseline", "pure", "static", "lambda", "beta")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of a training run; defaults follow the reference regime
    (tau = 1, lambda = beta = 1/2, h = 16, m = 8, 30 epochs, patience 10,
    batch 16, or 128 for anomaly detection)."""

    task: str = "imputation"
    d_in: int = 8
    d_model: int = 16
    d_k: int = 8
    h: int = 16
    m: int = 8
    n_blocks: int = 1
    n_classes: int = 2
    c: int = 1
    temporal: str = "self"
    positional: str = "none"
    lag_path: str = "fft"
    ablation: str = "baseline"
    cab: bool = True
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    lambda_mode: str = "fixed"
    beta_learnable: bool = True
    tau_learnable: bool = True
    lambda_init: float = 0.5
    beta_init: float = 0.5
    tau_init: float = 1.0
    filtering_enabled: bool = True

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def apply_ablation(cfg: RunConfig) -> RunConfig:
    """Realize the ablation presets on top of a run config."""
    preset = cfg.ablation
    if preset not in ABLATION_PRESETS:
        raise UsageError(f"unknown ablation preset {preset!r}; "
                         f"choose from {ABLATION_PRESETS}")
    if preset == "pure":
        # all-correlated heads, no lag filtering, beta pinned to 0
        cfg.m = 0
        cfg.filtering_enabled = False
        cfg.beta_learnable = False
        cfg.beta_init = 0.0
        cfg.lambda_mode = "fixed"
    elif preset == "static":
        cfg.lambda_mode = "fixed"
        cfg.beta_learnable = False
        cfg.lambda_init = 0.5
        cfg.beta_init = 0.5
    elif preset == "lambda":
        cfg.lambda_mode = "learnable"
        cfg.beta_learnable = False
        cfg.beta_init = 0.5
    elif preset == "beta":
        cfg.lambda_mode = "fixed"
        cfg.beta_learnable = True
        cfg.lambda_init = 0.5
    return cfg


def model_config(cfg: RunConfig) -> M.ModelConfig:
    m = cfg.m if cfg.cab else cfg.h
    return M.ModelConfig(
        task=cfg.task, d_in=cfg.d_in, d_model=cfg.d_model, d_k=cfg.d_k,
        h=cfg.h, m=m, n_blocks=cfg.n_blocks, n_classes=cfg.n_classes, c=cfg.c,
        temporal=cfg.temporal, positional=cfg.positional,
        lambda_mode=cfg.lambda_mode, beta_learnable=cfg.beta_learnable,
        tau_learnable=cfg.tau_learnable, lambda_init=cfg.lambda_init,
        beta_init=cfg.beta_init if 0.0 < cfg.beta_init < 1.0 else 0.5,
        tau_init=cfg.tau_init,
        filtering_enabled=cfg.filtering_enabled,
        use_fft=(cfg.lag_path == "fft"),
    )


# ---------------------------------------------------------------------------
# config files and helpers


def out_dir() -> str:
    return os.environ.get("LAGATTN_OUT", ".")


def write_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        for key, val in sorted(asdict(cfg).items()):
            fh.write(f"{key} = {val}\n")


def read_config(path) -> dict:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}: bad config line {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def config_from_dict(values: dict) -> RunConfig:
    cfg = RunConfig()
    for key, raw in values.items():
        if not hasattr(cfg, key):
            raise UsageError(f"unknown config key {key!r}")
        cur = getattr(cfg, key)
        if isinstance(cur, bool):
            setattr(cfg, key, raw in ("True", "true", "1", "on"))
        elif isinstance(cur, int):
            setattr(cfg, key, int(raw))
        elif isinstance(cur, float):
            setattr(cfg, key, float(raw))
        else:
            setattr(cfg, key, raw)
    return cfg


def parse_lag_spec(text: str) -> list:
    """Parse 'src:dst:lag@weight[,src:dst:lag@weight...]'."""
    lags = []
    if not text:
        return lags
    for part in text.split(","):
        try:
            triple, weight = (part.split("@") + ["1.0"])[:2] if "@" in part \
                else (part, "1.0")
            src, dst, lag = triple.split(":")
            lags.append((int(src), int(dst), int(lag), float(weight)))
        except ValueError:
            raise UsageError(f"bad --lags entry {part!r}; expected src:dst:lag@weight")
    return lags


def load_split_files(prefix: str):
    paths = [f"{prefix}.train", f"{prefix}.val", f"{prefix}.test"]
    out = []
    task = None
    for p in paths:
        samples, task = S.read_dataset(p)
        out.append(samples)
    return out[0], out[1], out[2], task


def emit(record: dict, fh=None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if fh is not None:
        fh.write(line + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = S.DatasetSpec(
        task=args.task, t=args.t, d=args.d, n_samples=args.samples,
        mask_ratio=args.mask_ratio, planted_lags=parse_lag_spec(args.lags),
        noise=args.noise, seed=args.seed, n_classes=args.classes,
    )
    samples = S.gen_lagged_series(spec)
    if args.task == "imputation":
        samples = [S.apply_mask(s, args.mask_ratio, seed=args.seed * 100003 + i)
                   for i, s in enumerate(samples)]
    train, val, test = S.split_dataset(samples, spec.splits)
    if args.task == "anomaly":
        test = [S.inject_anomalies(s, args.anomaly_count, args.anomaly_magnitude,
                                   seed=args.seed * 100003 + i)
                for i, s in enumerate(test)]
    base = os.path.join(out_dir(), args.out)
    for name, part in (("train", train), ("val", val), ("test", test)):
        S.write_dataset(f"{base}.{name}", part, task=args.task)
    emit({"event": "gen-data", "out": base, "train": len(train),
          "val": len(val), "test": len(test)})
    return 0


def build_run_config(args) -> RunConfig:
    cfg = config_from_dict(read_config(args.config)) if args.config else RunConfig()
    for key in ("task", "d_model", "d_k", "h", "m", "n_blocks", "c", "temporal",
                "positional", "lag_path", "ablation", "lr", "batch_size",
                "epochs", "patience", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "cab", None) is not None:
        cfg.cab = args.cab == "on"
    return apply_ablation(cfg)


def cmd_train(args) -> int:
    train, val, test, task = load_split_files(args.data)
    cfg = build_run_config(args)
    cfg.task = task
    cfg.d_in = train[0].values.shape[1]
    if task == "anomaly" and args.batch_size is None:
        cfg.batch_size = 128
    mcfg = model_config(cfg)
    params = M.init_params(mcfg, seed=cfg.seed)

    train_s = [S.to_training_sample(s, task) for s in train]
    val_s = [S.to_training_sample(s, task) for s in val]
    test_s = [S.to_training_sample(s, task) for s in test]

    run_id = cfg.config_hash()
    metrics_fh = open(args.metrics, "w") if args.metrics else None
    try:
        t0 = time.perf_counter()
        records = M.train_model(train_s, val_s, params, mcfg, lr=cfg.lr,
                                batch_size=cfg.batch_size, epochs=cfg.epochs,
                                patience=cfg.patience, seed=cfg.seed)
        elapsed = time.perf_counter() - t0
        n_iters = sum(math.ceil(len(train_s) / cfg.batch_size)
                      for _ in records) or 1
        for rec in records:
            emit({"run_id": run_id, **rec}, metrics_fh)
        summary = {"run_id": run_id, "event": "summary",
                   "config_hash": run_id, "epochs_run": len(records),
                   "final_train_loss": records[-1]["train_loss"],
                   "final_val_loss": records[-1]["val_loss"],
                   "s_per_iter": elapsed / n_iters}
        summary.update(M.evaluate_metrics(
            test_s, params, mcfg,
            val_samples=val_s if task == "anomaly" else None))
        summary.pop("degenerate", None)
        summary.pop("threshold", None)
        emit(summary, metrics_fh)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if args.checkpoint:
        M.save_checkpoint(args.checkpoint, params)
        write_config(args.checkpoint + ".config", cfg)
    return 0


def cmd_eval(args) -> int:
    train, val, test, task = load_split_files(args.data)
    cfg = config_from_dict(read_config(args.checkpoint + ".config"))
    cfg.task = task
    cfg.d_in = test[0].values.shape[1]
    mcfg = model_config(cfg)
    params = M.init_params(mcfg, seed=cfg.seed)
    M.load_into(params, args.checkpoint)
    val_s = [S.to_training_sample(s, task) for s in val]
    test_s = [S.to_training_sample(s, task) for s in test]
    summary = {"event": "eval", "config_hash": cfg.config_hash()}
    summary.update(M.evaluate_metrics(
        test_s, params, mcfg, val_samples=val_s if task == "anomaly" else None))
    summary.pop("degenerate", None)
    summary.pop("threshold", None)
    emit(summary)
    return 0


def _median_time(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cmd_bench(args) -> int:
    t_values = [int(v) for v in args.t_list.split(",")]
    d_values = [int(v) for v in args.d_list.split(",")]
    rng = np.random.default_rng(args.seed)
    print("T,d_k,naive_s,fft_s,cab_fwd_s")
    rows = []
    for t in t_values:
        for d in d_values:
            q = rng.normal(size=(t, d))
            k = rng.normal(size=(t, d))
            v = rng.normal(size=(t, d))
            cab = CabParams(c=1)
            naive = _median_time(lambda: xcorr.xcorr_all_lags_naive(q, k),
                                 args.reps, args.warmup)
            fft = _median_time(lambda: xcorr.xcorr_all_lags_fft(q, k),
                               args.reps, args.warmup)
            full = _median_time(lambda: correlated_attention(q, k, v, cab),
                                args.reps, args.warmup)
            rows.append((t, d, naive, fft, full))
            print(f"{t},{d},{naive:.6g},{fft:.6g},{full:.6g}")
    return 0


def cmd_ablate(args) -> int:
    results = []
    for preset in ABLATION_PRESETS:
        ns = argparse.Namespace(**vars(args))
        ns.ablation = preset
        cfg = build_run_config(ns)
        train, val, test, task = load_split_files(args.data)
        cfg.task = task
        cfg.d_in = train[0].values.shape[1]
        mcfg = model_config(cfg)
        params = M.init_params(mcfg, seed=cfg.seed)
        train_s = [S.to_training_sample(s, task) for s in train]
        val_s = [S.to_training_sample(s, task) for s in val]
        test_s = [S.to_training_sample(s, task) for s in test]
        M.train_model(train_s, val_s, params, mcfg, lr=cfg.lr,
                      batch_size=cfg.batch_size, epochs=cfg.epochs,
                      patience=cfg.patience, seed=cfg.seed)
        metrics = M.evaluate_metrics(
            test_s, params, mcfg,
            val_samples=val_s if task == "anomaly" else None)
        metrics.pop("degenerate", None)
        metrics.pop("threshold", None)
        rec = {"event": "ablate", "preset": preset,
               "config_hash": cfg.config_hash(), **metrics}
        emit(rec)
        results.append(rec)
    keys = [k for k in results[0] if k not in ("event",)]
    print("preset," + ",".join(k for k in keys if k != "preset"))
    for rec in results:
        print(rec["preset"] + "," + ",".join(
            str(rec[k]) for k in keys if k != "preset"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lagattn")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", required=True,
                   choices=("imputation", "anomaly", "classification"))
    g.add_argument("--t", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--samples", type=int, default=32)
    g.add_argument("--mask-ratio", type=float, default=0.25)
    g.add_argument("--lags", default="", help="src:dst:lag@weight[,...]")
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--anomaly-count", type=int, default=5)
    g.add_argument("--anomaly-magnitude", type=float, default=10.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--data", required=True, help="dataset path prefix")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--model", choices=("transformer", "nonstationary"),
                       default=None)
        p.add_argument("--cab", choices=("on", "off"), default=None)
        p.add_argument("--ablation", choices=ABLATION_PRESETS, default=None)
        p.add_argument("--d-model", dest="d_model", type=int, default=None)
        p.add_argument("--d-k", dest="d_k", type=int, default=None)
        p.add_argument("--h", type=int, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--blocks", dest="n_blocks", type=int, default=None)
        p.add_argument("--c", type=int, default=None)
        p.add_argument("--temporal", choices=("self", "destat"), default=None)
        p.add_argument("--positional", choices=("none", "sin"), default=None)
        p.add_argument("--lag-path", dest="lag_path", choices=("fft", "naive"),
                       default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", dest="batch_size", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train a model")
    add_train_flags(t)
    t.add_argument("--checkpoint", default=None)
    t.add_argument("--metrics", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time naive vs FFT lag scoring")
    b.add_argument("--t-list", default="384,768,1536")
    b.add_argument("--d-list", default="8")
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="run all ablation presets")
    add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def _model_flag_to_temporal(args) -> None:
    if getattr(args, "model", None) == "nonstationary":
        args.temporal = "destat"
    elif getattr(args, "model", None) == "transformer" and args.temporal is None:
        args.temporal = "self"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _model_flag_to_temporal(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, S.DatasetParseError, M.CheckpointError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except M.NumericalFailure as exc:
        print(json.dumps({"event": "abort", "reason": str(exc)}), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
