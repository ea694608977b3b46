"""Command-line front end: train / eval / profile / report.

Configuration comes from defaults, then an optional key=value file, then
command-line flags (highest precedence). Every run writes the resolved
configuration next to its outputs so it can be reproduced exactly.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import predict, profiling
from .container import CheckpointError
from .data import FormatError, load_named, standardize, synth_blobs
from .layers import count_parameters
from .matrix import NumericError
from .model import (
    CONV_PRESET_CHANNELS,
    init_conv,
    init_mlp,
    load_model,
    save_model,
)
from .trainers import ALGORITHMS, TrainConfig, train_epochs


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    """Plain key=value lines; '#' starts a comment; unknown keys rejected
    by the flag parser downstream."""
    out = {}
    try:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value")
                k, v = line.split("=", 1)
                out[k.strip().replace("-", "_")] = v.strip()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return out


_BOOL = {"1": True, "true": True, "yes": True,
         "0": False, "false": False, "no": False}


def _coerce(value: str, like):
    if isinstance(like, bool):
        try:
            return _BOOL[value.lower()]
        except KeyError:
            raise ConfigError(f"expected boolean, got {value!r}")
    if like is None or isinstance(like, str):
        return value
    return type(like)(value)


def apply_config_file(args: argparse.Namespace, defaults: dict):
    if not getattr(args, "config", None):
        return
    file_vals = parse_config_file(args.config)
    for key, raw in file_vals.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        # the flag wins when the user supplied it explicitly
        if getattr(args, key) == defaults[key]:
            try:
                setattr(args, key, _coerce(raw, defaults[key]))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e


def write_resolved(args: argparse.Namespace, path, skip=("config", "func")):
    with open(path, "w") as f:
        for k, v in sorted(vars(args).items()):
            if k in skip or callable(v):
                continue
            f.write(f"{k}={v}\n")


def _parse_arch(arch: str) -> list[int]:
    try:
        widths = [int(w) for w in arch.split(",") if w.strip()]
    except ValueError as e:
        raise ConfigError(f"bad architecture {arch!r}: {e}") from e
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"bad architecture {arch!r}")
    return widths


def _load_split(args, precision):
    if args.dataset == "blobs":
        ds = synth_blobs(args.blob_classes, args.blob_features,
                         args.blob_per_class, args.blob_separation,
                         args.seed, precision=precision)
        from .data import split as split_ds

        train, test = split_ds(ds, 0.8, args.seed)
    else:
        train = load_named(args.dataset, args.data_dir, precision, train=True)
        test = load_named(args.dataset, args.data_dir, precision, train=False)
    if args.standardize:
        train, test = standardize(train), standardize(test)
    if args.limit_train:
        train = train.take(args.limit_train)
    if args.limit_test:
        test = test.take(args.limit_test)
    return train, test


def _build_model(args, train_ds, precision):
    heads = "all" if args.algo in ("mf", "ff") else "last"
    if args.algo == "ff":
        heads = "none"
    if args.conv_preset:
        if args.dataset == "mnist" or args.dataset == "fashion":
            raise ConfigError("the conv preset expects 32x32x3 input; "
                              "use --dataset cifar10")
        return init_conv((3, 32, 32), CONV_PRESET_CHANNELS, train_ds.m,
                         args.seed, precision=precision, heads=heads)
    widths = _parse_arch(args.arch)
    return init_mlp(train_ds.features, widths, train_ds.m, args.seed,
                    bias=args.bias, precision=precision, heads=heads)


def _train_cfg(args) -> TrainConfig:
    try:
        return TrainConfig(algorithm=args.algo, lr=args.lr,
                           batch_size=args.batch_size, epochs=args.epochs,
                           seed=args.seed, theta=args.theta, bias=args.bias,
                           optimizer=args.optimizer,
                           precision=args.precision)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_train(args) -> int:
    if args.theta != 2.0 and args.algo != "ff":
        print(f"warning: --theta only applies to --algo ff; ignored for "
              f"{args.algo}", file=sys.stderr)
    precision = np.float64 if args.precision == "double" else np.float32
    train_ds, test_ds = _load_split(args, precision)
    model = _build_model(args, train_ds, precision)
    cfg = _train_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(args, os.path.join(args.out, "config.resolved"))
    report = train_epochs(model, train_ds, cfg, test_ds=test_ds,
                          eval_every=args.eval_every,
                          pipelined=args.pipeline,
                          stage_capacity=args.stage_capacity)
    report.to_csv(os.path.join(args.out, "report.csv"))
    save_model(os.path.join(args.out, "model.ckpt"), model)
    if cfg.algorithm in ("mf",) and model.heads == "all":
        acc_ff = predict.accuracy(predict.mf_predict_ff(model, test_ds.X),
                                  test_ds.y)
        acc_bp = predict.accuracy(predict.mf_predict_bp(model, test_ds.X),
                                  test_ds.y)
        print(f"final test accuracy: ff-mode {acc_ff:.4f}  bp-mode {acc_bp:.4f}")
    elif cfg.algorithm == "ff":
        acc = predict.accuracy(
            predict.ff_predict_multipass(model, test_ds.X, test_ds.m),
            test_ds.y)
        print(f"final test accuracy (multi-pass): {acc:.4f}")
    else:
        acc = predict.accuracy(predict.mf_predict_bp(model, test_ds.X),
                               test_ds.y)
        print(f"final test accuracy: {acc:.4f}")
    print(f"wrote {args.out}/report.csv and {args.out}/model.ckpt")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    _, test_ds = _load_split(args, model.precision)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(args, os.path.join(args.out, "config.resolved"))
    results = {}
    if args.pred in ("bp", "both"):
        results["bp"] = predict.accuracy(
            predict.mf_predict_bp(model, test_ds.X), test_ds.y)
    if args.pred in ("ff", "both"):
        if model.heads != "all":
            raise ConfigError("this checkpoint has no per-layer projections; "
                              "use --pred bp")
        results["ff"] = predict.accuracy(
            predict.mf_predict_ff(model, test_ds.X), test_ds.y)
    if model.heads == "all" and model.kind == "mlp":
        predict.eval_csv(os.path.join(args.out, "eval.csv"), model,
                         test_ds.X, test_ds.y)
    for mode, acc in results.items():
        print(f"top1 {mode}-mode: {acc:.4f}")
    return 0


def cmd_profile(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    write_resolved(args, os.path.join(args.out, "config.resolved"))
    precision = np.float32
    cfg = TrainConfig(algorithm="mf", lr=args.lr, batch_size=args.batch_size,
                      epochs=1, seed=args.seed, optimizer=args.optimizer)
    if args.params:
        widths = _parse_arch(args.arch)
        m = args.classes
        mf = init_mlp(args.input_dim, widths, m, args.seed, heads="all")
        counts = {
            "mf_ffpred": count_parameters(mf, "ff"),
            "mf_bppred": count_parameters(mf, "bp"),
        }
        bp = init_mlp(args.input_dim, widths, m, args.seed, heads="last")
        counts["bp"] = count_parameters(bp, "bp")
        ff = init_mlp(args.input_dim, widths, m, args.seed, heads="none")
        counts["ff"] = count_parameters(ff, "ff")
        for k, v in counts.items():
            print(f"params {k}: {v:,}")
        profiling.write_rows_csv(os.path.join(args.out, "params.csv"),
                                 ["mode", "parameters"], counts.items())
        return 0
    train_ds, _ = _load_split(args, precision)
    if args.mem_vs_depth:
        depths = [int(d) for d in args.mem_vs_depth.split(",")]
        batch = args.batch_size or train_ds.size
        run_cfg = replace(cfg, batch_size=batch)
        rows = []
        for algo in ("bp", "mf"):
            profiles, slope = profiling.memory_vs_depth(
                algo, depths, args.width, train_ds, run_cfg)
            for p in profiles:
                rows.append((algo, p.depth, p.peak_bytes))
            print(f"{algo} peak-vs-depth slope: "
                  f"{slope / 1e6:.2f} MB/layer" if slope else
                  f"{algo}: slope undefined (single depth)")
        profiling.write_rows_csv(os.path.join(args.out, "mem_vs_depth.csv"),
                                 ["algorithm", "depth", "peak_bytes"], rows)
        profiling.write_columns(
            os.path.join(args.out, "mem_vs_depth.dat"),
            ["depth", "bp_peak", "mf_peak"],
            [depths,
             [r[2] for r in rows if r[0] == "bp"],
             [r[2] for r in rows if r[0] == "mf"]])
    if args.mem_trace:
        for algo in ("bp", "mf"):
            trace, summary = profiling.memory_trace(
                algo, train_ds, cfg, args.width, args.depth)
            profiling.write_columns(
                os.path.join(args.out, f"mem_trace_{algo}.dat"),
                ["step", "live_bytes"],
                [[s for s, _ in trace], [v for _, v in trace]])
            print(f"{algo} peak/valley: {summary['ptv']:.2f} "
                  f"(peak {summary['peak']:,}, valley {summary['valley']:,})")
    if args.time_ratio:
        widths = _parse_arch(args.arch)
        res = profiling.epoch_time_ratio(train_ds, cfg, widths,
                                         epochs=args.epochs,
                                         stage_capacity=args.stage_capacity)
        for k, v in res.items():
            print(f"{k}: {v:.3f}")
        profiling.write_rows_csv(os.path.join(args.out, "time_ratio.csv"),
                                 ["metric", "value"], res.items())
    return 0


def cmd_report(args) -> int:
    model = load_model(args.checkpoint)
    if model.heads != "all":
        raise ConfigError("per-layer reporting needs per-layer projections")
    test_ds = load_named(args.dataset, args.data_dir, model.precision,
                         train=False)
    if args.limit_test:
        test_ds = test_ds.take(args.limit_test)
    os.makedirs(args.out, exist_ok=True)
    rows = profiling.per_layer_report(model, test_ds)
    profiling.write_rows_csv(os.path.join(args.out, "per_layer.csv"),
                             ["layer", "test_accuracy"], rows)
    for name, acc in rows:
        print(f"{name}: {acc:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="monoforward",
        description="layerwise local-learning trainers and baselines")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--data-dir", default=os.environ.get("DATA_DIR", "data"),
                       help="dataset directory (env DATA_DIR)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--config", default=None,
                       help="key=value config file; flags override")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--limit-train", type=int, default=0,
                       help="cap training samples (0 = all)")
        p.add_argument("--limit-test", type=int, default=0)

    def data_opts(p):
        p.add_argument("--dataset", default="mnist",
                       choices=["mnist", "fashion", "cifar10", "blobs"])
        p.add_argument("--standardize", action="store_true",
                       help="per-feature standardization after 1/255 scaling")
        p.add_argument("--blob-classes", type=int, default=4)
        p.add_argument("--blob-features", type=int, default=32)
        p.add_argument("--blob-per-class", type=int, default=200)
        p.add_argument("--blob-separation", type=float, default=6.0)

    def train_opts(p):
        p.add_argument("--arch", default="1000,1000",
                       help="comma-separated hidden widths")
        p.add_argument("--conv-preset", action="store_true",
                       help="64-128-256-512 conv stack for 32x32x3 input")
        p.add_argument("--epochs", type=int, default=1)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
        p.add_argument("--theta", type=float, default=2.0,
                       help="goodness threshold (ff only)")
        p.add_argument("--bias", action="store_true")
        p.add_argument("--precision", default="single",
                       choices=["single", "double"])

    t = sub.add_parser("train", help="train a model and write report + checkpoint")
    common(t)
    data_opts(t)
    train_opts(t)
    t.add_argument("--algo", required=True, choices=list(ALGORITHMS))
    t.add_argument("--eval-every", type=int, default=1,
                   help="epochs between test evaluations (0 = final only)")
    t.add_argument("--pipeline", action="store_true",
                   help="run layerwise training as concurrent stages")
    t.add_argument("--stage-capacity", type=int, default=2)
    t.set_defaults(func=cmd_train, default_out="runs/train")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    data_opts(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pred", default="both", choices=["ff", "bp", "both"])
    e.set_defaults(func=cmd_eval, default_out="runs/eval")

    p = sub.add_parser("profile", help="memory / timing / parameter profiling")
    common(p)
    data_opts(p)
    p.add_argument("--mem-vs-depth", default=None,
                   help="comma-separated depths, e.g. 2,4,6,8")
    p.add_argument("--mem-trace", action="store_true")
    p.add_argument("--time-ratio", action="store_true")
    p.add_argument("--params", action="store_true",
                   help="print parameter counts for --arch")
    p.add_argument("--arch", default="1000,1000")
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=0,
                   help="0 = full batch for memory runs")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--stage-capacity", type=int, default=2)
    p.add_argument("--input-dim", type=int, default=784)
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(func=cmd_profile, default_out="runs/profile")

    r = sub.add_parser("report", help="per-layer accuracy table")
    common(r)
    data_opts(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--per-layer", action="store_true", default=True)
    r.set_defaults(func=cmd_report, default_out="runs/report")

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.out is None:
        args.out = args.default_out
    try:
        # per-subparser defaults drive the config-file merge: a flag left at
        # its default may be overridden by the file, an explicit flag wins
        sub_defaults = {a.dest: a.default
                        for a in ap._subparsers._group_actions[0]
                        .choices[args.subcommand]._actions
                        if a.dest != "help"}
        apply_config_file(args, sub_defaults)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
