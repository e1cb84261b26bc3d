"""Command-line interface: train, eval, madds, analyze, sweep.

Every subcommand is deterministic given its flags plus ``--seed``; outputs are
written atomically (temp file, then rename). Charts are emitted as SVG; CSV is
the machine-readable interface.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

import numpy as np

from .analysis import (
    class_specificity_by_depth,
    collect_trace,
    exemplar_indices,
    per_class_mean,
    routing_histogram,
    top_classes_per_expert,
    trace_to_csv,
    save_trace_npz,
)
from .charts import histogram_svg, line_chart_svg
from .checkpoint import load_checkpoint, save_checkpoint
from .costmodel import model_madds
from .data import load_dataset
from .errors import ConfigError
from .routers import RouterConfig
from .training import TrainConfig, evaluate, history_to_csv, load_config_file, train
from .zoo import mobilenet_v1_spec, toy_cnn_spec, build_model

HISTOGRAM_BINS = 20


def atomic_write(path: str, content) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    mode = "wb" if isinstance(content, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(content)
    os.replace(tmp, path)


def _parse_begin_layer(value: str):
    if value in ("none", "None", ""):
        return None
    return int(value)


def _model_spec_from_args(args, num_classes: int, in_channels: int, config: dict):
    def pick(name, default):
        cli = getattr(args, name, None)
        if cli is not None:
            return cli
        return config.get(name, default)

    router = RouterConfig(
        variant=pick("router", "per_block"),
        anchor_layer=int(pick("router_anchor", pick("begin_layer", 1) or 1)),
        hidden_size=pick("router_hidden", "medium"),
    )
    arch = pick("arch", "toy")
    begin = pick("begin_layer", 1)
    if isinstance(begin, str):
        begin = _parse_begin_layer(begin)
    cc_fc = pick("cc_fc", True)
    if isinstance(cc_fc, str):
        cc_fc = cc_fc.lower() in ("true", "1", "yes")
    experts = int(pick("experts", 4))
    if arch == "toy":
        return toy_cnn_spec(
            channels=int(pick("channels", 8)),
            blocks=int(pick("blocks", 2)),
            num_experts=experts,
            condconv_begin_layer=begin,
            use_cc_classifier=cc_fc,
            router=router,
            num_classes=num_classes,
            in_channels=in_channels,
        )
    if arch == "mobilenet_v1":
        return mobilenet_v1_spec(
            width_multiplier=float(pick("width", 1.0)),
            num_experts=experts,
            condconv_begin_layer=begin,
            use_cc_classifier=cc_fc,
            router=router,
            num_classes=num_classes,
        )
    raise ConfigError(f"unknown arch {arch!r}")


def _train_config(args, config: dict, seed: int) -> TrainConfig:
    def pick(name, default, cast):
        cli = getattr(args, name, None)
        if cli is not None:
            return cast(cli)
        if name in config:
            return cast(config[name])
        return default

    return TrainConfig(
        seed=seed,
        epochs=pick("epochs", 10, int),
        batch_size=pick("batch_size", 32, int),
        lr=pick("lr", 0.05, float),
        lr_schedule=pick("lr_schedule", "cosine", str),
        warmup_epochs=pick("warmup_epochs", 1.0, float),
        momentum=pick("momentum", 0.9, float),
        weight_decay=pick("weight_decay", 1e-4, float),
        dropout_keep=pick("dropout_keep", 1.0, float),
        mixup_alpha=pick("mixup_alpha", 0.0, float),
        expert_dropout_rate=pick("expert_dropout_rate", 0.0, float),
        val_fraction=pick("val_fraction", 0.2, float),
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=["toy", "mobilenet_v1"], default=None)
    p.add_argument("--channels", type=int, default=None, help="toy base width")
    p.add_argument("--blocks", type=int, default=None, help="toy separable blocks")
    p.add_argument("--experts", type=int, default=None, help="experts per layer")
    p.add_argument("--begin-layer", dest="begin_layer", default=None,
                   help="first conditional block, or 'none'")
    p.add_argument("--cc-fc", dest="cc_fc", action=argparse.BooleanOptionalAction,
                   default=None, help="conditional classifier layer")
    p.add_argument("--width", type=float, default=None, help="width multiplier")
    p.add_argument("--router", default=None,
                   help="per_block|single|partially_shared|hidden|hierarchical|softmax")
    p.add_argument("--router-anchor", dest="router_anchor", type=int, default=None)
    p.add_argument("--router-hidden", dest="router_hidden",
                   choices=["small", "medium", "large"], default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", dest="lr_schedule",
                   choices=["constant", "cosine"], default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--dropout-keep", dest="dropout_keep", type=float, default=None)
    p.add_argument("--mixup-alpha", dest="mixup_alpha", type=float, default=None)
    p.add_argument("--expert-dropout-rate", dest="expert_dropout_rate",
                   type=float, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = load_config_file(args.config) if args.config else {}
    ds = load_dataset(args.data)
    spec = _model_spec_from_args(args, ds.num_classes, ds.images.shape[3], config)
    tc = _train_config(args, config, args.seed)
    model = build_model(spec, seed=args.seed)
    model, history = train(model, ds, tc)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "checkpoint.ckpt"))
    atomic_write(os.path.join(args.out, "metrics.csv"), history_to_csv(history))
    final = [r for r in history if r.split == "val"][-1]
    print(f"trained {spec.arch} for {tc.epochs} epochs; "
          f"final val loss {final.loss:.4f}, top1 {final.top1:.4f}")
    print(f"wrote {os.path.join(args.out, 'checkpoint.ckpt')} and metrics.csv")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.num_classes != model.spec.num_classes:
        raise ConfigError(
            f"dataset has {ds.num_classes} classes, checkpoint expects "
            f"{model.spec.num_classes}"
        )
    loss, top1 = evaluate(model, ds, args.batch_size)
    print(f"top1 {top1:.6f}")
    if args.out:
        atomic_write(args.out, f"split,loss,top1\n{ds.split},{loss:.6f},{top1:.6f}\n")
    return 0


def cmd_madds(args) -> int:
    begin = _parse_begin_layer(args.begin_layer) if args.begin_layer is not None else None
    router = RouterConfig(
        variant=args.router or "per_block",
        anchor_layer=args.router_anchor if args.router_anchor is not None else (begin or 1),
        hidden_size=args.router_hidden or "medium",
    )
    experts = args.experts if args.experts is not None else 1
    static = begin is None and not (args.cc_fc or False)
    if args.arch == "mobilenet_v1" or args.arch is None:
        spec = mobilenet_v1_spec(
            width_multiplier=args.width if args.width is not None else 1.0,
            num_experts=1 if static else experts,
            condconv_begin_layer=begin,
            use_cc_classifier=bool(args.cc_fc),
            router=router,
            num_classes=args.num_classes,
        )
        in_channels = 3
    else:
        spec = toy_cnn_spec(
            channels=args.channels if args.channels is not None else 8,
            blocks=args.blocks if args.blocks is not None else 2,
            num_experts=1 if static else experts,
            condconv_begin_layer=begin,
            use_cc_classifier=bool(args.cc_fc),
            router=router,
            num_classes=args.num_classes,
            in_channels=1,
        )
        in_channels = 1
    total, rows = model_madds(spec, args.resolution, in_channels=in_channels)

    if args.format == "csv":
        lines = ["layer,kind,out_h,out_w,madds,conv,routing,combine,params"]
        for r in rows:
            b = r.cost.breakdown
            lines.append(
                f"{r.name},{r.kind},{r.out_h},{r.out_w},{r.cost.madds},"
                f"{b['conv']},{b['routing']},{b['combine']},{r.cost.params}"
            )
        b = total.breakdown
        lines.append(
            f"TOTAL,,,,{total.madds},{b['conv']},{b['routing']},{b['combine']},"
            f"{total.params}"
        )
        output = "\n".join(lines) + "\n"
    else:
        name_w = max(len(r.name) for r in rows) + 2
        lines = [
            f"{'layer':<{name_w}}{'out':>10}{'madds':>14}{'routing':>10}"
            f"{'combine':>12}{'params':>12}"
        ]
        for r in rows:
            out_sz = f"{r.out_h}x{r.out_w}" if r.kind in ("stem", "dw", "pw") else "-"
            lines.append(
                f"{r.name:<{name_w}}{out_sz:>10}{r.cost.madds:>14,}"
                f"{r.cost.breakdown['routing']:>10,}"
                f"{r.cost.breakdown['combine']:>12,}{r.cost.params:>12,}"
            )
        lines.append(
            f"{'TOTAL':<{name_w}}{'':>10}{total.madds:>14,}"
            f"{total.breakdown['routing']:>10,}{total.breakdown['combine']:>12,}"
            f"{total.params:>12,}"
        )
        lines.append(f"total multiply-adds: {total.madds / 1e6:.1f}M")
        output = "\n".join(lines) + "\n"

    if args.out:
        atomic_write(args.out, output)
    print(output, end="")
    return 0


def cmd_analyze(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.num_classes != model.spec.num_classes:
        raise ConfigError(
            f"dataset has {ds.num_classes} classes, checkpoint expects "
            f"{model.spec.num_classes}"
        )
    trace = collect_trace(model, ds, args.batch_size)
    if not trace.layers:
        raise ConfigError("model has no conditional layers to trace")
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    atomic_write(os.path.join(out, "trace.csv"), trace_to_csv(trace))
    save_trace_npz(trace, os.path.join(out, "trace.npz"))

    for tl in trace.layers:
        means, stds = per_class_mean(trace, tl.layer_index)
        n = means.shape[1]
        lines = [
            "class,"
            + ",".join(f"mean_{e}" for e in range(n))
            + ","
            + ",".join(f"std_{e}" for e in range(n))
        ]
        for c in range(trace.num_classes):
            lines.append(
                f"{c},"
                + ",".join(f"{v:.6f}" for v in means[c])
                + ","
                + ",".join(f"{v:.6f}" for v in stds[c])
            )
        atomic_write(
            os.path.join(out, f"per_class_mean_layer{tl.layer_index}.csv"),
            "\n".join(lines) + "\n",
        )

        counts = routing_histogram(trace, tl.layer_index, HISTOGRAM_BINS)
        edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
        hist_lines = ["bin_lo,bin_hi,count"] + [
            f"{edges[i]:.4f},{edges[i + 1]:.4f},{int(counts[i])}"
            for i in range(HISTOGRAM_BINS)
        ]
        atomic_write(
            os.path.join(out, f"histogram_layer{tl.layer_index}.csv"),
            "\n".join(hist_lines) + "\n",
        )
        atomic_write(
            os.path.join(out, f"histogram_layer{tl.layer_index}.svg"),
            histogram_svg(
                counts, title=f"routing weights, layer {tl.layer_index} ({tl.unit})"
            ),
        )

    series = class_specificity_by_depth(trace)
    spec_lines = ["depth,layer_index,unit,between_class_variance"]
    for (depth, value), tl in zip(series, trace.layers):
        spec_lines.append(f"{depth},{tl.layer_index},{tl.unit},{value:.8f}")
    atomic_write(os.path.join(out, "specificity.csv"), "\n".join(spec_lines) + "\n")
    atomic_write(
        os.path.join(out, "specificity.svg"),
        line_chart_svg(
            [d for d, _ in series], [v for _, v in series],
            title="routing class-specificity by depth",
        ),
    )

    final = trace.layers[-1]
    means, _ = per_class_mean(trace, final.layer_index)
    k = min(args.top_k, trace.num_classes)
    top_lines = ["layer,expert,rank,class,mean_weight,exemplar_index"]
    for e in range(means.shape[1]):
        ranked = top_classes_per_expert(means, e, k)
        exemplars = exemplar_indices(trace, final.layer_index, e)
        for rank, c in enumerate(ranked):
            top_lines.append(
                f"{final.layer_index},{e},{rank},{c},{means[c, e]:.6f},{exemplars[c]}"
            )
    atomic_write(os.path.join(out, "top_classes.csv"), "\n".join(top_lines) + "\n")
    print(f"analyzed {len(trace)} examples across {len(trace.layers)} conditional "
          f"layers; outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config_file(args.config) if args.config else {}
    experts_list = [int(v) for v in args.experts.split(",")]
    ds = load_dataset(args.data)
    size = ds.images.shape[1]
    rows = []
    for n in experts_list:
        args_n = argparse.Namespace(**vars(args))
        args_n.experts = n
        spec = _model_spec_from_args(args_n, ds.num_classes, ds.images.shape[3], config)
        tc = _train_config(args, config, args.seed)
        model = build_model(spec, seed=args.seed)
        model, history = train(model, ds, tc)
        total, _ = model_madds(spec, size, in_channels=ds.images.shape[3])
        final = [r for r in history if r.split == "val"][-1]
        rows.append((n, model.param_count(), total.madds, final.top1))
        print(f"n={n}: params={rows[-1][1]}, madds={rows[-1][2]}, "
              f"val top1={final.top1:.4f}")
    lines = ["experts,params,madds,val_top1"]
    for n, params, madds, top1 in rows:
        lines.append(f"{n},{params},{madds},{top1:.6f}")
    output = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, output)
    print(output, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condconv",
        description="Conditionally parameterized convolutions: training, "
        "cost model, and routing analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True,
                   help="dataset path or synthetic:... spec")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="optional CSV path")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("madds", help="analytical multiply-add cost table")
    p.add_argument("--arch", choices=["mobilenet_v1", "toy"], default="mobilenet_v1")
    p.add_argument("--width", type=float, default=None)
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--begin-layer", dest="begin_layer", default=None)
    p.add_argument("--cc-fc", dest="cc_fc", action=argparse.BooleanOptionalAction,
                   default=False)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=1000)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--router", default=None)
    p.add_argument("--router-anchor", dest="router_anchor", type=int, default=None)
    p.add_argument("--router-hidden", dest="router_hidden", default=None)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_madds)

    p = sub.add_parser("analyze", help="routing-weight analyses of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.add_argument("--top-k", dest="top_k", type=int, default=10)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train across expert counts, emit a table")
    p.add_argument("--experts", required=True, help="comma list, e.g. 1,2,4,8")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--seed", type=int, required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # checkpoint/data format errors and friends
        from .errors import CheckpointError, DataFormatError, TrainingDiverged

        if isinstance(exc, (CheckpointError, DataFormatError, TrainingDiverged)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
