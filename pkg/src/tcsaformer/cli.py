"""Command-line front end: ``tcsa {infer,trace,flops,overfit,metrics,ablate,selftest}``."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .compression import canonical_mode
from .config import ConfigError, TrainConfig, load_config, default_config, toy_config
from .formats import FormatError, load_model, save_model, write_trace
from .imageio import ImageReadError, read_image, read_mask, resize_nearest, write_pgm
from .tensor import NonFiniteError

MODE_CHOICES = ("none", "prune", "merge", "prune_merge", "prune_only", "merge_only", "prune_and_merge")


@dataclass
class RunConfig:
    subcommand: str
    input: Optional[Path] = None
    output: Optional[Path] = None
    config_path: Optional[Path] = None
    seed: Optional[int] = None
    mode: Optional[str] = None
    trace: bool = False


class UsageError(Exception):
    pass


def _check_paths(run: RunConfig, inputs=()) -> None:
    for p in [run.config_path, *inputs]:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"no such file: {p}")
    if run.output is not None and not run.output.resolve().parent.is_dir():
        raise UsageError(f"output directory does not exist: {run.output.parent}")


def _model_config(run: RunConfig, base):
    train = TrainConfig()
    cfg = base
    if run.config_path is not None:
        cfg, train = load_config(run.config_path, base)
    if run.seed is not None:
        cfg = dataclasses.replace(cfg, seed=run.seed)
    if run.mode is not None:
        cfg = cfg.with_mode(canonical_mode(run.mode))
    return cfg, train


def _build_model(cfg, weights):
    from .network import init_model

    return load_model(cfg, weights) if weights else init_model(cfg)


def cmd_infer(run: RunConfig, args) -> int:
    from .network import forward

    _check_paths(run, [run.input, args.weights])
    if run.output is None:
        raise UsageError("infer needs --out")
    cfg, _ = _model_config(run, default_config())
    img = read_image(run.input)
    img = resize_nearest(img, cfg.height, cfg.width)[None]
    model = _build_model(cfg, args.weights)
    out = forward(model, img, trace=run.trace)
    logits = out.logits.data[0]
    write_pgm(run.output, logits.argmax(axis=-1))
    if args.probs:
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs = z / z.sum(axis=-1, keepdims=True)
        for c in range(cfg.num_classes):
            write_pgm(run.output.with_suffix(f".class{c}.pgm"), np.round(probs[..., c] * 255))
    if run.trace:
        write_trace(out.records, run.output.with_suffix(".trace"))
    return 0


def cmd_trace(run: RunConfig, args) -> int:
    from .network import forward

    _check_paths(run, [run.input, args.weights])
    if run.output is None:
        raise UsageError("trace needs --out")
    cfg, _ = _model_config(run, default_config())
    img = resize_nearest(read_image(run.input), cfg.height, cfg.width)[None]
    out = forward(_build_model(cfg, args.weights), img, trace=True)
    write_trace(out.records, run.output)
    return 0


def cmd_flops(run: RunConfig, args) -> int:
    from .flops import count_model

    _check_paths(run)
    cfg, _ = _model_config(run, default_config())
    report = count_model(cfg)
    sys.stdout.write(report.to_text())
    if run.output is not None:
        run.output.write_text(report.to_kv())
    return 0


def cmd_overfit(run: RunConfig, args) -> int:
    from .experiments import run_overfit

    _check_paths(run)
    cfg, train = _model_config(run, toy_config())
    if args.steps is not None:
        train = dataclasses.replace(train, steps=args.steps)
    if args.lr is not None:
        train = dataclasses.replace(train, lr=args.lr)
    report = run_overfit(cfg, train, log=lambda i, v: print(f"step {i:4d}  loss {v:.6f}", flush=True))
    print(f"dsc {' '.join(f'{d:.4f}' for d in report.dsc)}")
    print(f"mean_dsc {report.mean_dsc:.4f}")
    print(f"miou {report.miou:.4f}")
    if run.output is not None:
        run.output.write_text(report.to_text())
    if args.save_weights:
        save_model(report.model, args.save_weights)
    return 0


def cmd_metrics(run: RunConfig, args) -> int:
    from .metrics import metrics

    _check_paths(run, [args.pred, args.gt])
    pred, gt = read_mask(args.pred), read_mask(args.gt)
    if pred.shape != gt.shape:
        raise UsageError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    k = args.num_classes or int(max(pred.max(), gt.max())) + 1
    m = metrics(pred, gt, k)
    text = "".join(f"class {c}  dsc {d:.6f}  iou {i:.6f}\n" for c, (d, i) in enumerate(zip(m["dsc"], m["iou"])))
    text += f"mean_dsc {m['mean_dsc']:.6f}\nmiou {m['miou']:.6f}\n"
    sys.stdout.write(text)
    if run.output is not None:
        run.output.write_text(text)
    return 0


def cmd_ablate(run: RunConfig, args) -> int:
    from .experiments import ablation_sweep, format_ablation

    _check_paths(run)
    cfg, _ = _model_config(dataclasses.replace(run, mode=None), toy_config())
    text = format_ablation(ablation_sweep(cfg))
    sys.stdout.write(text)
    if run.output is not None:
        run.output.write_text(text)
    return 0


def cmd_selftest(run: RunConfig, args) -> int:
    from .selftest import run_selftest

    results = run_selftest(run.seed or 0)
    for name, ok in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return 0 if all(ok for _, ok in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcsa", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, image=False):
        if image:
            p.add_argument("image", type=Path)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--mode", choices=MODE_CHOICES, help="override compression mode of every stage")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        return p

    p = common(sub.add_parser("infer", help="segment an image, write an 8-bit PGM class mask"), image=True)
    p.add_argument("--trace", action="store_true", help="also write <out>.trace")
    p.add_argument("--weights", type=Path, help="TCSA parameter container (default: seeded init)")
    p.add_argument("--probs", action="store_true", help="also write <out>.class<c>.pgm probability maps")
    p = common(sub.add_parser("trace", help="write the per-layer compression/attention trace"), image=True)
    p.add_argument("--weights", type=Path)
    common(sub.add_parser("flops", help="analytic FLOPs report"))
    p = common(sub.add_parser("overfit", help="overfit one synthetic image"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--save-weights", type=Path)
    p = common(sub.add_parser("metrics", help="DSC and IoU between two class masks"))
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--num-classes", type=int)
    common(sub.add_parser("ablate", help="compression-mode sweep at toy scale"))
    p = sub.add_parser("selftest", help="run fast invariant checks")
    p.add_argument("--seed", type=int)
    return parser


COMMANDS = {"infer": cmd_infer, "trace": cmd_trace, "flops": cmd_flops, "overfit": cmd_overfit,
            "metrics": cmd_metrics, "ablate": cmd_ablate, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = RunConfig(args.subcommand, getattr(args, "image", None), getattr(args, "out", None),
                    getattr(args, "config", None), getattr(args, "seed", None), getattr(args, "mode", None),
                    getattr(args, "trace", False))
    threads = os.environ.get("TCSA_THREADS")
    try:
        # non-finite values are reported by NonFiniteError with the layer name, not as numpy warnings
        with np.errstate(all="ignore"):
            if threads:
                from threadpoolctl import threadpool_limits

                with threadpool_limits(limits=int(threads)):
                    return COMMANDS[run.subcommand](run, args)
            return COMMANDS[run.subcommand](run, args)
    except NonFiniteError as e:
        print(f"tcsa: error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, ImageReadError, FormatError, OSError) as e:
        print(f"tcsa: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
