"""``stepslab`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(numeric divergence, bad checkpoint, degenerate input, I/O).  Every command
that writes files puts them under one output directory (``--out``, else
``$STEPSLAB_OUT/<command>``, else ``./stepslab_out/<command>``) together with
a ``manifest.json`` recording the command line, config hash, seed and the
list of artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import build_config, config_dict, config_hash, emit_config, load_config
from .costing import allocate_depths, head_counts, model_cost, width_schedule
from .errors import CheckpointError, ConfigError, DegenerateInputError, PreconditionError, TrainingDivergence
from .presets import PRESETS, LayoutPreset, Preset, get_preset
from .steps import StepsConfig
from .tensor import ContractError, DimensionError, NumericError, PartitionError

log = logging.getLogger("stepslab")

OUT_ENV = "STEPSLAB_OUT"
RUNTIME_ERRORS = (NumericError, TrainingDivergence, CheckpointError, PreconditionError, DegenerateInputError,
                  DimensionError, PartitionError, ContractError, OSError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def out_dir(args) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUT_ENV, "stepslab_out")) / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, argv, cfg=None, seed=None, artifacts=()) -> Path:
    manifest = {
        "command": ["stepslab", *argv],
        "version": __version__,
        "config_hash": None if cfg is None else config_hash(cfg),
        "config": None if cfg is None else config_dict(cfg),
        "seed": seed,
        "artifacts": sorted(str(Path(a).relative_to(path)) if Path(a).is_relative_to(path) else str(a)
                            for a in artifacts),
    }
    target = path / "manifest.json"
    target.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return target


def _architecture(args):
    """(config, tokens, stem, head, extra, name) from --preset or --config."""
    if bool(args.preset) == bool(args.config):
        raise ConfigError("give exactly one of --preset or --config")
    if args.preset:
        return get_preset(args.preset)
    cfg = load_config(args.config, args.set)
    model = cfg if isinstance(cfg, StepsConfig) else cfg.model
    return Preset(Path(args.config).stem, model, args.tokens or 197, None, None, args.extra_layers)


# --------------------------------------------------------------------------
# subcommands


def cmd_analyze(args, argv) -> int:
    if args.config and not args.preset:
        cfg = load_config(args.config, args.set)
        if not isinstance(cfg, StepsConfig) and args.tokens is None:
            from .harness.model import task_cost
            from .harness.tasks import make_task
            report = task_cost(cfg.model, make_task(cfg.task, cfg.seed).describe())
            report.name = Path(args.config).stem
        else:
            model = cfg if isinstance(cfg, StepsConfig) else cfg.model
            report = model_cost(model, args.tokens or 197, extra_layers=args.extra_layers,
                                name=Path(args.config).stem)
    else:
        report = _architecture(args).cost()
    if args.table:
        print(report.to_table())
    else:
        print(report.to_json(indent=2))
    if args.out:
        path = out_dir(args)
        (path / "cost.json").write_text(report.to_json(indent=2) + "\n", encoding="utf-8")
        (path / "cost.txt").write_text(report.to_table() + "\n", encoding="utf-8")
        write_manifest(path, argv, artifacts=[path / "cost.json", path / "cost.txt"])
    return 0


def cmd_genconfig(args, argv) -> int:
    widths = width_schedule(args.width, args.steps)
    depths = allocate_depths(args.base_depth, args.steps)
    heads = head_counts(widths, args.head_dim) if args.kind == "transformer" else ()
    model = StepsConfig.from_step_widths(widths, depths, args.kind, heads)
    if args.task:
        cfg = build_config({"task": args.task, "model": model.to_dict()})
    else:
        cfg = model
    text = emit_config(cfg, widths="step")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args, argv) -> int:
    from .harness.train import TrainConfig, train
    from .plotting import plot_loss

    cfg = load_config(args.config, args.set)
    if not isinstance(cfg, TrainConfig):
        raise ConfigError(f"{args.config}: a train config needs 'task' and 'model' sections")
    path = out_dir(args)
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "out_dir": str(path)})
    record, _ = train(cfg)
    artifacts = [path / "run.csv", Path(record.checkpoint), Path(record.checkpoint).with_suffix(".json")]
    emit_config(cfg, path / "config.yaml")
    artifacts += [path / "config.yaml", plot_loss(record, path / "loss.png", f"{cfg.task}")]
    write_manifest(path, argv, cfg, cfg.seed, artifacts)
    print(f"final {('perplexity' if cfg.task == 'charlm' else 'accuracy')}: {record.final_metric}")
    print(f"wrote {path}")
    return 0


def cmd_probe(args, argv) -> int:
    from .plotting import plot_gamma
    from .probe import first_quarter_mean, probe_at_init

    names = args.preset or []
    models = {}
    for name in names:
        p = get_preset(name)
        if isinstance(p, LayoutPreset):
            raise ConfigError(f"preset {name!r} is layers-only and cannot be instantiated")
        models[name] = p.config
    if args.config:
        cfg = load_config(args.config, args.set)
        models[Path(args.config).stem] = cfg if isinstance(cfg, StepsConfig) else cfg.model
    if not models:
        raise ConfigError("probe needs at least one --preset or --config")
    path = out_dir(args)
    artifacts = []
    traces = {}
    for label, model in models.items():
        trace = probe_at_init(model, args.seed, args.batch, args.tokens, args.std)
        traces[label] = trace
        csv_path = path / f"gamma_{label}.csv"
        trace.to_csv(csv_path)
        artifacts.append(csv_path)
        print(f"{label}: blocks {len(trace.records)}  first-quarter mean gamma {first_quarter_mean(trace):.4f}  "
              f"final gamma {trace.gammas[-1]:.4f}")
    artifacts += plot_gamma(traces, path / "gamma.png")
    write_manifest(path, argv, None, args.seed, artifacts)
    return 0


def cmd_ablate(args, argv) -> int:
    from .harness.ablation import ablation_sweep
    from .harness.train import TrainConfig
    from .plotting import plot_ablation

    base = None
    if args.config:
        base = load_config(args.config, args.set)
    elif args.preset:
        p = get_preset(args.preset)
        if isinstance(p, LayoutPreset):
            raise ConfigError(f"preset {args.preset!r} is layers-only")
        base = p.config
    if args.train and not isinstance(base, TrainConfig):
        raise ConfigError("--train needs a train config (--config with task and model)")
    report = ablation_sweep(args.kind, base=base, checkpoint=args.checkpoint, task=args.task, seed=args.seed,
                            train_runs=args.train, n_tokens=args.tokens)
    path = out_dir(args)
    csv_path = path / f"{args.kind}.csv"
    text = report.to_csv(csv_path)
    sys.stdout.write(text)
    artifacts = [csv_path, plot_ablation(report, path / f"{args.kind}.png")]
    seed = args.seed if args.seed is not None else getattr(base, "seed", None)
    write_manifest(path, argv, base, seed, artifacts)
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import run_suite

    report = run_suite(args.seed)
    print(report.to_table())
    print(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:g}) in {report.seconds:.1f}s")
    if args.out:
        path = out_dir(args)
        csv_path = path / "gradcheck.csv"
        csv_path.write_text("check,relative_error\n" + "".join(f"{k},{v!r}\n" for k, v in report.errors.items()),
                            encoding="utf-8")
        write_manifest(path, argv, None, args.seed, [csv_path])
    if not report.passed:
        print(f"gradient check failed: {sorted(report.failures())}", file=sys.stderr)
        return 2
    return 0


# --------------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="stepslab", description="Step-by-step network toolkit: costing, probing, training.")
    parser.add_argument("--version", action="version", version=f"stepslab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML/JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config field, e.g. optimizer.lr=0.001 (repeatable)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")

    p = sub.add_parser("analyze", help="analytic FLOPs / params / layers of a preset or config")
    p.add_argument("--preset", choices=sorted(PRESETS), metavar="NAME", help="bundled preset name")
    p.add_argument("--tokens", type=int, help="tokens per sample for --config (default 197)")
    p.add_argument("--extra-layers", type=int, default=0, help="layers outside the blocks, for --config")
    p.add_argument("--table", action="store_true", help="print a table instead of JSON")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("genconfig", help="derive a step-by-step config from a plain width/depth")
    p.add_argument("--base-depth", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--kind", choices=["transformer", "mlp"], default="transformer")
    p.add_argument("--head-dim", type=int, default=64, help="target channels per attention head")
    p.add_argument("--task", help="emit a full train config for this task")
    p.add_argument("--out", help="write the config here instead of stdout")
    p.set_defaults(func=cmd_genconfig)

    p = sub.add_parser("train", help="train a desk-scale model from a config")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="shortcut-ratio trace at initialization")
    p.add_argument("--preset", action="append", metavar="NAME", help="preset to probe (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--std", type=float, default=0.02, help="std of the Gaussian probe input")
    common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="masking / block-dropping / step-count / allocation sweeps")
    p.add_argument("--kind", required=True, choices=["mask_table6", "drop_table7", "steps_table4", "alloc_table5"])
    p.add_argument("--checkpoint", help="trained run directory or model.ssnc (mask/drop)")
    p.add_argument("--preset", help="base architecture preset (steps/alloc)")
    p.add_argument("--task", help="evaluation task (default: the checkpoint's task)")
    p.add_argument("--seed", type=int, help="evaluation data seed (default: the checkpoint's seed)")
    p.add_argument("--tokens", type=int, help="tokens per sample for cost columns")
    p.add_argument("--train", action="store_true", help="also train every variant (steps/alloc)")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a transformer block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write gradcheck.csv here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
