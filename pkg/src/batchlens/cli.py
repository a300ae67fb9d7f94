"""Command-line entry point: train / eval / circulate / rebalance / gradcheck.

Every run resolves its configuration (file + flag overrides), writes
`<run-name>.config.resolved` next to its outputs, and in deterministic mode
pins the BLAS thread pools to one thread so repeated runs are byte-identical.

Exit codes: 0 success, 1 bad configuration, 2 runtime failure,
3 gradient-check failure.
"""

import argparse
import os
import sys

from . import config as config_mod
from . import experiments as exp
from .data import BALANCED, RANDOM, SHUFFLED_BALANCED
from .models import get_model_spec, load_checkpoint, save_checkpoint
from .tensor import Rng

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="batchlens",
        description="Batch-normalization batch-structure experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--data-dir", help="dataset directory "
                                          "(or env BATCHLENS_DATA_DIR)")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path")
        p.add_argument("--mode", choices=["deterministic", "fast"],
                       help="deterministic pins BLAS to one thread")
        p.add_argument("--run-name", help="basename for output files")

    p_train = sub.add_parser("train", help="train a network under a batch plan")
    common(p_train)
    p_train.add_argument("--train-plan", choices=[RANDOM, BALANCED, SHUFFLED_BALANCED])
    p_train.add_argument("--eval", dest="eval_protocols",
                         help="comma list: standard,balanced,shuffled-balanced")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint under one protocol")
    common(p_eval)
    p_eval.add_argument("--protocol", choices=list(exp.PROTOCOLS), default="standard")

    p_circ = sub.add_parser("circulate", help="visitor circulation probe")
    common(p_circ)
    p_circ.add_argument("--visitors", help="kind:count, e.g. weak:1, strong:1, weak:2")

    p_reb = sub.add_parser("rebalance", help="iterative self-labelled rebalancing")
    common(p_reb)
    p_reb.add_argument("--iterations", type=int)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--instances", type=int, default=5)
    p_grad.add_argument("--mode", choices=["deterministic", "fast"],
                        default="deterministic")
    p_grad.add_argument("--corrupt", help="negative-control hook: deliberately "
                                          "corrupt the named check's gradients")
    return parser


def _overrides(args):
    mapping = {"seed": "seed", "data_dir": "data_dir", "out_dir": "out_dir",
               "checkpoint": "checkpoint", "mode": "mode", "run_name": "run_name",
               "train_plan": "train_plan", "eval_protocols": "eval_protocols",
               "iterations": "iterations", "visitors": "visitors"}
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def _resolve(args):
    pairs = {}
    base_dir = "."
    if args.config:
        pairs = config_mod.parse_config_file(args.config)
        base_dir = os.path.dirname(os.path.abspath(args.config))
    return config_mod.resolve_config(pairs, _overrides(args), base_dir=base_dir)


def _prepare(cfg):
    """Datasets plus output paths; errors here are configuration errors."""
    if cfg.dataset == "cifar10":
        if not cfg.data_dir:
            raise ValueError("cifar10 needs --data-dir or BATCHLENS_DATA_DIR")
        if not os.path.isdir(cfg.data_dir):
            raise ValueError(f"data directory does not exist: {cfg.data_dir}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_ds, test_ds = exp.load_datasets(cfg, cfg.data_dir)
    return train_ds, test_ds


def _out_path(cfg, suffix):
    return os.path.join(cfg.out_dir, f"{cfg.run_name}{suffix}")


def _write_resolved(cfg):
    config_mod.write_resolved(cfg, _out_path(cfg, ".config.resolved"))


def _default_checkpoint(cfg):
    return cfg.checkpoint or _out_path(cfg, ".ckpt")


def _load_network(cfg, train_ds):
    path = _default_checkpoint(cfg)
    if not os.path.exists(path):
        raise ValueError(f"checkpoint not found: {path}")
    spec = get_model_spec(cfg.model, classes=train_ds.class_count,
                          in_channels=train_ds.images.shape[1])
    return load_checkpoint(path, spec)


def _print_protocol_table(cfg, rows):
    train_label = ("balanced-batches" if cfg.train_plan != RANDOM else "random")
    final_epoch = max(r.epoch for r in rows)
    print(f"{'training':18s} {'inference':20s} {'error':>8s}")
    order = ["train", exp.PROTOCOL_STANDARD, exp.PROTOCOL_BALANCED, exp.PROTOCOL_SHUFFLED]
    for protocol in order:
        last = [r for r in rows if r.protocol == protocol and r.epoch == final_epoch]
        if not last:
            continue
        label = "train split" if protocol == "train" else protocol
        print(f"{train_label:18s} {label:20s} {last[-1].error_rate:8.4f}")


def cmd_train(cfg):
    train_ds, test_ds, _ = _setup(cfg)
    if set(cfg.protocols()) & {exp.PROTOCOL_BALANCED, exp.PROTOCOL_SHUFFLED}:
        print(exp.CONDITIONAL_WARNING)
    result = exp.train(cfg, train_ds, test_ds)
    exp.write_metrics_csv(result.rows, _out_path(cfg, ".metrics.csv"))
    save_checkpoint(result.network, _default_checkpoint(cfg))
    if result.diverged:
        print("training diverged: loss became non-finite", file=sys.stderr)
        return EXIT_RUNTIME
    _print_protocol_table(cfg, result.rows)
    return EXIT_OK


def cmd_eval(cfg, protocol):
    train_ds, test_ds, network = _setup(cfg, need_checkpoint=True)
    rng = Rng(cfg.seed).split(7)
    if protocol == exp.PROTOCOL_STANDARD:
        stats = exp.freeze_population(network, train_ds, cfg.stats,
                                      exp._train_batch_plan(cfg), Rng(cfg.seed).split(6))
        exp.apply_population(network, stats)
        res = exp.eval_standard(network, test_ds, cfg.eval_batch)
    else:
        print(exp.CONDITIONAL_WARNING)
        shuffled = protocol == exp.PROTOCOL_SHUFFLED
        res = exp.eval_balanced(network, test_ds, rng, shuffled=shuffled,
                                repeats=cfg.balanced_repeats if shuffled else 1)
    rows = [exp.MetricsRow(cfg.epochs, protocol, res.error, res.loss, 0.0)]
    exp.write_metrics_csv(rows, _out_path(cfg, ".metrics.csv"))
    print(f"{protocol} error rate: {res.error:.4f} (loss {res.loss:.4f})")
    return EXIT_OK


def cmd_circulate(cfg):
    train_ds, test_ds, network = _setup(cfg, need_checkpoint=True)
    kind, _, detail = cfg.visitors.partition(":")
    if kind == "index":
        indices = [int(v) for v in detail.split(",")]
        report = exp.circulate(network, test_ds, theta=cfg.theta,
                               eval_batch=cfg.eval_batch, visitor_indices=indices)
    else:
        count = int(detail) if detail else 1
        report = exp.circulate(network, test_ds, visitor_kind=kind,
                               visitor_count=count, theta=cfg.theta,
                               eval_batch=cfg.eval_batch)
    exp.write_json_report(report, _out_path(cfg, ".circulation.json"))
    _print_circulation(report, test_ds.class_count)
    return EXIT_OK


def _print_circulation(report, class_count):
    print(f"{report.visitor_kind} visitor(s) {report.visitor_indices} "
          f"(true class {report.visitor_classes}), theta={report.theta}")
    # grid in the style of the circulation figure: one column per step,
    # one row per batch position
    steps = report.steps
    header = "pos | " + " ".join(f"{i:2d}" for i in range(len(steps)))
    print(header)
    print("-" * len(header))
    for pos in range(class_count):
        cells = []
        for step in steps:
            mark = "*" if pos in step["replaced_positions"] else " "
            cells.append(f"{step['predictions'][pos]}{mark}")
        print(f"{pos:3d} | " + " ".join(cells))
    s = report.summary
    print(f"steps={s['steps']} missing-class rate={s['missing_class_rate']:.2f} "
          f"visitor-correct rate={s['visitor_correct_rate']:.2f} "
          f"residents-stable rate={s['residents_stable_rate']:.2f}")


def cmd_rebalance(cfg):
    train_ds, test_ds, network = _setup(cfg, need_checkpoint=True)
    report = exp.rebalance_iterate(network, test_ds, cfg.iterations, cfg.eval_batch)
    exp.write_json_report(report, _out_path(cfg, ".rebalance.json"))
    for row in report.rows:
        print(f"iteration {row['iteration']:3d}: error {row['error_rate']:.4f} "
              f"({row['changed']} labels changed)")
    if report.fixed_point_at is not None:
        print(f"fixed point reached at iteration {report.fixed_point_at}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    results = run_suite(seed=args.seed, instances=args.instances,
                        corrupt=args.corrupt)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:12s} max relative error {r.max_rel_err:.3e} "
              f"(tol {r.tol:g})  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


class ConfigError(Exception):
    pass


def _setup(cfg, need_checkpoint=False):
    """Resolve datasets (and checkpoint) or raise ConfigError."""
    try:
        train_ds, test_ds = _prepare(cfg)
        network = _load_network(cfg, train_ds) if need_checkpoint else None
    except (ValueError, FileNotFoundError, KeyError) as err:
        raise ConfigError(str(err)) from err
    _write_resolved(cfg)
    return train_ds, test_ds, network


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck":
        with _thread_limits(args.mode):
            return cmd_gradcheck(args)
    try:
        cfg = _resolve(args)
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    commands = {"train": cmd_train, "eval": cmd_eval,
                "circulate": cmd_circulate, "rebalance": cmd_rebalance}
    try:
        with _thread_limits(cfg.mode):
            if args.command == "eval":
                return cmd_eval(cfg, args.protocol)
            return commands[args.command](cfg)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def _thread_limits(mode):
    if mode == "deterministic":
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    import contextlib
    return contextlib.nullcontext()


if __name__ == "__main__":
    sys.exit(main())
