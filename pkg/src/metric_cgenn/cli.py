"""Command-line interface: gen-data, train, eval, verify, cayley.

Exit codes: 0 success, 1 usage or config error, 2 runtime or data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import properties, runner, tasks
from .algebra import DiagonalMetric, blade_name, build_cayley_table
from .errors import CGENNError, ConfigError, DimensionError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime errors
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# flag dest -> (config section, field); None means top level
_OVERRIDES = {
    "task": (None, "task"),
    "train_data": (None, "train_data"),
    "eval_data": (None, "eval_data"),
    "out": (None, "out_dir"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "learning_rate"),
    "metric_activation": ("train", "metric_activation_fraction"),
    "optimizer": ("train", "optimizer"),
    "log_every": ("train", "log_every"),
    "epsilon": ("model", "epsilon"),
    "hidden_channels": ("model", "hidden_channels"),
    "num_blocks": ("model", "num_blocks"),
}


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_run_config(args) -> runner.RunConfig:
    """Config file fields, then flags on top (flag wins)."""
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            data[key] = value
        else:
            data.setdefault(section, {})[key] = value
    if args.seed is not None:
        data.setdefault("model", {})["seed"] = args.seed
        data.setdefault("train", {})["seed"] = args.seed
    if args.q_signature is not None:
        data.setdefault("model", {})["q_signature"] = list(DiagonalMetric.parse(args.q_signature).entries)
    return runner.RunConfig.from_dict(data)


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    dataset = tasks.generate(args.task, args.n, args.seed)
    count = tasks.write_jsonl(dataset, args.out)
    print(f"wrote {count} {args.task} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    if not cfg.train_data:
        raise ConfigError("no training data: set train_data in the config or pass --train-data")
    for path in (cfg.train_data, cfg.eval_data):
        if path and not Path(path).exists():
            raise ConfigError(f"data file {path} does not exist")
    train_ds = runner.load_dataset(cfg.train_data, cfg.task)
    eval_ds = runner.load_dataset(cfg.eval_data, cfg.task) if cfg.eval_data else None

    def progress(step, loss, ev):
        ev_txt = "" if ev is None else f" eval_loss={ev:.6g}"
        print(f"step {step} train_loss={loss:.6g}{ev_txt}", file=sys.stderr)

    summary = runner.train_run(cfg, train_ds, eval_ds, cfg.out_dir, progress=None if args.quiet else progress)
    shown = {k: v for k, v in summary.items() if k != "metric_M"}
    print(json.dumps(shown, indent=2, sort_keys=True))
    if args.json:
        _write_json(summary, args.json)
    return EXIT_OK


def cmd_eval(args) -> int:
    for path in (args.checkpoint, args.data):
        if not Path(path).exists():
            raise ConfigError(f"file {path} does not exist")
    result = runner.eval_checkpoint(args.checkpoint, args.data)
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.json:
        _write_json(result, args.json)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    report = properties.run_suite(args.suite, args.seed, args.trials)
    for c in report.cases:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name} checks={c.checks} max_error={c.max_error:.3e} tol={c.tolerance:.1e}")
        for key, value in c.measurements.items():
            print(f"     {key} = {value}")
    failed = sum(not c.passed for c in report.cases)
    print(f"suite {report.suite}: {len(report.cases)} cases, {failed} failed")
    if args.json:
        _write_json(report.to_dict(), args.json)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_cayley(args) -> int:
    if args.signature:
        metric = DiagonalMetric.parse(args.signature)
    elif args.dim is not None:
        if args.dim < 1:
            raise ConfigError("--dim must be at least 1")
        metric = DiagonalMetric.euclidean(args.dim)
    else:
        raise ConfigError("pass --signature or --dim")
    table = build_cayley_table(metric)
    rows = list(table.rows())
    if args.json:
        _write_json(
            {"signature": list(metric.entries),
             "rows": [{"a": blade_name(a), "b": blade_name(b), "scale": s, "result": blade_name(c)}
                      for a, b, s, c in rows]},
            args.json,
        )
    for a, b, s, c in rows:
        print(f"{blade_name(a)} {blade_name(b)} -> {s:+g} {blade_name(c)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metric-cgenn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as JSON Lines")
    g.add_argument("--task", required=True, choices=tasks.TASKS)
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a run directory")
    t.add_argument("--config", help="JSON run config; flags override its fields")
    t.add_argument("--task", choices=tasks.TASKS)
    t.add_argument("--train-data")
    t.add_argument("--eval-data")
    t.add_argument("--out", help="run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--metric-activation", type=float, help="fraction of training before M is learned")
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--log-every", type=int)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--q-signature", help="comma-separated diagonal of Q, e.g. 1,1,1")
    t.add_argument("--hidden-channels", type=int)
    t.add_argument("--num-blocks", type=int)
    t.add_argument("--json", help="also write the summary here")
    t.add_argument("--quiet", action="store_true", help="no per-step progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--json", help="write the metrics here")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--suite", default="all", choices=properties.SUITES)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--json", help="write the report here")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("cayley", help="print a Cayley table")
    c.add_argument("--signature", help="comma-separated diagonal metric, e.g. 1,-1")
    c.add_argument("--dim", type=int, help="Euclidean dimension (if no signature)")
    c.add_argument("--json", help="also write the table here")
    c.set_defaults(func=cmd_cayley)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CGENNError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
