"""Command-line front end.

    dctsim run --config exp.yaml [--seed N] [--out-dir D] [--mode M] [--precision P]
    dctsim verify [suite ...] [--seed N]
    dctsim gen-data --config exp.yaml [--seed N] [--out-dir D]
    dctsim report RUN_DIR [RUN_DIR ...] [--out-dir D]

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage,
3 verification failure.

A run writes metrics.csv, summary.txt, and meter.csv into the output
directory, plus audit.bin (the applied-update frames) on 32-bit runs.
summary.txt holds only deterministic quantities, so repeating a config
under the same seed reproduces it byte for byte; wall-clock timings
appear in sweep reports instead.
"""

import argparse
import os
import sys

from . import config, report, verify
from .data import make_dataset, write_csv
from .errors import ConfigError, DctsimError
from .runtime import run_async, run_sync

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3

_WALL_KEYS = ("compress_seconds",)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def summary_text(summary):
    lines = [f"{key} = {summary[key]}" for key in sorted(summary)
             if key not in _WALL_KEYS]
    return "\n".join(lines) + "\n"


def _execute(cfg, out_dir):
    if cfg.dataset is None:
        raise ConfigError("dataset: section required to run an experiment")
    graph = cfg.graph()
    dataset = make_dataset(cfg.dataset)
    runner = run_async if cfg.mode == "async" else run_sync
    result = runner(graph, dataset, **cfg.run_kwargs())

    _write(os.path.join(out_dir, "metrics.csv"), result.metrics_csv())
    _write(os.path.join(out_dir, "summary.txt"), summary_text(result.summary))
    _write(os.path.join(out_dir, "meter.csv"), result.meter.to_csv())
    if cfg.precision == 32:
        frames = b"".join(result.server.audit_frames())
        with open(os.path.join(out_dir, "audit.bin"), "wb") as fh:
            fh.write(frames)

    summ = result.summary
    print(f"{out_dir}: {summ['steps']} steps x {summ['streams']} stream(s), "
          f"train loss {summ['final_train_loss']:.6g}, "
          f"test loss {summ['final_test_loss']:.6g}, "
          f"{summ['sent_bytes']} bytes sent")
    return result


def cmd_run(args):
    cfg = config.load(args.config).with_overrides(
        seed=args.seed, out_dir=args.out_dir,
        mode=args.mode, precision=args.precision)
    if cfg.sweep_field is None:
        _execute(cfg, cfg.out_dir)
        return EXIT_OK

    dirs, summaries = [], []
    for value in cfg.sweep_values:
        sub = cfg.with_sweep_value(value)
        sub_dir = os.path.join(cfg.out_dir, f"sweep_{value}")
        summaries.append(_execute(sub, sub_dir).summary)
        dirs.append(sub_dir)
    rows = report.aggregate(summaries, sources=dirs)
    table = report.render_table(rows)
    _write(os.path.join(cfg.out_dir, "sweep_report.csv"), report.to_csv(rows))
    _write(os.path.join(cfg.out_dir, "sweep_report.txt"), table)
    print(table, end="")
    return EXIT_OK


def cmd_verify(args):
    names = args.suites or ["all"]
    if "all" in names:
        names = verify.suite_names()
    unknown = sorted(set(names) - set(verify.suite_names()))
    if unknown:
        raise ConfigError(f"unknown verify suite(s) {unknown}; "
                          f"known: {verify.suite_names() + ['all']}")
    failed = []
    for name in names:
        ok, lines = verify.run_suite(name, seed=args.seed)
        print(f"[{'ok' if ok else 'FAIL'}] {name}")
        for line in lines:
            print(f"    {line}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"verification failed: {failed}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_gen_data(args):
    cfg = config.load(args.config).with_overrides(
        seed=args.seed, out_dir=args.out_dir)
    spec = cfg.dataset
    if spec is None:
        raise ConfigError("dataset: section required to generate data")
    if spec.kind == "csv":
        raise ConfigError("dataset.kind: csv datasets already live on disk")
    ds = make_dataset(spec)
    out_dir = cfg.out_dir
    write_csv(os.path.join(out_dir, "train.csv"), ds.train_x, ds.train_y)
    write_csv(os.path.join(out_dir, "test.csv"), ds.test_x, ds.test_y)
    meta = {f.name: getattr(spec, f.name)
            for f in spec.__dataclass_fields__.values()}
    meta["train_rows"] = ds.train_x.shape[0]
    meta["test_rows"] = ds.test_x.shape[0]
    _write(os.path.join(out_dir, "meta.txt"), summary_text(meta))
    print(f"{out_dir}: {ds.train_x.shape[0]} train rows, "
          f"{ds.test_x.shape[0]} test rows")
    return EXIT_OK


def cmd_report(args):
    rows = report.report_runs(args.run_dirs)
    table = report.render_table(rows)
    if args.out_dir:
        _write(os.path.join(args.out_dir, "report.csv"), report.to_csv(rows))
        _write(os.path.join(args.out_dir, "report.txt"), table)
    print(table, end="")
    return EXIT_OK


def _parser():
    p = argparse.ArgumentParser(
        prog="dctsim",
        description="Threshold-compressed distributed training simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("--config", required=True, help="YAML experiment file")
    run.add_argument("--seed", type=int, help="override run and dataset seeds")
    run.add_argument("--out-dir", help="override the output directory")
    run.add_argument("--mode", choices=("sync", "async"))
    run.add_argument("--precision", type=int, choices=(64, 32))
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run self-check suites")
    ver.add_argument("suites", nargs="*", metavar="suite",
                     help=f"any of {verify.suite_names()} or 'all' (default)")
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=cmd_verify)

    gen = sub.add_parser("gen-data", help="materialize a synthetic dataset as CSV")
    gen.add_argument("--config", required=True, help="YAML experiment file")
    gen.add_argument("--seed", type=int, help="override the dataset seed")
    gen.add_argument("--out-dir", help="override the output directory")
    gen.set_defaults(func=cmd_gen_data)

    rep = sub.add_parser("report", help="tabulate finished runs side by side")
    rep.add_argument("run_dirs", nargs="+", metavar="run-dir",
                     help="directories containing summary.txt")
    rep.add_argument("--out-dir", help="also write report.csv and report.txt here")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DctsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
