"""Command line entry point: ``run`` experiments and ``report`` figures."""

from __future__ import annotations

import argparse
import os
import sys

from .experiments import (
    FIGURES,
    ConfigError,
    format_config,
    parse_config,
    parse_value,
    read_csv,
    render_figure,
    resolve_config,
    run_experiment,
    write_csv,
)
from .experiments import figure_series

RESULTS = "results.csv"
ECHO = "config.txt"


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _write_text(path, text, written):
    written.append(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def cmd_run(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = parse_config(fh.read())
    raw.update(_overrides(args.set))
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = resolve_config(raw)
    out_dir = args.out_dir
    created = not os.path.isdir(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    try:
        progress = None
        if not args.quiet:
            def progress(i, n):
                print(f"\r{cfg['experiment']}: {i}/{n} sweep points", end="", file=sys.stderr,
                      flush=True)
        rows = run_experiment(cfg, threads=args.threads, progress=progress)
        if progress:
            print(file=sys.stderr)
        csv_path = os.path.join(out_dir, RESULTS)
        written.append(csv_path)
        write_csv(rows, csv_path)
        _write_text(os.path.join(out_dir, ECHO), format_config(cfg), written)
        as_read = read_csv(csv_path)
        for fig in cfg["figures"]:
            try:
                figure_series(as_read, fig)
            except ValueError:
                continue  # nothing in this sweep for that figure
            _write_text(os.path.join(out_dir, f"{fig}.svg"), render_figure(as_read, fig), written)
    except BaseException:
        for path in written:
            if os.path.exists(path):
                os.remove(path)
        if created and not os.listdir(out_dir):
            os.rmdir(out_dir)
        raise
    print(os.path.join(out_dir, RESULTS))
    return 0


def cmd_report(args) -> int:
    rows = read_csv(args.csv)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.csv))
    for fig in args.figure:
        svg = render_figure(rows, fig)
        path = os.path.join(out_dir, f"{fig}.svg")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(svg)
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metagrad", description="Meta-gradient estimation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config and write results.csv")
    r.add_argument("config", help="key = value config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--out-dir", default="results", help="output directory (default: results)")
    r.add_argument("--threads", type=int, default=1, help="worker processes for sweep points")
    r.add_argument("--quiet", action="store_true", help="no progress output")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("report", help="render figures from a results.csv")
    s.add_argument("csv")
    s.add_argument("--figure", action="append", required=True, choices=sorted(FIGURES))
    s.add_argument("--out-dir", help="where to write SVGs (default: next to the CSV)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
