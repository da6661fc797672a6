"""Command line entry point: ``fedshade gen-data | run | summarize``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import replace

from . import harness
from .config import ConfigError, convert_value, field_kinds, load_config
from .privacy import SCHEMES
from .rng import stream
from .synthdata import MapSpec, generate_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedshade")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic radio map dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--maps", type=int, default=56)
    gen.add_argument("--tx-per-map", type=int, default=5)
    gen.add_argument("--out", required=True)
    for f in dataclasses.fields(MapSpec):
        gen.add_argument("--" + f.name.replace("_", "-"), dest="spec_" + f.name, default=None)

    run = sub.add_parser("run", help="run the scheme comparison")
    run.add_argument("--config", required=True)
    run.add_argument("--schemes", type=_csv_list, default=None)
    run.add_argument("--seeds", type=_csv_list, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--dump-traces", default=None)
    run.add_argument("--workers", type=int, default=1, help="parallel (scheme, seed) cells")

    summ = sub.add_parser("summarize", help="print the per-scheme summary of a CSV")
    summ.add_argument("--in", dest="path", required=True)
    return parser


def _gen_data(args) -> int:
    try:
        overrides = {}
        for name, kind in field_kinds(MapSpec).items():
            raw = getattr(args, "spec_" + name)
            if raw is not None:
                overrides[name] = convert_value(kind, raw)
        spec = MapSpec(**overrides)
        if args.maps < 0 or args.tx_per_map < 0:
            raise ValueError("--maps and --tx-per-map must be non-negative")
    except (TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    data = generate_dataset(stream(args.seed, "data"), spec, args.maps, args.tx_per_map)
    write_dataset(args.out, data)
    print(f"wrote {len(data)} samples to {args.out}")
    return EXIT_OK


def _run(args) -> int:
    try:
        config = load_config(args.config)
        schemes = args.schemes or config.schemes
        bad = [s for s in schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}")
        seeds = tuple(int(s) for s in args.seeds) if args.seeds else config.seeds
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or config.output.csv
    traces = args.dump_traces or config.output.traces
    config = replace(config, schemes=tuple(schemes), seeds=seeds)
    rows, failures = harness.run_comparison(
        config, schemes, seeds, out=out, traces_out=traces, cell_workers=args.workers
    )
    print(harness.format_summary(harness.summary_rows(rows)))
    for scheme, seed, message in failures:
        print(f"FAILED scheme={scheme} seed={seed}: {message}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def _summarize(args) -> int:
    try:
        records = harness.read_csv(args.path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(harness.format_summary(harness.summarize(records)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler = {"gen-data": _gen_data, "run": _run, "summarize": _summarize}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
