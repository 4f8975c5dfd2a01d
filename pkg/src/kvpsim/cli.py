"""Command-line front end: ``run``, ``sweep``, ``capacity`` and ``compare``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .config import (
    HARDWARE_PRESETS,
    MODEL_PRESETS,
    ConfigError,
    EvictionPriority,
    Scenario,
    VariantKind,
    apply_overrides,
    load_document,
    scenario_from_dict,
)
from .kernelsim import SimulationError, run_kernel
from .kvlayout import capacity_report
from .memsim import JsonlTraceWriter
from .metrics import MetricSet, derive_metrics, format_table, speedup, with_speedup

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2

SWEEP_COLUMNS = ("batch", "output_tokens", "duration_baseline", "duration_prefetch", "speedup")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own; raise instead so main() owns the exit path
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# --- scenario assembly ---------------------------------------------------------

def _env_seed() -> Optional[int]:
    raw = os.environ.get("KVPSIM_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"KVPSIM_SEED must be an integer, got {raw!r}") from None


def _read_scenario_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fp:
            text = fp.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path!r}: {exc.strerror}") from None
    doc = load_document(text)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scenario document must be a JSON object")
    return doc


def _flag_overrides(args: argparse.Namespace, batch=None, tokens=None) -> list[str]:
    """Translate CLI flags into ``section.key=value`` overrides."""
    out = []
    if getattr(args, "model", None):
        out.append(f"model.preset={json.dumps(args.model)}")
    if getattr(args, "hardware", None):
        out.append(f"hardware.preset={json.dumps(args.hardware)}")
    if batch is not None:
        out.append(f"workload.batch={batch}")
    if tokens is not None:
        out.append(f"workload.seq_len={tokens}")
    if getattr(args, "seed", None) is not None:
        out.append(f"workload.seed={args.seed}")
    if getattr(args, "eviction_priority", None):
        out.append(f"variant.eviction_priority={json.dumps(args.eviction_priority)}")
    return out


def _base_document(args: argparse.Namespace) -> dict:
    doc = _read_scenario_file(getattr(args, "scenario", None))
    doc.setdefault("model", "llama2-7b")
    # the environment seed is a default: the file and --seed both win over it
    seed = _env_seed()
    workload = doc.setdefault("workload", {})
    if seed is not None and isinstance(workload, dict) and "seed" not in workload:
        workload["seed"] = seed
    return doc


def build_scenario(args: argparse.Namespace, batch=None, tokens=None, variant=None) -> Scenario:
    """Scenario file, then flags, then ``--set`` overrides, in that order."""
    overrides = _flag_overrides(args, batch, tokens)
    if variant is not None:
        overrides.append(f"variant.kind={json.dumps(variant)}")
    overrides.extend(getattr(args, "set", None) or [])
    return scenario_from_dict(apply_overrides(_base_document(args), overrides))


def _check_preset(value: Optional[str], presets: Sequence[str], what: str) -> None:
    if value is not None and value not in presets:
        raise ConfigError(f"unknown preset {what} {value!r} (choose from {', '.join(presets)})")


def simulate(scenario: Scenario, stepping: str = "event", mem_log=None) -> MetricSet:
    return derive_metrics(run_kernel(scenario, stepping=stepping, mem_log=mem_log), scenario.hardware)


# --- output --------------------------------------------------------------------

def _emit(args: argparse.Namespace, text: str) -> None:
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(text)
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- commands ------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    _check_preset(args.model, MODEL_PRESETS, "model")
    _check_preset(args.hardware, HARDWARE_PRESETS, "hardware")
    scenario = build_scenario(args, args.batch, args.output_tokens, args.variant)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="\n") as fp:
            metrics = simulate(scenario, args.stepping, JsonlTraceWriter(fp))
    else:
        metrics = simulate(scenario, args.stepping)
    if args.json:
        _emit(args, _dumps(metrics.to_dict()))
    else:
        _emit(args, format_table([(scenario.variant.kind.value, metrics)]))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    _check_preset(args.model, MODEL_PRESETS, "model")
    _check_preset(args.hardware, HARDWARE_PRESETS, "hardware")
    variants = args.variants
    if len(variants) < 2:
        raise UsageError("compare needs at least two variants")
    columns = []
    for v in variants:
        scenario = build_scenario(args, args.batch, args.output_tokens, v)
        columns.append((v, simulate(scenario, args.stepping)))
    if args.json:
        base = columns[0][1]
        doc = {
            "variants": [v for v, _ in columns],
            "metrics": [with_speedup(base, ms).to_dict() for _, ms in columns],
        }
        _emit(args, _dumps(doc))
    else:
        _emit(args, format_table(columns, with_speedup_row=True))
    return EXIT_OK


def cmd_capacity(args: argparse.Namespace) -> int:
    _check_preset(args.model, MODEL_PRESETS, "model")
    _check_preset(args.hardware, HARDWARE_PRESETS, "hardware")
    scenario = build_scenario(args, args.batch)
    report = capacity_report(scenario.model, scenario.hardware, scenario.workload.batch)
    _emit(args, _dumps(report.to_dict()))
    return EXIT_OK


@dataclass(frozen=True)
class SweepSpec:
    batches: tuple[int, ...]
    output_tokens: tuple[int, ...]
    baseline: Scenario
    variant: VariantKind

    def __post_init__(self) -> None:
        if not self.batches or not self.output_tokens:
            raise ConfigError("sweep axes must be non-empty")

    @property
    def total_runs(self) -> int:
        return 2 * len(self.batches) * len(self.output_tokens)

    def cells(self) -> list[tuple[int, int]]:
        return sorted({(b, t) for b in self.batches for t in self.output_tokens})


def _sweep_cell(base: Scenario, variant: VariantKind, batch: int, tokens: int) -> tuple[int, int, int, int]:
    s = replace(base, workload=replace(base.workload, batch=batch, seq_len=tokens))
    d_base = run_kernel(s).duration_cycles
    d_opt = run_kernel(s.with_variant(variant)).duration_cycles
    return batch, tokens, d_base, d_opt


def run_sweep(spec: SweepSpec, jobs: int = 1) -> list[dict]:
    """One row per (batch, tokens) cell, sorted by batch then tokens."""
    cells = spec.cells()
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_cell, spec.baseline, spec.variant, b, t) for b, t in cells]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_cell(spec.baseline, spec.variant, b, t) for b, t in cells]
    return [
        {"batch": b, "output_tokens": t, "duration_baseline": db, "duration_prefetch": dp,
         "speedup": speedup(db, dp)}
        for b, t, db, dp in sorted(results)
    ]


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "speedup": repr(row["speedup"])})
    return buf.getvalue()


def cmd_sweep(args: argparse.Namespace) -> int:
    _check_preset(args.model, MODEL_PRESETS, "model")
    _check_preset(args.hardware, HARDWARE_PRESETS, "hardware")
    if args.variant == VariantKind.BASELINE.value:
        raise UsageError("sweep --variant must be a prefetch variant")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    # validate every cell up front so a bad axis value fails before any simulation
    for b in args.batch:
        for t in args.output_tokens:
            build_scenario(args, b, t)
    base = build_scenario(args, args.batch[0], args.output_tokens[0], VariantKind.BASELINE.value)
    spec = SweepSpec(tuple(args.batch), tuple(args.output_tokens), base, VariantKind(args.variant))
    rows = run_sweep(spec, args.jobs)
    _emit(args, _dumps(rows) if args.json else sweep_csv(rows))
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _scenario_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--scenario", "-f", metavar="FILE", help="JSON scenario file; flags override it")
    p.add_argument("--model", help=f"model preset ({', '.join(MODEL_PRESETS)})")
    p.add_argument("--hardware", help=f"hardware preset ({', '.join(HARDWARE_PRESETS)})")
    if sweep:
        p.add_argument("--batch", type=int, nargs="+", default=[1], metavar="B")
        p.add_argument("--output-tokens", type=int, nargs="+", default=[4096], metavar="T")
    else:
        p.add_argument("--batch", type=int, metavar="B")
        p.add_argument("--output-tokens", type=int, metavar="T", help="KV length attended per sequence")
    p.add_argument("--eviction-priority", choices=[e.value for e in EvictionPriority])
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                   help="override one scenario field; repeatable")
    p.add_argument("--seed", type=int, help="allocation seed (default: $KVPSIM_SEED)")
    p.add_argument("--json", action="store_true", help="machine-readable JSON output")
    p.add_argument("--out", metavar="FILE", help="write output to FILE instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvpsim", description="Paged-attention KV prefetch simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    variants = [v.value for v in VariantKind]
    stepping = dict(choices=["event", "cycle"], default="event", help="simulation driver")

    p = sub.add_parser("run", help="simulate one scenario and print its metrics")
    _scenario_flags(p)
    p.add_argument("--variant", choices=variants)
    p.add_argument("--stepping", **stepping)
    p.add_argument("--trace", metavar="FILE", help="write the memory event log as JSON lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="side-by-side metrics for several variants")
    _scenario_flags(p)
    p.add_argument("--variants", nargs="+", choices=variants, default=["baseline", "prefetch_kv"])
    p.add_argument("--stepping", **stepping)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="baseline vs prefetch speedup over a batch x tokens grid (CSV)")
    _scenario_flags(p, sweep=True)
    p.add_argument("--variant", choices=variants[1:], default=VariantKind.PREFETCH_KV.value)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("capacity", help="analytic KV footprint and L2 residency bound (JSON)")
    _scenario_flags(p)
    p.set_defaults(func=cmd_capacity)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"kvpsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"kvpsim: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"kvpsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
