"""Command line: ``simulate``, ``gen-trace`` and ``analyze``."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace

from . import __version__
from .allocators import AllocatorKind
from .engine import RunSpec, resolve_threads, run_simulation
from .metrics import MetricSeries, MetricsFormatError, aggregate, format_table, parse_reports, serialize_reports
from .model import params_errors
from .trace import Trace, TraceParseError, gen_clustered, gen_uniform, read_trace, write_trace

log = logging.getLogger("shardsim")

DEFAULTS = {
    "k": 16,
    "eta": 2.0,
    "tau": 300,
    "beta": 0.0,
    "lambda": None,
    "seed": 0,
    "allocator": "pilot",
    "init": "hash",
    "epochs": None,
    "window": None,
    "warmup": 0.9,
    "trace": None,
    "gen": None,
    "out": ".",
    "format": "csv",
    "run_id": None,
    "noisy_mempool": 0.0,
    "raw_fusion": True,
    "cap_factor": 1.1,
}

GENERATORS = {
    "uniform": (gen_uniform, {"n_accounts": int, "txs_per_block": int, "n_blocks": int, "seed": int}),
    "clustered": (
        gen_clustered,
        {
            "n_communities": int,
            "accounts_per_community": int,
            "p_intra": float,
            "txs_per_block": int,
            "n_blocks": int,
            "churn": float,
            "seed": int,
        },
    ),
}


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    spec: RunSpec
    trace: str | None
    gen: str | None
    out: str
    format: str
    run_id: str | None

    def as_dict(self) -> dict:
        d = asdict(self.spec)
        d["allocator"] = self.spec.allocator.value
        d["init"] = self.spec.init.value
        d["lambda"] = d.pop("lam")
        d.pop("threads")
        d.update(trace=self.trace, gen=self.gen)
        return d


def parse_gen_spec(text: str, default_seed: int = 0) -> tuple[str, dict]:
    """``clustered:n_communities=16,p_intra=0.9,...`` -> (kind, kwargs)."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind not in GENERATORS:
        raise UsageError(f"gen: unknown generator {kind!r} (choose from {', '.join(GENERATORS)})")
    _, types = GENERATORS[kind]
    kwargs: dict = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, value = item.partition("=")
        key = key.strip()
        if not eq or key not in types:
            raise UsageError(f"gen: bad parameter {item!r} for {kind}")
        try:
            kwargs[key] = types[key](value)
        except ValueError:
            raise UsageError(f"gen: {key} must be {types[key].__name__}, got {value!r}") from None
    kwargs.setdefault("seed", default_seed)
    missing = [k for k in types if k not in kwargs and k not in ("churn",)]
    if missing:
        raise UsageError(f"gen: {kind} needs {', '.join(missing)}")
    return kind, kwargs


def generate(text: str, default_seed: int = 0) -> Trace:
    kind, kwargs = parse_gen_spec(text, default_seed)
    fn, _ = GENERATORS[kind]
    try:
        return fn(**kwargs)
    except ValueError as exc:
        raise UsageError(f"gen: {exc}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with run settings; flags take precedence")
    p.add_argument("--k", type=int, default=S, help="shard count (16)")
    p.add_argument("--eta", type=float, default=S, help="cross-shard difficulty, > 1 (2)")
    p.add_argument("--tau", type=int, default=S, help="blocks per epoch (300)")
    p.add_argument("--beta", type=float, default=S, help="known share of future transactions (0)")
    p.add_argument("--lambda", dest="lambda", type=float, default=S,
                   help="per-shard capacity per epoch (default: mean evaluation epoch size / k)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--allocator", choices=[a.value for a in AllocatorKind], default=S)
    p.add_argument("--init", choices=["hash", "greedy"], default=S, help="initial allocation for pilot runs")
    p.add_argument("--epochs", type=int, default=S, help="evaluation epochs (default: all complete ones)")
    p.add_argument("--window", type=int, default=S, help="history window in epochs (default: all)")
    p.add_argument("--warmup", type=float, default=S, help="leading share of blocks used for warmup (0.9)")
    p.add_argument("--trace", default=S, help="trace CSV path")
    p.add_argument("--gen", default=S, help="generator spec, e.g. uniform:n_accounts=100,txs_per_block=10,n_blocks=50")
    p.add_argument("--out", default=S, help="output directory (.)")
    p.add_argument("--format", choices=["csv", "json", "both"], default=S)
    p.add_argument("--run-id", dest="run_id", default=S)
    p.add_argument("--noisy-mempool", dest="noisy_mempool", type=float, default=S,
                   help="drop each lookahead transaction with this probability (0)")
    fusion = p.add_mutually_exclusive_group()
    fusion.add_argument("--raw-fusion", dest="raw_fusion", action="store_true", default=S,
                        help="mix raw history and expectation counts (default)")
    fusion.add_argument("--normalized-fusion", dest="raw_fusion", action="store_false", default=S,
                        help="scale history and expectations to unit total before mixing")
    p.add_argument("--cap-factor", dest="cap_factor", type=float, default=S, help="greedy allocator shard cap (1.1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"shardsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run an allocation experiment")
    _add_run_flags(sim)

    gen = sub.add_parser("gen-trace", help="write a synthetic trace CSV")
    gen.add_argument("--gen", required=True, help="generator spec")
    gen.add_argument("--out", required=True, help="output CSV path")
    gen.add_argument("--seed", type=int, default=0, help="seed when the spec omits one")

    ana = sub.add_parser("analyze", help="aggregate metrics files")
    ana.add_argument("files", nargs="+")
    return parser


def parse_config(argv: list[str]) -> RunConfig:
    """Resolve ``simulate`` settings: defaults, then config file, then flags."""
    parser = argparse.ArgumentParser(prog="shardsim simulate")
    _add_run_flags(parser)
    ns = vars(parser.parse_args(argv))
    return config_from(ns)


def config_from(flags: dict) -> RunConfig:
    values = dict(DEFAULTS)
    path = flags.pop("config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"config: cannot read {path}: {exc}") from None
        unknown = sorted(set(from_file) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"config: unknown key(s) {', '.join(unknown)}")
        values.update(from_file)
    values.update({k: v for k, v in flags.items() if k in DEFAULTS})

    for name, msg in params_errors(values["k"], values["eta"], values["tau"], values["lambda"], values["beta"]):
        raise UsageError(f"{name}: {msg}")
    if values["epochs"] is not None and values["epochs"] < 1:
        raise UsageError("epochs: must be >= 1")
    if values["window"] is not None and values["window"] < 1:
        raise UsageError("window: must be >= 1")
    if not 0 <= values["warmup"] < 1:
        raise UsageError("warmup: must be in [0, 1)")
    if not 0 <= values["noisy_mempool"] < 1:
        raise UsageError("noisy_mempool: must be in [0, 1)")
    if values["cap_factor"] < 1:
        raise UsageError("cap_factor: must be >= 1")
    try:
        allocator = AllocatorKind(values["allocator"])
    except ValueError:
        raise UsageError(f"allocator: unknown {values['allocator']!r}") from None
    if values["init"] not in ("hash", "greedy"):
        raise UsageError(f"init: must be hash or greedy, got {values['init']!r}")
    if values["format"] not in ("csv", "json", "both"):
        raise UsageError(f"format: must be csv, json or both, got {values['format']!r}")

    spec = RunSpec(
        k=values["k"],
        eta=float(values["eta"]),
        tau=values["tau"],
        beta=float(values["beta"]),
        seed=values["seed"],
        lam=values["lambda"],
        allocator=allocator,
        init=AllocatorKind(values["init"]),
        epochs=values["epochs"],
        window=values["window"],
        warmup=float(values["warmup"]),
        noisy_mempool=float(values["noisy_mempool"]),
        raw_fusion=bool(values["raw_fusion"]),
        cap_factor=float(values["cap_factor"]),
    )
    return RunConfig(spec, values["trace"], values["gen"], values["out"], values["format"], values["run_id"])


def load_input_trace(cfg: RunConfig) -> Trace:
    if cfg.trace and cfg.gen:
        raise UsageError("trace: give either --trace or --gen, not both")
    if cfg.gen:
        return generate(cfg.gen, cfg.spec.seed)
    if not cfg.trace:
        raise UsageError("trace: one of --trace or --gen is required")
    return read_trace(cfg.trace)


def default_run_id(cfg: RunConfig, trace_digest: str) -> str:
    blob = json.dumps(cfg.as_dict(), sort_keys=True) + trace_digest
    return "run-" + hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def cmd_simulate(cfg: RunConfig) -> int:
    try:
        trace = load_input_trace(cfg)
    except FileNotFoundError:
        print(f"error: trace file not found: {cfg.trace}", file=sys.stderr)
        return 1
    except TraceParseError as exc:
        print(f"error: {cfg.trace}: {exc}", file=sys.stderr)
        return 1
    spec = replace(cfg.spec, threads=resolve_threads())
    try:
        series = run_simulation(trace, spec)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    run_id = cfg.run_id or default_run_id(cfg, series.manifest["trace_digest"])
    manifest = dict(series.manifest)
    manifest.update(
        run_id=run_id,
        config=cfg.as_dict(),
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )
    series = MetricSeries(series.reports, manifest)

    try:
        os.makedirs(cfg.out, exist_ok=True)
        written = []
        formats = ("csv", "json") if cfg.format == "both" else (cfg.format,)
        for fmt in formats:
            path = os.path.join(cfg.out, f"{run_id}.metrics.{fmt}")
            with open(path, "wb") as fh:
                fh.write(serialize_reports(series, fmt))
            written.append(path)
        path = os.path.join(cfg.out, f"{run_id}.manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        written.append(path)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return 1

    print(format_table([(f"{run_id} [{cfg.spec.allocator.label}]", series.aggregates())]))
    if manifest["partial_tail_txs_excluded"]:
        print(f"partial trailing epoch excluded: {manifest['partial_tail_txs_excluded']} txs")
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_gen_trace(spec: str, out: str, seed: int = 0) -> int:
    try:
        trace = generate(spec, seed)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            write_trace(trace, fh)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return 1
    print(f"{len(trace.accounts())} accounts, {len(trace)} transactions -> {out}")
    return 0


def cmd_analyze(paths: list[str]) -> int:
    rows = []
    for path in paths:
        fmt = "json" if path.endswith(".json") else "csv"
        try:
            with open(path, "rb") as fh:
                series = parse_reports(fh.read(), fmt)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except MetricsFormatError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return 1
        if not series.reports:
            print(f"error: {path}: no epoch rows", file=sys.stderr)
            return 1
        label = os.path.basename(path)
        allocator = series.manifest.get("allocator")
        if allocator:
            label = f"{label} [{allocator}]"
        rows.append((label, aggregate(series.reports)))
    print(format_table(rows))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen-trace":
        return cmd_gen_trace(args.gen, args.out, args.seed)
    if args.command == "analyze":
        return cmd_analyze(args.files)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    try:
        cfg = config_from(flags)
        return cmd_simulate(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"shardsim: usage error: {exc}", file=sys.stderr)
        return 2
