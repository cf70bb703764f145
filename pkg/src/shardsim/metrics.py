"""Evaluation metrics, per-epoch reports and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

CSV_FIELDS = (
    "epoch",
    "committed_tx",
    "dropped_tx",
    "intra",
    "cross",
    "cross_ratio",
    "workload_deviation",
    "normalized_throughput",
    "proposed_mr",
    "committed_mr",
)

_INT_FIELDS = {"epoch", "committed_tx", "dropped_tx", "intra", "cross", "proposed_mr", "committed_mr"}


class MetricsFormatError(ValueError):
    def __init__(self, row: int, msg: str):
        super().__init__(f"row {row}: {msg}")
        self.row = row


def cross_shard_ratio(intra: int, cross: int) -> float:
    total = intra + cross
    return cross / total if total else 0.0


def _loads(omega) -> Sequence[float]:
    return getattr(omega, "loads", omega)


def workload_deviation(omega) -> float:
    """``sqrt(sum((w - mean)^2) / (k * mean))``; 0.0 when every load is zero.

    Note the denominator is ``k * mean`` rather than ``k``, so the value
    scales with the square root of the load level.
    """
    w = _loads(omega)
    k = len(w)
    if k == 0:
        return 0.0
    mean = sum(w) / k
    if mean <= 0:
        return 0.0
    return math.sqrt(sum((x - mean) ** 2 for x in w) / (k * mean))


def deviation_defined(omega) -> bool:
    return any(x > 0 for x in _loads(omega))


def normalized_throughput(committed: int, lam: float) -> float:
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    return committed / lam


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    committed_tx: int
    dropped_tx: int
    intra: int
    cross: int
    cross_ratio: float
    workload_deviation: float
    normalized_throughput: float
    proposed_mr: int
    committed_mr: int
    # demand workload of the epoch under the mapping in force
    omega: tuple[float, ...] = ()
    # budget units actually spent per shard
    consumed: tuple[float, ...] = ()
    lam: float = 0.0
    committed_intra: int = 0
    committed_cross: int = 0
    deviation_defined: bool = True

    @classmethod
    def build(
        cls,
        epoch: int,
        committed_intra: int,
        committed_cross: int,
        dropped_intra: int,
        dropped_cross: int,
        omega: Sequence[float],
        consumed: Sequence[float],
        lam: float,
        proposed_mr: int,
        committed_mr: int,
    ) -> "EpochReport":
        intra = committed_intra + dropped_intra
        cross = committed_cross + dropped_cross
        committed = committed_intra + committed_cross
        return cls(
            epoch=epoch,
            committed_tx=committed,
            dropped_tx=dropped_intra + dropped_cross,
            intra=intra,
            cross=cross,
            cross_ratio=cross_shard_ratio(intra, cross),
            workload_deviation=workload_deviation(omega),
            normalized_throughput=normalized_throughput(committed, lam),
            proposed_mr=proposed_mr,
            committed_mr=committed_mr,
            omega=tuple(float(x) for x in omega),
            consumed=tuple(float(x) for x in consumed),
            lam=float(lam),
            committed_intra=committed_intra,
            committed_cross=committed_cross,
            deviation_defined=deviation_defined(omega),
        )

    @property
    def committed_cross_ratio(self) -> float:
        """Cross ratio over committed transactions only."""
        return cross_shard_ratio(self.committed_intra, self.committed_cross)

    def csv_row(self) -> dict:
        return {name: getattr(self, name) for name in CSV_FIELDS}


@dataclass
class MetricSeries:
    reports: list[EpochReport] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def aggregates(self) -> dict[str, float]:
        return aggregate(self.reports)


def aggregate(rows: Sequence[EpochReport]) -> dict[str, float]:
    n = len(rows)
    if n == 0:
        return {"epochs": 0, "cross_ratio": 0.0, "workload_deviation": 0.0, "normalized_throughput": 0.0}
    return {
        "epochs": n,
        "cross_ratio": sum(r.cross_ratio for r in rows) / n,
        "workload_deviation": sum(r.workload_deviation for r in rows) / n,
        "normalized_throughput": sum(r.normalized_throughput for r in rows) / n,
    }


def serialize_reports(series: MetricSeries, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in series.reports:
            writer.writerow([_fmt(getattr(r, name)) for name in CSV_FIELDS])
        return buf.getvalue().encode("utf-8")
    if fmt == "json":
        records = []
        for r in series.reports:
            rec = asdict(r)
            rec["omega"] = list(r.omega)
            rec["consumed"] = list(r.consumed)
            rec["committed_cross_ratio"] = r.committed_cross_ratio
            records.append(rec)
        doc = {"run_manifest": series.manifest, "records": records}
        return (json.dumps(doc, indent=2, sort_keys=False) + "\n").encode("utf-8")
    raise ValueError(f"unknown format {fmt!r}")


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def parse_reports(data: bytes | str, fmt: str = "csv") -> MetricSeries:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    if fmt == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MetricsFormatError(0, f"invalid JSON: {exc}") from None
        names = {f.name for f in fields(EpochReport)}
        reports = []
        for i, rec in enumerate(doc.get("records", []), start=1):
            try:
                kwargs = {k: v for k, v in rec.items() if k in names}
                kwargs["omega"] = tuple(kwargs.get("omega", ()))
                kwargs["consumed"] = tuple(kwargs.get("consumed", ()))
                reports.append(EpochReport(**kwargs))
            except TypeError as exc:
                raise MetricsFormatError(i, str(exc)) from None
        return MetricSeries(reports, doc.get("run_manifest", {}))
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise MetricsFormatError(0, "empty file")
    if tuple(header) != CSV_FIELDS:
        raise MetricsFormatError(1, f"unexpected header {header}")
    reports = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(CSV_FIELDS):
            raise MetricsFormatError(line, f"expected {len(CSV_FIELDS)} columns, got {len(row)}")
        kwargs = {}
        for name, raw in zip(CSV_FIELDS, row):
            try:
                kwargs[name] = int(raw) if name in _INT_FIELDS else float(raw)
            except ValueError:
                raise MetricsFormatError(line, f"bad value {raw!r} for {name}") from None
        reports.append(EpochReport(**kwargs))
    return MetricSeries(reports)


def format_table(rows: Iterable[tuple[str, dict]]) -> str:
    """Aggregates laid out one run per line."""
    rows = list(rows)
    w = max([3] + [len(name) for name, _ in rows])
    lines = [f"{'run':<{w}} {'epochs':>6} {'cross_ratio':>12} {'deviation':>10} {'throughput':>11}"]
    for name, agg in rows:
        lines.append(
            f"{name:<{w}} {agg['epochs']:>6d} {agg['cross_ratio'] * 100:>11.2f}% "
            f"{agg['workload_deviation']:>10.3f} {agg['normalized_throughput']:>11.3f}"
        )
    return "\n".join(lines)
