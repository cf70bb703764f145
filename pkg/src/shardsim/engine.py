"""Epoch loop: commit transactions under shard budgets, collect migration
requests from clients, commit the best of them on the beacon chain, and
apply them at the epoch boundary.
"""

from __future__ import annotations

import logging
import math
import os
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .allocators import AllocatorKind, allocate_greedy_community, workload_oracle
from .metrics import EpochReport, MetricSeries
from .model import AccountShardMapping, SimParams, Transaction, validate_mapping
from .pilot import InteractionVector, WorkloadVector, decide, interaction_distribution
from .trace import EpochBatch, Trace, epoch_windows, sample_expected, split_by_blocks

log = logging.getLogger(__name__)

THREADS_ENV = "SHARDSIM_THREADS"


class EngineStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class MigrationRequest:
    account: str
    from_shard: int
    to_shard: int
    gain: float
    epoch: int
    index: int  # account index, for deterministic ordering

    def __post_init__(self) -> None:
        if self.from_shard == self.to_shard:
            raise ValueError("migration must change shard")
        if not self.gain > 0:
            raise ValueError("migration gain must be > 0")


@dataclass
class CommitResult:
    committed: list[Transaction]
    dropped: list[Transaction]
    consumed: WorkloadVector
    demand: WorkloadVector
    committed_intra: int = 0
    committed_cross: int = 0
    dropped_intra: int = 0
    dropped_cross: int = 0

    def __iter__(self):
        # unpacks as (committed, dropped, consumed)
        return iter((self.committed, self.dropped, self.consumed))


class InteractionHistory:
    """Per-account counterparty counts over a trailing window of epochs.

    ``window=None`` keeps everything. Counts are keyed by account index; an
    account stays active while it has any transaction inside the window.
    """

    def __init__(self, window: int | None = None):
        if window is not None and window < 1:
            raise ValueError("history window must be >= 1 epoch")
        self.window = window
        self.counts: dict[int, dict[int, int]] = {}
        self._activity: dict[int, int] = defaultdict(int)
        self._epochs: deque[tuple[list[int], list[tuple[int, int]]]] = deque()

    def add_epoch(self, txs: Iterable[Transaction], mapping: AccountShardMapping) -> None:
        seen, pairs = [], []
        counts, activity = self.counts, self._activity
        for tx in txs:
            idx = [mapping.register(a) for a in tx.accounts]
            for u in idx:
                activity[u] += 1
                row = counts.get(u)
                if row is None:
                    row = counts[u] = {}
                for v in idx:
                    if v != u:
                        row[v] = row.get(v, 0) + 1
                        pairs.append((u, v))
            seen.extend(idx)
        if self.window is not None:
            self._epochs.append((seen, pairs))
            while len(self._epochs) > self.window:
                self._expire(*self._epochs.popleft())

    def _expire(self, seen: list[int], pairs: list[tuple[int, int]]) -> None:
        counts, activity = self.counts, self._activity
        for u, v in pairs:
            row = counts[u]
            c = row[v] - 1
            if c:
                row[v] = c
            else:
                del row[v]
        for u in seen:
            activity[u] -= 1
            if activity[u] == 0:
                del activity[u]
                del counts[u]

    def active(self) -> list[int]:
        return sorted(self.counts)

    def vector(self, index: int, shards: Sequence[int], k: int) -> list[float]:
        vec = [0] * k
        row = self.counts.get(index)
        if row:
            for v, c in row.items():
                vec[shards[v] - 1] += c
        return vec


@dataclass
class SimState:
    mapping: AccountShardMapping
    history: InteractionHistory = field(default_factory=InteractionHistory)
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


@dataclass(frozen=True)
class EngineOptions:
    allocator: AllocatorKind = AllocatorKind.PILOT
    raw_fusion: bool = True
    noisy_mempool: float = 0.0
    threads: int = 1


def resolve_threads(value: str | None = None) -> int:
    """Worker count from ``SHARDSIM_THREADS``: unset means 1, 0 means cpu count."""
    raw = os.environ.get(THREADS_ENV) if value is None else value
    if raw is None or raw == "":
        return 1
    n = int(raw)
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    return n or (os.cpu_count() or 1)


def commit_transactions(batch: Iterable[Transaction], mapping: AccountShardMapping, lam: float, eta: float) -> CommitResult:
    """Commit in trace order against a per-shard budget of ``lam`` units.

    Intra txs cost 1 at their shard. Cross txs cost ``eta`` at every involved
    shard and commit only if all of them can pay; otherwise they are dropped
    and consume nothing.
    """
    k = mapping.k
    remaining = [float(lam)] * k
    demand = [0.0] * k
    committed, dropped = [], []
    ci = cc = di = dc = 0
    lookup = mapping.shard_of
    for tx in batch:
        shards = {lookup(a) - 1 for a in tx.accounts}
        if len(shards) == 1:
            s = next(iter(shards))
            demand[s] += 1
            if remaining[s] >= 1:
                remaining[s] -= 1
                committed.append(tx)
                ci += 1
            else:
                dropped.append(tx)
                di += 1
        else:
            for s in shards:
                demand[s] += eta
            if all(remaining[s] >= eta for s in shards):
                for s in shards:
                    remaining[s] -= eta
                committed.append(tx)
                cc += 1
            else:
                dropped.append(tx)
                dc += 1
    consumed = WorkloadVector(tuple(lam - r for r in remaining))
    return CommitResult(committed, dropped, consumed, WorkloadVector(tuple(demand)), ci, cc, di, dc)


def _lookahead(next_epoch: EpochBatch | Sequence[Transaction], state: SimState, noisy_mempool: float) -> list[Transaction]:
    txs = list(next_epoch)
    if noisy_mempool > 0 and txs:
        keep = state.rng.random(len(txs)) >= noisy_mempool
        txs = [tx for tx, kept in zip(txs, keep.tolist()) if kept]
    return txs


def propose_migrations(
    state: SimState,
    next_epoch: EpochBatch | Sequence[Transaction],
    params: SimParams,
    options: EngineOptions = EngineOptions(),
) -> list[MigrationRequest]:
    """Every account active in the history window (plus, with ``beta > 0``,
    every account in the lookahead) runs the client decision against the
    current mapping; those whose best shard differs propose a move.
    """
    mapping = state.mapping
    k, eta, beta = params.k, params.eta, params.beta
    mempool = _lookahead(next_epoch, state, options.noisy_mempool)
    # registers every lookahead account, so the fan-out below only reads
    omega = workload_oracle(mempool, mapping, eta)

    upcoming: dict[int, list[Transaction]] = defaultdict(list)
    if beta > 0:
        for tx in mempool:
            for a in tx.accounts:
                upcoming[mapping.index_of(a)].append(tx)
    candidates = sorted(set(state.history.active()) | set(upcoming))
    shards = mapping.shard_array()
    epoch = state.epoch

    def evaluate(chunk: list[int]) -> list[MigrationRequest]:
        out = []
        for idx in chunk:
            account = mapping.account_at(idx)
            hist = state.history.vector(idx, shards, k)
            if beta > 0 and upcoming.get(idx):
                expected = sample_expected(upcoming[idx], beta, seed=(params.seed, epoch, idx))
                exp = interaction_distribution(expected, account, mapping, k).counts
            else:
                exp = (0,) * k
            current = shards[idx]
            d = decide(hist, exp, omega, eta, beta, current, options.raw_fusion)
            if d.chosen != current and d.potential_gain > 0:
                out.append(MigrationRequest(account, current, d.chosen, d.potential_gain, epoch, idx))
        return out

    threads = max(1, options.threads)
    if threads == 1 or len(candidates) < 2 * threads:
        return evaluate(candidates)
    size = math.ceil(len(candidates) / threads)
    chunks = [candidates[i:i + size] for i in range(0, len(candidates), size)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(evaluate, chunks))
    return [mr for part in results for mr in part]


def commit_migrations(requests: Sequence[MigrationRequest], lam: float) -> list[MigrationRequest]:
    """Highest gain first (ties: smaller account index), at most floor(lam)."""
    ranked = sorted(requests, key=lambda r: (-r.gain, r.index))
    return ranked[: max(0, math.floor(lam))]


def reconfigure(state: SimState, committed: Sequence[MigrationRequest]) -> SimState:
    """Apply committed migrations in place and advance the epoch counter."""
    mapping = state.mapping
    for mr in committed:
        if mr.account not in mapping:
            raise EngineStateError(f"migration for unregistered account {mr.account!r}")
        if not 1 <= mr.to_shard <= mapping.k:
            raise EngineStateError(f"migration target {mr.to_shard} outside [1, {mapping.k}]")
        mapping.assign(mr.account, mr.to_shard)
    state.epoch += 1
    return state


def run_epoch(
    state: SimState,
    current_batch: EpochBatch | Sequence[Transaction],
    next_batch: EpochBatch | Sequence[Transaction],
    params: SimParams,
    options: EngineOptions = EngineOptions(),
) -> tuple[SimState, EpochReport]:
    res = commit_transactions(current_batch, state.mapping, params.lam, params.eta)
    if options.allocator is AllocatorKind.PILOT:
        state.history.add_epoch(res.committed, state.mapping)
        proposed = propose_migrations(state, next_batch, params, options)
    else:
        proposed = []
    committed = commit_migrations(proposed, params.lam)
    epoch = state.epoch
    reconfigure(state, committed)
    report = validate_mapping(state.mapping)
    if not report.ok:
        raise EngineStateError(f"mapping invalid after epoch {epoch}: {report.violations[:3]}")
    return state, EpochReport.build(
        epoch=epoch,
        committed_intra=res.committed_intra,
        committed_cross=res.committed_cross,
        dropped_intra=res.dropped_intra,
        dropped_cross=res.dropped_cross,
        omega=res.demand.loads,
        consumed=res.consumed.loads,
        lam=params.lam,
        proposed_mr=len(proposed),
        committed_mr=len(committed),
    )


@dataclass(frozen=True)
class RunSpec:
    """Everything a simulation run depends on besides the trace."""

    k: int = 16
    eta: float = 2.0
    tau: int = 300
    beta: float = 0.0
    seed: int = 0
    lam: float | None = None
    allocator: AllocatorKind = AllocatorKind.PILOT
    init: AllocatorKind = AllocatorKind.HASH
    epochs: int | None = None
    window: int | None = None
    warmup: float = 0.9
    noisy_mempool: float = 0.0
    raw_fusion: bool = True
    cap_factor: float = 1.1
    threads: int = 1


def initial_mapping(txs: Sequence[Transaction], kind: AllocatorKind, k: int, cap_factor: float) -> AccountShardMapping:
    if kind is AllocatorKind.GREEDY:
        return allocate_greedy_community(txs, k, cap_factor)
    if kind is AllocatorKind.HASH:
        mapping = AccountShardMapping(k)
        for tx in txs:
            for a in tx.accounts:
                mapping.register(a)
        return mapping
    raise ValueError(f"{kind.value} cannot produce an initial mapping")


def run_simulation(trace: Trace, spec: RunSpec, on_epoch=None) -> MetricSeries:
    """Warm up on the leading share of the trace, then evaluate epoch by epoch.

    The warmup segment seeds the initial allocation and (for pilot runs) the
    interaction history. Only full evaluation epochs are run; an incomplete
    trailing epoch is counted in the manifest and left out.
    """
    warm, evaluation, cut = split_by_blocks(trace, spec.warmup, spec.tau)
    if not evaluation.transactions:
        raise ValueError("evaluation segment is empty")
    last_block = trace.block_range[1]
    batches = epoch_windows(evaluation, spec.tau, start=cut)
    full = [b for b in batches if b.last_block <= last_block]
    tail_txs = sum(len(b) for b in batches if b.last_block > last_block)
    if not full:
        raise ValueError(f"evaluation segment holds no complete epoch of {spec.tau} blocks")
    if spec.epochs is not None:
        if spec.epochs > len(full):
            raise ValueError(f"requested {spec.epochs} epochs but the evaluation segment has {len(full)} complete epochs")
        run_batches = full[: spec.epochs]
    else:
        run_batches = full

    lam_derived = spec.lam is None
    lam = spec.lam if spec.lam is not None else sum(len(b) for b in full) / len(full) / spec.k
    if lam <= 0:
        raise ValueError("derived lambda is zero; evaluation epochs are empty")
    params = SimParams(k=spec.k, eta=spec.eta, tau=spec.tau, lam=lam, beta=spec.beta, seed=spec.seed)

    if spec.allocator is AllocatorKind.PILOT:
        init = spec.init
    else:
        init = spec.allocator
    mapping = initial_mapping(warm.transactions, init, spec.k, spec.cap_factor)
    state = SimState(mapping, InteractionHistory(spec.window), 0, np.random.default_rng(spec.seed))
    if spec.allocator is AllocatorKind.PILOT and warm.transactions:
        for batch in epoch_windows(warm, spec.tau, start=trace.block_range[0]):
            state.history.add_epoch(batch.transactions, mapping)

    options = EngineOptions(spec.allocator, spec.raw_fusion, spec.noisy_mempool, spec.threads)
    reports = []
    for pos, batch in enumerate(run_batches):
        nxt = batches[pos + 1].transactions if pos + 1 < len(batches) else ()
        state, rep = run_epoch(state, batch.transactions, nxt, params, options)
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep, state)
        log.debug("epoch %d cross=%.4f thr=%.3f mr=%d/%d", rep.epoch, rep.cross_ratio,
                  rep.normalized_throughput, rep.committed_mr, rep.proposed_mr)

    manifest = {
        "code_version": __version__,
        "params": {
            "k": spec.k, "eta": spec.eta, "tau": spec.tau, "beta": spec.beta,
            "lambda": lam, "lambda_derived": lam_derived, "seed": spec.seed,
        },
        "seed": spec.seed,
        "allocator": spec.allocator.label,
        "init": init.label,
        "init_note": "initial allocation from hash/greedy, not TxAllo",
        "window": spec.window,
        "warmup_fraction": spec.warmup,
        "warmup_split": "by blocks, aligned down to an epoch boundary",
        "eval_start_block": cut,
        "epochs": len(reports),
        "partial_tail_txs_excluded": tail_txs,
        "noisy_mempool": spec.noisy_mempool,
        "fusion": "raw" if spec.raw_fusion else "normalized",
        "cap_factor": spec.cap_factor,
        "mr_overflow": "discarded; clients re-propose next epoch",
        "trace_digest": trace.digest(),
        "trace_transactions": len(trace),
    }
    return MetricSeries(reports, manifest)
