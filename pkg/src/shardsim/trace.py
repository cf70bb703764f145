"""Transaction traces: CSV loading, synthetic generators, epoch slicing."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import warnings
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .model import Transaction

TRACE_HEADER = ("block_number", "tx_index", "from", "to")


class TraceParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class UnsortedTraceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Trace:
    transactions: tuple[Transaction, ...]

    def __len__(self) -> int:
        return len(self.transactions)

    def __iter__(self):
        return iter(self.transactions)

    @property
    def block_range(self) -> tuple[int, int] | None:
        if not self.transactions:
            return None
        return self.transactions[0].block, self.transactions[-1].block

    def accounts(self) -> set[str]:
        return {a for tx in self.transactions for a in tx.accounts}

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_trace(self, buf)
        return buf.getvalue()

    def digest(self) -> str:
        """sha256 over one ``block,acct acct...`` line per transaction."""
        h = hashlib.sha256()
        for tx in self.transactions:
            h.update(f"{tx.block},{' '.join(tx.accounts)}\n".encode("utf-8"))
        return h.hexdigest()


@dataclass(frozen=True)
class EpochBatch:
    epoch_index: int
    first_block: int
    last_block: int
    transactions: tuple[Transaction, ...]

    def __len__(self) -> int:
        return len(self.transactions)

    def __iter__(self):
        return iter(self.transactions)


def make_trace(rows: Iterable[tuple[int, Sequence[str]]]) -> Trace:
    """Build a trace from (block, accounts) rows already in trace order."""
    txs = tuple(Transaction(seq, block, tuple(accounts)) for seq, (block, accounts) in enumerate(rows))
    return Trace(txs)


def load_trace(source: IO[bytes] | IO[str] | str | bytes) -> Trace:
    """Parse a ``block_number,tx_index,from,to`` CSV.

    Extra columns (value, gas, ...) are ignored. An empty ``to`` (contract
    creation) or ``from == to`` yields a single-account transaction. Input
    that is not sorted by (block_number, tx_index) is sorted, with an
    :class:`UnsortedTraceWarning`.
    """
    if isinstance(source, bytes):
        text = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        text = io.StringIO(source)
    else:
        data = source.read()
        text = io.StringIO(data.decode("utf-8") if isinstance(data, bytes) else data)

    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TraceParseError(1, "missing header") from None
    missing = [col for col in TRACE_HEADER if col not in header]
    if missing:
        raise TraceParseError(1, f"header lacks column(s) {', '.join(missing)}")
    cols = [header.index(col) for col in TRACE_HEADER]
    width = len(header)

    keyed = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != width:
            raise TraceParseError(line, f"expected {width} columns, got {len(row)}")
        blk, idx, frm, to = (row[c].strip() for c in cols)
        try:
            block = int(blk)
        except ValueError:
            raise TraceParseError(line, f"non-integer block_number {blk!r}") from None
        try:
            tx_index = int(idx)
        except ValueError:
            raise TraceParseError(line, f"non-integer tx_index {idx!r}") from None
        accounts = tuple(dict.fromkeys(a for a in (frm, to) if a))
        if not accounts:
            raise TraceParseError(line, "row has neither from nor to")
        keyed.append((block, tx_index, accounts))

    if any(keyed[i][:2] > keyed[i + 1][:2] for i in range(len(keyed) - 1)):
        warnings.warn("trace rows not sorted by (block_number, tx_index); sorting", UnsortedTraceWarning, stacklevel=2)
        keyed.sort(key=lambda r: (r[0], r[1]))
    return make_trace((block, accounts) for block, _, accounts in keyed)


def read_trace(path: str) -> Trace:
    with open(path, "rb") as fh:
        return load_trace(fh)


def write_trace(trace: Trace, out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    prev_block, pos = None, 0
    for tx in trace.transactions:
        if len(tx.accounts) > 2:
            raise ValueError(f"transaction {tx.seq} touches {len(tx.accounts)} accounts; CSV holds at most 2")
        pos = pos + 1 if tx.block == prev_block else 0
        prev_block = tx.block
        to = tx.accounts[1] if len(tx.accounts) == 2 else ""
        writer.writerow((tx.block, pos, tx.accounts[0], to))


def epoch_windows(trace: Trace | Sequence[Transaction], tau: int, start: int | None = None) -> list[EpochBatch]:
    """Slice into consecutive windows of ``tau`` blocks starting at ``start``.

    ``start`` defaults to the first block of the trace. Empty windows between
    populated ones are kept so epoch indices stay aligned with block time.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    txs = trace.transactions if isinstance(trace, Trace) else tuple(trace)
    if not txs:
        return []
    if start is None:
        start = txs[0].block
    if txs[0].block < start:
        raise ValueError(f"start block {start} is after the first transaction block {txs[0].block}")
    n_batches = (txs[-1].block - start) // tau + 1
    buckets: list[list[Transaction]] = [[] for _ in range(n_batches)]
    for tx in txs:
        buckets[(tx.block - start) // tau].append(tx)
    return [
        EpochBatch(e, start + e * tau, start + (e + 1) * tau - 1, tuple(b))
        for e, b in enumerate(buckets)
    ]


def split_by_blocks(trace: Trace, fraction: float, tau: int) -> tuple[Trace, Trace, int]:
    """Split at the first epoch boundary at or below ``fraction`` of the block range.

    Returns (warmup, evaluation, first evaluation block).
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"warmup fraction must be in [0, 1), got {fraction}")
    if not trace.transactions:
        return trace, trace, 0
    first, last = trace.block_range
    n_blocks = last - first + 1
    warm_blocks = (int(round(fraction * n_blocks)) // tau) * tau
    cut = first + warm_blocks
    warm = tuple(tx for tx in trace.transactions if tx.block < cut)
    rest = tuple(tx for tx in trace.transactions if tx.block >= cut)
    return Trace(warm), Trace(rest), cut


def gen_uniform(n_accounts: int, txs_per_block: int, n_blocks: int, seed: int = 0) -> Trace:
    """Every transaction joins two distinct accounts drawn uniformly."""
    if n_accounts < 2:
        raise ValueError("n_accounts must be >= 2")
    rng = np.random.default_rng(seed)
    n = txs_per_block * n_blocks
    a = rng.integers(0, n_accounts, size=n)
    b = rng.integers(0, n_accounts - 1, size=n)
    b = b + (b >= a)
    blocks = np.repeat(np.arange(n_blocks), txs_per_block)
    names = [f"a{i}" for i in range(n_accounts)]
    return make_trace(
        (int(blk), (names[x], names[y])) for blk, x, y in zip(blocks.tolist(), a.tolist(), b.tolist())
    )


def community_of(account: str) -> int:
    """Community index encoded in a :func:`gen_clustered` account name."""
    return int(account.split("_", 1)[0][1:])


def gen_clustered(
    n_communities: int,
    accounts_per_community: int,
    p_intra: float,
    txs_per_block: int,
    n_blocks: int,
    churn: float = 0.0,
    seed: int = 0,
) -> Trace:
    """Community-structured two-party trace.

    Each transaction picks a home community uniformly and a first endpoint in
    it. With probability ``p_intra`` the second endpoint is another member of
    the home community, otherwise it is uniform over all accounts. With
    probability ``churn`` per block, one transaction of that block has its
    second endpoint replaced by a brand-new account, which joins the home
    community and may be drawn by later transactions.

    Account names are ``c<community>_<member>`` and ``c<community>_n<serial>``
    for accounts created by churn.
    """
    if not 0 <= p_intra <= 1:
        raise ValueError("p_intra must be in [0, 1]")
    if not 0 <= churn <= 1:
        raise ValueError("churn must be in [0, 1]")
    if n_communities < 1 or accounts_per_community < 2:
        raise ValueError("need n_communities >= 1 and accounts_per_community >= 2")

    rng = np.random.default_rng(seed)
    names: list[str] = []
    pools: list[list[int]] = []
    for c in range(n_communities):
        pools.append(list(range(len(names), len(names) + accounts_per_community)))
        names.extend(f"c{c}_{m}" for m in range(accounts_per_community))
    n_new = 0

    rows = []
    for blk in range(n_blocks):
        homes = rng.integers(0, n_communities, size=txs_per_block).tolist()
        u1 = rng.random(txs_per_block).tolist()
        u2 = rng.random(txs_per_block).tolist()
        intra = (rng.random(txs_per_block) < p_intra).tolist()
        churn_hit = rng.random() < churn
        churn_slot = int(rng.integers(0, txs_per_block)) if txs_per_block else 0
        for t in range(txs_per_block):
            pool = pools[homes[t]]
            i1 = int(u1[t] * len(pool))
            g1 = pool[i1]
            if churn_hit and t == churn_slot:
                g2 = len(names)
                names.append(f"c{homes[t]}_n{n_new}")
                n_new += 1
                pool.append(g2)
            elif intra[t]:
                i2 = int(u2[t] * (len(pool) - 1))
                if i2 >= i1:
                    i2 += 1
                g2 = pool[i2]
            else:
                g2 = int(u2[t] * (len(names) - 1))
                if g2 >= g1:
                    g2 += 1
            rows.append((blk, (names[g1], names[g2])))
    return make_trace(rows)


def sample_expected(future_txs: Sequence[Transaction], beta: float, seed=0) -> list[Transaction]:
    """Uniform sample of round-half-up(beta * n) of ``future_txs``, in trace order."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    n = len(future_txs)
    m = math.floor(beta * n + 0.5)
    if m <= 0:
        return []
    if m >= n:
        return list(future_txs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = np.sort(rng.choice(n, size=m, replace=False))
    return [future_txs[i] for i in picked.tolist()]
