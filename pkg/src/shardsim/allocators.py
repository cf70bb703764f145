"""Allocation strategies and the workload oracle.

``GreedyCommunity`` is a non-faithful baseline: it is a simple label
propagation plus greedy bin packing, standing in for graph-partitioning
allocators such as Metis or TxAllo, and reports label it as such.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from typing import Iterable, Sequence

from .model import AccountShardMapping, Transaction, hash_shard
from .pilot import WorkloadVector

GREEDY_LABEL = "greedy (non-faithful baseline)"
LPA_MAX_ROUNDS = 20


class AllocatorKind(enum.Enum):
    HASH = "hash"
    GREEDY = "greedy"
    PILOT = "pilot"

    @property
    def label(self) -> str:
        return GREEDY_LABEL if self is AllocatorKind.GREEDY else self.value


def allocate_hash(account: str, k: int) -> int:
    return hash_shard(account, k)


def hash_mapping(accounts: Iterable[str], k: int) -> AccountShardMapping:
    mapping = AccountShardMapping(k)
    for a in accounts:
        mapping.register(a)
    return mapping


def interaction_graph(txs: Iterable[Transaction]) -> tuple[list[str], list[dict[int, int]]]:
    """Accounts in first-seen order and weighted adjacency (co-occurrence counts)."""
    index: dict[str, int] = {}
    ids: list[str] = []
    adj: list[dict[int, int]] = []
    for tx in txs:
        nodes = []
        for a in tx.accounts:
            i = index.get(a)
            if i is None:
                i = index[a] = len(ids)
                ids.append(a)
                adj.append({})
            nodes.append(i)
        for x in range(len(nodes)):
            for y in range(x + 1, len(nodes)):
                u, v = nodes[x], nodes[y]
                adj[u][v] = adj[u].get(v, 0) + 1
                adj[v][u] = adj[v].get(u, 0) + 1
    return ids, adj


def label_propagation(adj: Sequence[dict[int, int]], max_rounds: int = LPA_MAX_ROUNDS) -> list[int]:
    """Deterministic asynchronous label propagation.

    Labels start as node indices; nodes update in index order to the label
    with the largest incident weight, ties going to the node's current
    label and then to the smallest label.
    """
    labels = list(range(len(adj)))
    for _ in range(max_rounds):
        changed = False
        for u, nbrs in enumerate(adj):
            if not nbrs:
                continue
            score: dict[int, int] = defaultdict(int)
            for v, w in nbrs.items():
                score[labels[v]] += w
            top = max(score.values())
            if score.get(labels[u], 0) == top:
                continue
            labels[u] = min(lbl for lbl, s in score.items() if s == top)
            changed = True
        if not changed:
            break
    return labels


def allocate_greedy_community(txs: Sequence[Transaction], k: int, cap_factor: float = 1.1) -> AccountShardMapping:
    """Community detection followed by capacity-bounded greedy packing.

    Communities are placed by descending weight (sum of member degrees) into
    the lightest shard with room; a community larger than the room left is
    split, spilling members into the next lightest shards. At most
    ``ceil(cap_factor * |A| / k)`` accounts go to a shard.
    """
    if cap_factor < 1:
        raise ValueError(f"cap_factor must be >= 1, got {cap_factor}")
    ids, adj = interaction_graph(txs)
    mapping = AccountShardMapping(k)
    if not ids:
        return mapping
    cap = math.ceil(cap_factor * len(ids) / k)
    labels = label_propagation(adj)

    members: dict[int, list[int]] = defaultdict(list)
    for node, lbl in enumerate(labels):
        members[lbl].append(node)
    degree = [sum(nbrs.values()) for nbrs in adj]
    order = sorted(members, key=lambda lbl: (-sum(degree[n] for n in members[lbl]), lbl))

    count = [0] * k
    weight = [0] * k
    assigned = [0] * len(ids)
    for lbl in order:
        group = members[lbl]
        pos = 0
        while pos < len(group):
            open_shards = [s for s in range(k) if count[s] < cap]
            # prefer a shard that takes the whole remainder, then the lightest
            fits = [s for s in open_shards if cap - count[s] >= len(group) - pos]
            pool = fits or open_shards
            s = min(pool, key=lambda s: (weight[s], count[s], s)) if fits else max(pool, key=lambda s: (cap - count[s], -s))
            take = min(cap - count[s], len(group) - pos)
            for n in group[pos:pos + take]:
                assigned[n] = s + 1
                weight[s] += degree[n]
            count[s] += take
            pos += take
    for node, account in enumerate(ids):
        mapping.assign(account, assigned[node])
    return mapping


def workload_oracle(next_epoch_txs: Iterable[Transaction], mapping: AccountShardMapping, eta: float) -> WorkloadVector:
    """Per-shard workload of a batch: intra txs count 1, cross txs eta at each touched shard."""
    loads = [0.0] * mapping.k
    lookup = mapping.shard_of
    for tx in next_epoch_txs:
        accounts = tx.accounts
        if len(accounts) == 1:
            loads[lookup(accounts[0]) - 1] += 1
            continue
        shards = {lookup(a) for a in accounts}
        if len(shards) == 1:
            loads[shards.pop() - 1] += 1
        else:
            for s in shards:
                loads[s - 1] += eta
    return WorkloadVector(tuple(loads))
