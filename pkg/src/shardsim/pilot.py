"""Client-side shard selection.

An account summarises who it talks to as an interaction vector (how many of
its counterparties live in each shard), blends history with whatever it
knows about upcoming transactions, and scores every shard by a potential
``[(2*eta - 1) * psi_i - eta * psi] * omega_i``. The shard with the highest
potential is the one with the lowest processing cost for that account.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .model import AccountShardMapping, SimParams, Transaction

TIE_TOL = 1e-9


@dataclass(frozen=True)
class InteractionVector:
    counts: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.counts):
            raise ValueError(f"interaction counts must be non-negative: {self.counts}")

    @property
    def total(self) -> float:
        return sum(self.counts)

    def __len__(self) -> int:
        return len(self.counts)

    def scaled(self, c: float) -> "InteractionVector":
        return InteractionVector(tuple(x * c for x in self.counts))


@dataclass(frozen=True)
class WorkloadVector:
    loads: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.loads):
            raise ValueError(f"workloads must be non-negative: {self.loads}")

    def __len__(self) -> int:
        return len(self.loads)

    @classmethod
    def zeros(cls, k: int) -> "WorkloadVector":
        return cls((0.0,) * k)


@dataclass(frozen=True)
class PilotDecision:
    chosen: int
    potential_gain: float
    potentials: tuple[float, ...]


def _counts(v) -> Sequence[float]:
    return v.counts if isinstance(v, InteractionVector) else v


def _loads(v) -> Sequence[float]:
    return v.loads if isinstance(v, WorkloadVector) else v


def interaction_distribution(
    txs: Sequence[Transaction], account: str, mapping: AccountShardMapping, k: int
) -> InteractionVector:
    """Count, per shard, the counterparties of ``account`` across ``txs``.

    Counterparty shards come from the current mapping; unknown counterparties
    are resolved (and registered) through the hash fallback.
    """
    counts = [0] * k
    lookup = mapping.shard_of
    for tx in txs:
        accounts = tx.accounts
        if account not in accounts:
            raise ValueError(f"transaction {tx.seq} does not involve account {account!r}")
        for b in accounts:
            if b != account:
                counts[lookup(b) - 1] += 1
    return InteractionVector(tuple(counts))


def fuse(hist, expected, beta: float, raw: bool = False) -> InteractionVector:
    """Blend historical and expected interaction vectors with weight ``beta``.

    Both operands are scaled to unit total first (all-zero vectors stay
    zero) because a full history and one epoch of expectations differ in
    magnitude; ``raw=True`` mixes the unscaled counts instead.
    """
    h, e = _counts(hist), _counts(expected)
    if len(h) != len(e):
        raise ValueError(f"length mismatch: {len(h)} vs {len(e)}")
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if not raw:
        h = _unit(h)
        e = _unit(e)
    a = 1.0 - beta
    return InteractionVector(tuple(a * x + beta * y for x, y in zip(h, e)))


def _unit(v: Sequence[float]) -> Sequence[float]:
    total = sum(v)
    if total == 0:
        return [0.0] * len(v)
    return [x / total for x in v]


def cost(psi, omega, eta: float, i: int) -> float:
    """Processing cost of the account's transactions if it lived in shard ``i``."""
    p, w = _counts(psi), _loads(omega)
    j = i - 1
    others = sum(p) - p[j]
    remote = sum(p[q] * w[q] for q in range(len(p)) if q != j)
    return (p[j] + eta * others) * w[j] + eta * remote


def potential(psi, omega, eta: float, i: int) -> float:
    p, w = _counts(psi), _loads(omega)
    return ((2 * eta - 1) * p[i - 1] - eta * sum(p)) * w[i - 1]


def potentials(psi, omega, eta: float) -> list[float]:
    p, w = _counts(psi), _loads(omega)
    if len(p) != len(w):
        raise ValueError(f"length mismatch: {len(p)} vs {len(w)}")
    a = 2 * eta - 1
    b = eta * sum(p)
    return [(a * x - b) * y for x, y in zip(p, w)]


def choose_shard(values: Sequence[float], omega, current: int | None, tol: float = TIE_TOL) -> int:
    """1-based argmax of ``values`` with the tie-break used everywhere.

    Ties are values within ``tol`` (relative to the largest magnitude) of the
    maximum. Among tied shards: keep ``current``, else the smallest workload,
    else the smallest index.
    """
    w = _loads(omega)
    best = max(values)
    slack = tol * max(abs(best), abs(min(values)))
    floor = best - slack
    if current is not None and values[current - 1] >= floor:
        return current
    chosen, chosen_w = 0, 0.0
    for idx, v in enumerate(values):
        if v >= floor and (chosen == 0 or w[idx] < chosen_w):
            chosen, chosen_w = idx + 1, w[idx]
    return chosen


def decide(
    hist,
    expected,
    omega,
    eta: float,
    beta: float,
    current: int | None,
    raw_fusion: bool = True,
) -> PilotDecision:
    """Pick a shard from pre-computed interaction vectors.

    By default the raw counts are mixed. With ``raw_fusion=False`` the
    unit-total mix from :func:`fuse` is rescaled to the account's interaction
    volume (historical total, or expected total when there is no history);
    the choice is scale free, so this only keeps gains in interaction units
    and comparable across accounts when migrations compete for beacon-chain
    capacity. With ``beta == 0`` the history is used as is.
    """
    h, e = _counts(hist), _counts(expected)
    if beta == 0:
        psi = h
    elif raw_fusion:
        psi = fuse(h, e, beta, raw=True).counts
    else:
        unit = fuse(h, e, beta).counts
        volume = sum(h) or sum(e)
        psi = [x * volume for x in unit]
    pots = potentials(psi, omega, eta)
    chosen = choose_shard(pots, omega, current)
    gain = 0.0 if current is None or chosen == current else pots[chosen - 1] - pots[current - 1]
    return PilotDecision(chosen, max(gain, 0.0), tuple(pots))


def pilot_decide(
    account: str,
    hist_txs: Sequence[Transaction],
    expected_txs: Sequence[Transaction],
    mapping: AccountShardMapping,
    omega,
    params: SimParams,
    raw_fusion: bool = True,
) -> PilotDecision:
    """Run the full client decision for one account.

    An account missing from ``mapping`` has no current shard; ties then fall
    through to the least-loaded shard.
    """
    k = params.k
    current = mapping.get(account)
    hist = interaction_distribution(hist_txs, account, mapping, k)
    if params.beta > 0:
        exp = interaction_distribution(expected_txs, account, mapping, k)
    else:
        exp = InteractionVector((0,) * k)
    return decide(hist, exp, omega, params.eta, params.beta, current, raw_fusion)
