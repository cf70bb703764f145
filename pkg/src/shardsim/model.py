"""Core domain types: transactions, the account-shard mapping, classification.

Shard ids are 1-based integers in ``[1, k]``. Account ids are opaque strings,
interned to dense integer indices in registration order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence, Union


def hash_shard(account: str, k: int) -> int:
    """SHA-256 of the UTF-8 id, big-endian, mod k, 1-based."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    digest = hashlib.sha256(account.encode("utf-8")).digest()
    return int.from_bytes(digest, "big") % k + 1


@dataclass(frozen=True)
class Transaction:
    seq: int
    block: int
    accounts: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.accounts:
            raise ValueError("transaction must touch at least one account")
        if len(set(self.accounts)) != len(self.accounts):
            raise ValueError(f"duplicate accounts in transaction {self.seq}: {self.accounts}")
        if any(not a for a in self.accounts):
            raise ValueError(f"empty account id in transaction {self.seq}")


@dataclass(frozen=True)
class SimParams:
    k: int = 16
    eta: float = 2.0
    tau: int = 300
    lam: float = 1.0
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        errors = params_errors(self.k, self.eta, self.tau, self.lam, self.beta)
        if errors:
            field_name, msg = errors[0]
            raise ValueError(f"{field_name}: {msg}")


def params_errors(k, eta, tau, lam, beta) -> list[tuple[str, str]]:
    """Return (field, message) pairs for every violated parameter constraint."""
    errors = []
    if not isinstance(k, int) or k < 1:
        errors.append(("k", f"must be an integer >= 1, got {k!r}"))
    if not eta > 1:
        errors.append(("eta", f"must be > 1, got {eta!r}"))
    if not isinstance(tau, int) or tau < 1:
        errors.append(("tau", f"must be an integer >= 1, got {tau!r}"))
    if lam is not None and not lam > 0:
        errors.append(("lambda", f"must be > 0, got {lam!r}"))
    if not 0 <= beta <= 1:
        errors.append(("beta", f"must be in [0, 1], got {beta!r}"))
    return errors


class AccountShardMapping:
    """Total map account -> shard over all accounts registered so far.

    Unknown accounts resolve through :func:`hash_shard` and are registered on
    first lookup, so every account is always resolvable.  Registration order
    defines the account index used for tie-breaks and vector arithmetic.
    """

    def __init__(self, k: int, assignment: Mapping[str, int] | None = None):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.k = k
        self._index: dict[str, int] = {}
        self._ids: list[str] = []
        self._shards: list[int] = []
        if assignment:
            for account, shard in assignment.items():
                self.assign(account, shard)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, account: object) -> bool:
        return account in self._index

    def __iter__(self) -> Iterator[str]:
        return iter(self._ids)

    def items(self) -> Iterator[tuple[str, int]]:
        return zip(self._ids, self._shards)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self._ids, self._shards))

    def register(self, account: str) -> int:
        """Intern ``account`` (hash fallback shard if new) and return its index."""
        idx = self._index.get(account)
        if idx is None:
            if not account:
                raise ValueError("account id must be non-empty")
            idx = len(self._ids)
            self._index[account] = idx
            self._ids.append(account)
            self._shards.append(hash_shard(account, self.k))
        return idx

    def assign(self, account: str, shard: int) -> None:
        # Range is deliberately unchecked; validate_mapping reports breaches.
        idx = self._index.get(account)
        if idx is None:
            if not account:
                raise ValueError("account id must be non-empty")
            self._index[account] = len(self._ids)
            self._ids.append(account)
            self._shards.append(shard)
        else:
            self._shards[idx] = shard

    def index_of(self, account: str) -> int:
        return self._index[account]

    def account_at(self, index: int) -> str:
        return self._ids[index]

    def shard_at(self, index: int) -> int:
        return self._shards[index]

    def get(self, account: str) -> int | None:
        idx = self._index.get(account)
        return None if idx is None else self._shards[idx]

    def shard_of(self, account: str) -> int:
        idx = self._index.get(account)
        if idx is None:
            idx = self.register(account)
        return self._shards[idx]

    def shard_array(self) -> list[int]:
        """Shards indexed by account index (a copy)."""
        return list(self._shards)

    def copy(self) -> "AccountShardMapping":
        clone = AccountShardMapping(self.k)
        clone._index = dict(self._index)
        clone._ids = list(self._ids)
        clone._shards = list(self._shards)
        return clone

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AccountShardMapping):
            return NotImplemented
        return self.k == other.k and self._ids == other._ids and self._shards == other._shards

    def __repr__(self) -> str:
        return f"AccountShardMapping(k={self.k}, accounts={len(self)})"


def shard_of(mapping: AccountShardMapping, account: str) -> int:
    return mapping.shard_of(account)


@dataclass(frozen=True)
class Violation:
    account: str
    kind: str  # "unassigned" | "out_of_range"
    shard: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_mapping(mapping: AccountShardMapping, accounts: Iterable[str] | None = None) -> ValidationReport:
    """Check uniqueness and completeness of ``mapping`` over ``accounts``.

    With ``accounts=None`` every registered account is checked. Uniqueness
    holds by construction (one slot per interned id), so the checks that can
    fail are a missing assignment and a shard outside ``[1, k]``.
    """
    if accounts is None:
        accounts = list(mapping)
    violations = []
    for account in accounts:
        shard = mapping.get(account)
        if shard is None:
            violations.append(Violation(account, "unassigned"))
        elif not (isinstance(shard, int) and 1 <= shard <= mapping.k):
            violations.append(Violation(account, "out_of_range", shard))
    return ValidationReport(tuple(violations))


@dataclass(frozen=True)
class Intra:
    shard: int

    @property
    def is_cross(self) -> bool:
        return False

    @property
    def shards(self) -> frozenset[int]:
        return frozenset((self.shard,))


@dataclass(frozen=True)
class Cross:
    shards: frozenset[int] = field(default_factory=frozenset)

    @property
    def is_cross(self) -> bool:
        return True


Classification = Union[Intra, Cross]


def involved_shards(accounts: Sequence[str], mapping: AccountShardMapping) -> set[int]:
    return {mapping.shard_of(a) for a in accounts}


def classify_transaction(tx: Transaction, mapping: AccountShardMapping) -> Classification:
    shards = involved_shards(tx.accounts, mapping)
    if len(shards) == 1:
        return Intra(next(iter(shards)))
    return Cross(frozenset(shards))
