"""Client-driven account allocation for sharded blockchains: a trace-driven
epoch simulator with the Pilot shard-selection rule and simple baselines."""

__version__ = "0.1.0"

from .allocators import AllocatorKind, allocate_greedy_community, allocate_hash, workload_oracle
from .engine import (
    MigrationRequest,
    RunSpec,
    SimState,
    commit_migrations,
    commit_transactions,
    propose_migrations,
    reconfigure,
    run_epoch,
    run_simulation,
)
from .metrics import EpochReport, MetricSeries, cross_shard_ratio, normalized_throughput, workload_deviation
from .model import (
    AccountShardMapping,
    Cross,
    Intra,
    SimParams,
    Transaction,
    classify_transaction,
    shard_of,
    validate_mapping,
)
from .pilot import InteractionVector, PilotDecision, WorkloadVector, cost, fuse, interaction_distribution, pilot_decide, potential
from .trace import Trace, epoch_windows, gen_clustered, gen_uniform, load_trace, sample_expected
