"""End-to-end acceptance checks.

Each test records one PASS/FAIL line; the lines are echoed as they happen
and repeated in the pytest terminal summary.
"""

import math
import os
import random
import statistics
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from shardsim.allocators import AllocatorKind
from shardsim.engine import RunSpec, run_simulation
from shardsim.metrics import aggregate, cross_shard_ratio, workload_deviation
from shardsim.model import AccountShardMapping, SimParams, Transaction, classify_transaction, validate_mapping
from shardsim.pilot import decide, pilot_decide
from shardsim.trace import gen_clustered, gen_uniform

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []
EPOCH_CHECKS: list[tuple[str, int, bool, bool, bool]] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)


def checked_run(name, trace, spec):
    """run_simulation plus per-epoch budget, cap and partition checks."""

    def hook(rep, state):
        budget_ok = all(c <= rep.lam + 1e-9 for c in rep.consumed)
        cap_ok = rep.committed_mr <= math.floor(rep.lam)
        EPOCH_CHECKS.append((name, rep.epoch, budget_ok, cap_ok, validate_mapping(state.mapping).ok))

    t0 = time.perf_counter()
    series = run_simulation(trace, spec, on_epoch=hook)
    return series, time.perf_counter() - t0


# --- shared runs -------------------------------------------------------------

@pytest.fixture(scope="module")
def uniform_run():
    trace = gen_uniform(10_000, 100, 1000, seed=7)
    assert len(trace) == 100_000
    # 100 epochs of 1000 txs; lambda = epoch size / k
    spec = RunSpec(k=16, eta=2.0, tau=10, allocator=AllocatorKind.HASH, warmup=0.0, lam=1000 / 16)
    return checked_run("uniform/hash", trace, spec)


CLUSTERED_4 = dict(n_communities=16, accounts_per_community=32, p_intra=0.9, txs_per_block=5, n_blocks=50_100, seed=1)


@pytest.fixture(scope="module")
def structured_runs():
    trace = gen_clustered(churn=0.01, **CLUSTERED_4)
    base = dict(k=16, eta=2.0, tau=100, beta=0.0, epochs=50, init=AllocatorKind.HASH)
    t0 = time.perf_counter()
    hashed, _ = checked_run("clustered/hash", trace, RunSpec(allocator=AllocatorKind.HASH, **base))
    pilot, _ = checked_run("clustered/pilot", trace, RunSpec(allocator=AllocatorKind.PILOT, **base))
    return hashed, pilot, time.perf_counter() - t0


@pytest.fixture(scope="module")
def beta_sweep():
    trace = gen_clustered(churn=0.05, **CLUSTERED_4)
    out = {}
    for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
        series, _ = checked_run(f"beta={beta}", trace, RunSpec(k=4, eta=2.0, tau=100, beta=beta, seed=1, epochs=50))
        out[beta] = series
    return out


# --- criteria ----------------------------------------------------------------

def _pairwise_signs(x):
    d = x[:, :, None] - x[:, None, :]
    return np.sign(d)


def _tie_break_pick(values, omega, current, best_is_max):
    """Shared tie-break on exact integers: current, then min omega, then min index."""
    target = values.max(axis=1, keepdims=True) if best_is_max else values.min(axis=1, keepdims=True)
    tied = values == target
    n, k = values.shape
    rows = np.arange(n)
    keep = tied[rows, current]
    big = np.iinfo(np.int64).max
    masked = np.where(tied, omega, big)
    low = masked.min(axis=1, keepdims=True)
    first = np.argmax(tied & (masked == low), axis=1)
    return np.where(keep, current, first)


def test_criterion_1_cost_potential_equivalence():
    rng = np.random.default_rng(2024)
    n_total = 100_000
    t0 = time.perf_counter()
    ks = rng.integers(2, 65, size=n_total)
    ok = True
    mismatched_lib = 0
    lib_sample = []
    for k in np.unique(ks):
        n = int((ks == k).sum())
        # eta = e/1000 in (1, 10], omega = w/1000 in (0, 100]; everything is
        # scaled by 1e6 so the comparison runs on exact int64 values
        e = rng.integers(1001, 10_001, size=(n, 1)).astype(np.int64)
        w = rng.integers(1, 100_001, size=(n, k)).astype(np.int64)
        psi = rng.integers(0, 101, size=(n, k)).astype(np.int64)
        total = psi.sum(axis=1, keepdims=True)
        weighted = (psi * w).sum(axis=1, keepdims=True)
        cost = (1000 * psi + e * (total - psi)) * w + e * (weighted - psi * w)
        pot = ((2 * e - 1000) * psi - e * total) * w
        if not np.array_equal(_pairwise_signs(cost), -_pairwise_signs(pot)):
            ok = False
        current = rng.integers(0, k, size=n)
        by_cost = _tie_break_pick(cost, w, current, best_is_max=False)
        by_pot = _tie_break_pick(pot, w, current, best_is_max=True)
        ok &= bool(np.array_equal(by_cost, by_pot))
        for j in range(min(n, 40)):
            lib_sample.append((psi[j], w[j], int(e[j, 0]), int(current[j]), int(by_cost[j])))
    # the float decision routine agrees with the exact oracle
    for psi, w, e, current, want in lib_sample:
        d = decide(psi.tolist(), [0] * len(psi), (w / 1000).tolist(), e / 1000, 0.0, current + 1)
        mismatched_lib += d.chosen != want + 1
    elapsed = time.perf_counter() - t0
    ok = ok and mismatched_lib == 0 and elapsed < 10
    record(1, ok, f"{n_total} exact instances, {len(lib_sample)} checked through decide "
                  f"({mismatched_lib} mismatches), {elapsed:.2f}s")
    assert ok


def test_criterion_2_random_cross_ratio(uniform_run):
    series, _ = uniform_run
    mean = aggregate(series.reports)["cross_ratio"]
    ok = abs(mean - 0.9375) <= 0.01
    record(2, ok, f"mean cross ratio {mean:.4f} (target 0.9375 +/- 0.01) over {len(series.reports)} epochs")
    assert ok


def test_criterion_3_random_throughput(uniform_run):
    series, elapsed = uniform_run
    mean = aggregate(series.reports)["normalized_throughput"]
    ok = abs(mean - 4.21) <= 0.15 * 4.21 and elapsed < 60
    record(3, ok, f"mean normalized throughput {mean:.3f} (4.21 +/- 15%), {elapsed:.1f}s")
    assert ok


def test_criterion_4_pilot_beats_hash(structured_runs):
    hashed, pilot, elapsed = structured_runs
    h_cross = aggregate(hashed.reports[-10:])["cross_ratio"]
    p_cross = aggregate(pilot.reports[-10:])["cross_ratio"]
    h_thr = aggregate(hashed.reports)["normalized_throughput"]
    p_thr = aggregate(pilot.reports)["normalized_throughput"]
    ok = len(pilot.reports) == 50 and p_cross <= 0.5 * h_cross and p_thr > h_thr and elapsed < 300
    record(4, ok, f"last-10 cross pilot {p_cross:.4f} vs hash {h_cross:.4f}; "
                  f"throughput pilot {p_thr:.3f} vs hash {h_thr:.3f}; {elapsed:.1f}s")
    assert ok


def test_criterion_5_beta_trend(beta_sweep):
    means = {b: aggregate(s.reports)["cross_ratio"] for b, s in beta_sweep.items()}
    sweep = ", ".join(f"beta={b:g}: {m:.4f}" for b, m in means.items())
    ok = means[0.75] <= means[0.0]
    record(5, ok, f"mean cross ratio {sweep}")
    assert ok


def test_criterion_6_decision_latency():
    rnd = random.Random(6)
    k = 16
    accounts = [f"acc{i}" for i in range(2000)]
    mapping = AccountShardMapping(k, {a: rnd.randint(1, k) for a in accounts})
    params = SimParams(k=k, eta=2.0, lam=100.0)
    omega = [float(rnd.randint(1, 500)) for _ in range(k)]
    cases = []
    for c in range(200):
        me = accounts[c]
        txs = [Transaction(t, 0, (me, accounts[rnd.randrange(200, 2000)])) for t in range(rnd.randint(1, 100))]
        cases.append((me, txs))
    for me, txs in cases:  # warm-up
        pilot_decide(me, txs, (), mapping, omega, params)
    calls = 100_000
    t0 = time.perf_counter()
    for i in range(calls):
        me, txs = cases[i % len(cases)]
        pilot_decide(me, txs, (), mapping, omega, params)
    mean_us = (time.perf_counter() - t0) / calls * 1e6
    ok = mean_us < 100
    record(6, ok, f"mean pilot_decide latency {mean_us:.1f} us (|T| <= 100, k=16, {calls} calls)")
    assert ok


def test_criterion_7_budget_and_caps(uniform_run, structured_runs, beta_sweep):
    runs = {name for name, *_ in EPOCH_CHECKS}
    bad = [(name, ep) for name, ep, b, c, v in EPOCH_CHECKS if not (b and c and v)]
    ok = not bad and len(runs) >= 8
    record(7, ok, f"{len(EPOCH_CHECKS)} epochs across {len(runs)} runs, {len(bad)} violations")
    assert ok


def test_criterion_8_metric_oracles():
    rnd = random.Random(8)
    worst = 0.0
    for _ in range(1000):
        k = rnd.randint(1, 64)
        omega = [rnd.uniform(0, 1000) for _ in range(k)]
        mean = statistics.fmean(omega)
        brute = math.sqrt(statistics.pvariance(omega) / mean) if mean > 0 else 0.0
        worst = max(worst, abs(workload_deviation(omega) - brute))
    dev_ok = worst <= 1e-9

    exact_ok = True
    for _ in range(1000):
        k = rnd.randint(1, 5)
        names = [f"x{i}" for i in range(rnd.randint(1, 8))]
        mapping = AccountShardMapping(k, {a: rnd.randint(1, k) for a in names})
        txs = [Transaction(t, 0, tuple(rnd.sample(names, rnd.randint(1, len(names))))) for t in range(rnd.randint(1, 12))]
        cross = 0
        for tx in txs:
            shards = [mapping.get(a) for a in tx.accounts]
            is_cross = any(s != shards[0] for s in shards)
            c = classify_transaction(tx, mapping)
            exact_ok &= c.is_cross == is_cross and set(c.shards) == set(shards)
            cross += is_cross
        exact_ok &= Fraction(cross_shard_ratio(len(txs) - cross, cross)) == Fraction(cross / len(txs))
    ok = dev_ok and exact_ok
    record(8, ok, f"deviation max abs error {worst:.2e}; classification/ratio exact: {exact_ok}")
    assert ok


def test_criterion_9_cli_determinism(tmp_path):
    gen = "clustered:n_communities=8,accounts_per_community=16,p_intra=0.9,txs_per_block=10,n_blocks=2000,churn=0.02,seed=3"
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "shardsim", "simulate", "--gen", gen, "--k", "8", "--tau", "20",
               "--beta", "0.5", "--out", str(out), "--run-id", "same"]
        proc = subprocess.run(cmd, capture_output=True, text=True, env={**os.environ, "SHARDSIM_THREADS": "2"})
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "same.metrics.csv").read_bytes())
    ok = outputs[0] == outputs[1] and outputs[0].count(b"\n") > 1
    record(9, ok, f"two simulate invocations, metrics CSV byte-identical: {outputs[0] == outputs[1]}")
    assert ok


def test_criterion_10_scale_invariance():
    rnd = random.Random(10)
    changed = 0
    n = 10_000
    for _ in range(n):
        k = rnd.randint(2, 32)
        hist = [rnd.randint(0, 50) * rnd.random() for _ in range(k)]
        exp = [rnd.randint(0, 50) * rnd.random() for _ in range(k)]
        omega = [rnd.uniform(0.01, 100) for _ in range(k)]
        eta, beta, current = rnd.uniform(1.01, 10), rnd.choice([0.0, rnd.random()]), rnd.randint(1, k)
        c = rnd.uniform(0, 1000) or 1000.0
        base = decide(hist, exp, omega, eta, beta, current).chosen
        scaled = decide([x * c for x in hist], [x * c for x in exp], omega, eta, beta, current).chosen
        changed += base != scaled
    ok = changed == 0
    record(10, ok, f"{n} instances, chosen shard changed under scaling in {changed}")
    assert ok
