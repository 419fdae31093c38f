"""Acceptance checks, one test per criterion, each with its runtime budget.

Every test records a PASS/FAIL line that pytest prints in an "acceptance
criteria" section at the end of the run.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from acrl.baselines import (
    PrimalDualConfig,
    SoftmaxTabularPolicy,
    average_policy_from_trace,
    crossing_epochs,
    run_primal_dual,
    switch_delay_compare,
)
from acrl.cli import main
from acrl.config import load_config, parse_config
from acrl.dual import deficit_identity_check
from acrl.envs import R1, monitoring_mdp3
from acrl.executor import ExecConfig, execute_acrl
from acrl.experiments import run_continuous_acrl
from acrl.oracle import certify_primal_recovery_gap, certify_strong_duality, solve_cmdp_lp
from acrl.policy import ExactMaximizerPolicy, RbfPolicy, StaticTabularPolicy, rbf_logprob_grad

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
THIRD = 1.0 / 3.0
SEEDS = list(range(20))


@pytest.fixture(scope="module")
def mdp():
    return monitoring_mdp3()


@pytest.fixture(scope="module")
def monitoring_runs(mdp):
    """Criterion 4 runs: eta = 0.5, T0 = 10, K = 1000, lambda_0 = 0, 20 seeds."""
    policy = ExactMaximizerPolicy(mdp)
    t0 = time.perf_counter()
    runs = {
        seed: execute_acrl(mdp, policy, ExecConfig(0.5, 10, 1000, seed, lambda0=[0.0, 0.0], record_epochs=True),
                           probe_state=R1)
        for seed in SEEDS
    }
    return runs, time.perf_counter() - t0


def test_criterion_01_oracle_exactness(mdp, criteria):
    t0 = time.perf_counter()
    sol = solve_cmdp_lp(mdp)
    elapsed = time.perf_counter() - t0
    err_v = abs(sol.value - THIRD)
    err_occ = float(np.max(np.abs(sol.state_occupation - THIRD)))
    ok = err_v < 1e-9 and err_occ < 1e-9 and elapsed < 1.0
    criteria.record(1, ok, f"|P* - 1/3| = {err_v:.1e}, occupation error {err_occ:.1e}, {elapsed:.3f} s")
    assert ok


def test_criterion_02_strong_duality(mdp, criteria):
    t0 = time.perf_counter()
    probe = certify_strong_duality(mdp, refine_step=0.001)
    elapsed = time.perf_counter() - t0
    dist = float(np.max(np.abs(probe.argmin - 1.0)))
    on_box = probe.grid.min() == 0.0 and probe.grid.max() == 3.0
    ok = abs(probe.gap) < 1e-6 and dist <= 0.01 and on_box and elapsed < 10.0
    criteria.record(2, ok, f"|min d - P*| = {abs(probe.gap):.1e}, argmin {probe.argmin.tolist()}, {elapsed:.2f} s")
    assert ok


def test_criterion_03_primal_recovery_strictness(mdp, criteria):
    t0 = time.perf_counter()
    cert = certify_primal_recovery_gap(mdp)
    elapsed = time.perf_counter() - t0
    ok = cert.inclusion_error < 1e-9 and cert.strict and cert.witness is not None and elapsed < 1.0
    witness = cert.witness.probs.argmax(axis=1).tolist() if cert.witness is not None else None
    criteria.record(
        3, ok,
        f"|L(pi*,l*) - d(l*)| = {cert.inclusion_error:.1e}, infeasible maximizer {witness} "
        f"(violation {cert.witness_violation:.3f}), {elapsed:.3f} s",
    )
    assert ok


def test_criterion_04_monitoring_reproduction(monitoring_runs, criteria):
    runs, elapsed = monitoring_runs
    bound = 2.0 / 9.0 - 0.02
    worst_c = min(float(r.running_average[1:].min()) for r in runs.values())
    worst_0 = min(float(r.running_average[0]) for r in runs.values())
    ok = worst_c >= THIRD - 0.02 and worst_0 >= bound and elapsed < 10.0
    criteria.record(4, ok, f"min Vbar_1,2 = {worst_c:.4f}, min Vbar_0 = {worst_0:.4f} over 20 seeds, {elapsed:.2f} s")
    assert ok


def test_criterion_05_switch_cooccurrence(monitoring_runs, criteria):
    runs, _ = monitoring_runs
    crossed, bad = 0, []
    for seed, rep in runs.items():
        ks = crossing_epochs(rep.dual.lam)
        if ks.size:
            crossed += 1
        # the probe's stay-probability must exceed 1/2 in the crossing epoch itself
        bad += [(seed, int(k)) for k in ks if not rep.probe[k, R1] > 0.5]
    ok = crossed > 0 and not bad
    criteria.record(5, ok, f"{crossed}/20 seeds cross lambda_1 = 1; crossings with nonzero delay: {len(bad)}")
    assert ok


def test_criterion_06_complementary_slackness(monitoring_runs, criteria):
    runs, _ = monitoring_runs
    worst = max(r.slackness for r in runs.values())
    ok = worst <= 1.0 / 9.0 + 0.05
    criteria.record(6, ok, f"max slackness average = {worst:.4f} (limit {1 / 9 + 0.05:.4f})")
    assert ok


def test_criterion_07_memory_identity(monitoring_runs, criteria):
    runs, _ = monitoring_runs
    worst = max(float(deficit_identity_check(r.epochs, 0.5).max()) for r in runs.values())
    ok = worst < 1e-12
    criteria.record(7, ok, f"max deficit-identity discrepancy = {worst:.2e}")
    assert ok


def test_criterion_08_gradient_correctness(criteria):
    rng = np.random.default_rng(2024)
    pol = RbfPolicy.grid([0, 0], [10, 10], 2, 3.0, n_spatial=2, n_lambda=2, sigma=0.6)
    h = 1e-5
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        pol.theta = rng.normal(size=pol.theta.shape)
        s, lam = rng.uniform(0, 10, 2), rng.uniform(0, 3, 2)
        a = pol.sample(s, lam, rng)
        g = rbf_logprob_grad(pol, s, lam, a)
        base = pol.theta.copy()
        num = np.zeros_like(base)
        for idx in np.ndindex(*base.shape):
            pol.theta = base.copy()
            pol.theta[idx] += h
            up = pol.log_prob(s, lam, a)
            pol.theta[idx] -= 2 * h
            num[idx] = (up - pol.log_prob(s, lam, a)) / (2 * h)
        pol.theta = base
        worst = max(worst, float(np.linalg.norm(g - num) / np.linalg.norm(num)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 1.0
    criteria.record(8, ok, f"max relative error {worst:.1e} over 100 instances, {elapsed:.2f} s")
    assert ok


@pytest.mark.slow
def test_criterion_09_continuous_desk_scale(criteria):
    cfg = load_config(CONFIGS / "continuous.toml")
    tc, ec = cfg.blocks["trainer"], cfg.blocks["executor"]
    assert (tc["iterations"], tc["horizon"], tc["step_size"]) == (50000, 20, 0.001)
    assert (ec["epochs"] * ec["T0"], ec["eta_lambda"], ec["T0"]) == (20000, 0.01, 1)
    assert len(cfg.seeds) == 10
    t0 = time.perf_counter()
    res = run_continuous_acrl(cfg)
    elapsed = time.perf_counter() - t0
    margins = np.array([res.values[f"mean_margin_{i}"] for i in range(1, 5)])
    frac = res.values["probe_fraction"]
    ok = bool(np.all(margins >= -0.03)) and frac >= 0.9 and elapsed < 600
    criteria.record(
        9, ok,
        f"mean margins {np.round(margins, 4).tolist()}, probe toward region 1 on {frac:.0%}, {elapsed:.0f} s",
    )
    assert ok


@pytest.mark.slow
def test_criterion_10_primal_dual_contrast(mdp, criteria):
    # matched budgets: both methods run 40,000 epochs of 10 steps with the same dual step
    policy = ExactMaximizerPolicy(mdp)
    delay_ok = peak_ok = 0
    t0 = time.perf_counter()
    for seed in SEEDS:
        acrl = execute_acrl(mdp, policy, ExecConfig(0.0025, 10, 40_000, seed), probe_state=R1)
        pd = run_primal_dual(mdp, SoftmaxTabularPolicy(mdp),
                             PrimalDualConfig(0.025, 0.0025, 10, 40_000, seed, probe_state=R1))
        cmp = switch_delay_compare(acrl, pd.execution, R1)
        if cmp.acrl.delay == 0 and cmp.primal_dual.delay is not None and cmp.primal_dual.delay > 0:
            delay_ok += 1
        if cmp.peak_primal_dual >= cmp.peak_acrl:
            peak_ok += 1
    elapsed = time.perf_counter() - t0
    ok = delay_ok >= 15 and peak_ok >= 15 and elapsed < 120
    criteria.record(10, ok, f"delay contrast in {delay_ok}/20 seeds, peak contrast in {peak_ok}/20, {elapsed:.0f} s")
    assert ok


@pytest.mark.xfail(strict=True, reason="per-state averaging of maximizers is not feasible here; see the ledger")
def test_criterion_11_primal_averaging(mdp, criteria):
    t0 = time.perf_counter()
    policy = ExactMaximizerPolicy(mdp)
    run = execute_acrl(mdp, policy, ExecConfig(0.5, 10, 1000, 0))
    avg = average_policy_from_trace(policy, run.dual.lam)
    frozen = execute_acrl(mdp, StaticTabularPolicy(avg.to_tabular()), ExecConfig(0.5, 10, 10_000, 0))
    elapsed = time.perf_counter() - t0
    worst = float(frozen.margins.min())
    ok = worst >= -0.02 and elapsed < 5.0
    criteria.record(11, ok, f"frozen averaged policy over 1e5 steps: margins {np.round(frozen.margins, 4).tolist()}, "
                            f"{elapsed:.2f} s")
    assert ok


DETERMINISM_CONFIGS = {
    "tabular-acrl": ("monitoring-acrl.toml", {"epochs = 1000": "epochs = 200"}),
    "primal-dual": ("primal-dual.toml", {"epochs = 40000": "epochs = 3000"}),
    "oracle-certify": ("oracle.toml", {"grid_step = 0.05": "grid_step = 0.25"}),
    "t0-sweep": ("t0-sweep.toml", {"total_steps = 10000": "total_steps = 2000"}),
    "primal-average": ("primal-average.toml", {"steps = 100000": "steps = 5000"}),
    "continuous-acrl": ("continuous.toml", {"iterations = 50000": "iterations = 200", "epochs = 20000": "epochs = 300"}),
}


def test_criterion_12_determinism(tmp_path, criteria):
    mismatched, compared = [], 0
    for kind, (name, edits) in DETERMINISM_CONFIGS.items():
        text = (CONFIGS / name).read_text()
        for old, new in edits.items():
            assert old in text
            text = text.replace(old, new)
        text = text.replace("seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]",
                            "seeds = [0, 7]").replace("seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]", "seeds = [0, 7]")
        parse_config(text)
        cfg = tmp_path / f"{kind}.toml"
        cfg.write_text(text)
        outs = []
        for run in ("first", "second"):
            main(["run", str(cfg), "--output-root", str(tmp_path / run)])
            outs.append(tmp_path / run)
        csvs = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
        assert csvs
        for rel in csvs:
            compared += 1
            if (outs[0] / rel).read_bytes() != (outs[1] / rel).read_bytes():
                mismatched.append(str(rel))
    ok = not mismatched
    criteria.record(12, ok, f"{compared} CSV files from {len(DETERMINISM_CONFIGS)} experiment kinds; "
                            f"byte mismatches: {mismatched or 'none'}")
    assert ok
