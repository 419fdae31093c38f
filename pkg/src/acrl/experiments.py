"""One runner per experiment kind.

Runners take a parsed :class:`ExperimentConfig` and return an
:class:`ExperimentResult`: named tables (written as CSV by the CLI), heatmaps
and the list of checks with their status.  They do no file I/O themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    SoftmaxTabularPolicy,
    average_policy_from_trace,
    crossing_epochs,
    run_primal_dual,
    switch_delay_compare,
    switch_timing,
)
from .config import (
    ExperimentConfig,
    build_environment,
    exec_config,
    policy_layout,
    primal_dual_config,
    train_config,
)
from .dual import deficit_identity_check
from .envs import R1, ContinuousMonitoringEnv, TabularCmdp
from .executor import ExecConfig, ExecReport, execute_acrl, t0_bias_sweep
from .oracle import certify_primal_recovery_gap, certify_strong_duality, product_grid, solve_cmdp_lp
from .policy import ExactMaximizerPolicy, RbfPolicy, StaticTabularPolicy, TabularPolicy, evaluate_policy
from .trainer import train_acrl

PASS, FAIL, WARN = "PASS", "FAIL", "WARN"


@dataclass
class Check:
    name: str
    status: str
    detail: str

    @property
    def line(self) -> str:
        return f"{self.status} {self.name}: {self.detail}"


def check(name: str, ok: bool, detail: str, soft: bool = False) -> Check:
    return Check(name, PASS if ok else (WARN if soft else FAIL), detail)


@dataclass
class Heatmap:
    grid: np.ndarray  # (ny, nx), row 0 at the bottom
    extent: tuple[float, float, float, float]  # x0, y0, x1, y1
    regions: np.ndarray | None = None
    title: str = ""


@dataclass
class ExperimentResult:
    kind: str
    tables: dict[str, list[list]] = field(default_factory=dict)
    heatmaps: dict[str, Heatmap] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    values: dict[str, float] = field(default_factory=dict)
    reports: dict = field(default_factory=dict)  # in-memory objects for callers, never written

    @property
    def failed(self) -> bool:
        return any(c.status == FAIL for c in self.checks)


def _rows(gen) -> list[list]:
    return [list(r) for r in gen]


def _summary_rows(per_seed: dict[int, dict]) -> list[list]:
    keys = list(next(iter(per_seed.values())))
    return [["seed", *keys]] + [[seed, *(d[k] for k in keys)] for seed, d in per_seed.items()]


def _tabular_heatmap(mdp: TabularCmdp, occupancy: np.ndarray, title: str) -> Heatmap:
    grid = np.asarray(occupancy, dtype=float).reshape(1, -1)
    return Heatmap(grid, (0.0, 0.0, float(mdp.n_states), 1.0), None, title)


def _multiplier_bound(mdp: TabularCmdp, eta: float, slack: float, P_star: float) -> float:
    """Multiplier bound with the uniform policy as reference and configured slack ``slack``."""
    V0 = float(evaluate_policy(mdp, TabularPolicy.uniform(mdp))[0, mdp.initial])
    B, m = mdp.reward_bound, mdp.n_constraints
    return (P_star - V0 + eta * B * B / 2) / slack + eta * B * m


# ---------------------------------------------------------------- tabular A-CRL


def _acrl_seed(mdp: TabularCmdp, policy, cfg: ExecConfig) -> ExecReport:
    return execute_acrl(mdp, policy, cfg, probe_state=R1)


def run_tabular_acrl(cfg: ExperimentConfig) -> ExperimentResult:
    mdp = build_environment(cfg)
    chk = cfg.checks
    res = ExperimentResult(cfg.kind)
    P_star = solve_cmdp_lp(mdp).value
    policy = ExactMaximizerPolicy(mdp)
    per_seed, reports = {}, {}
    for seed in cfg.seeds:
        ec = exec_config(cfg, seed, record_epochs=True, record_steps=True)
        rep = _acrl_seed(mdp, policy, ec)
        reports[seed] = rep
        res.tables[f"dual_trace_seed{seed}"] = _rows(rep.dual.csv_rows())
        res.tables[f"steps_seed{seed}"] = _rows(rep.step_csv_rows())
        res.tables[f"running_average_seed{seed}"] = [["k"] + [f"running_avg_{i}" for i in range(mdp.n_constraints + 1)]] + [
            [k, *row] for k, row in enumerate(rep.average_path)
        ]
        res.heatmaps[f"occupancy_seed{seed}"] = _tabular_heatmap(mdp, rep.occupancy, f"state occupancy, seed {seed}")
        info = rep.summary()
        info["deficit_discrepancy"] = float(np.max(deficit_identity_check(rep.epochs, ec.eta_lambda), initial=0.0))
        t = switch_timing(rep, R1)
        crossings = crossing_epochs(rep.dual.lam)
        delays = [int(np.argmax(rep.probe[k:, R1] > 0.5)) if np.any(rep.probe[k:, R1] > 0.5) else -1 for k in crossings]
        info["crossings"] = len(crossings)
        info["max_switch_delay"] = max(delays) if delays else -1
        info["first_cross"] = -1 if t.k_lambda_cross is None else t.k_lambda_cross
        per_seed[seed] = info
    res.reports = reports
    res.tables["summary"] = _summary_rows(per_seed)

    eta = exec_config(cfg, cfg.seeds[0]).eta_lambda
    B = mdp.reward_bound
    bound = P_star - eta * B * B / 2
    worst_margin = min(d["min_margin"] for d in per_seed.values())
    worst_r0 = min(d["average_r0"] for d in per_seed.values())
    worst_slack = max(d["slackness_average"] for d in per_seed.values())
    worst_deficit = max(d["deficit_discrepancy"] for d in per_seed.values())
    res.values.update(P_star=P_star, objective_bound=bound, worst_margin=worst_margin, worst_r0=worst_r0)
    res.checks.append(check(
        "feasibility", worst_margin >= -chk["feasibility_tol"],
        f"min over {len(cfg.seeds)} seeds of min_i (Vbar_i - c_i) = {worst_margin:.6f} (tolerance {chk['feasibility_tol']})",
    ))
    res.checks.append(check(
        "optimality", worst_r0 >= bound - chk["objective_tol"],
        f"min Vbar_0 = {worst_r0:.6f} vs P* - eta B^2/2 = {bound:.6f} (tolerance {chk['objective_tol']})",
    ))
    res.checks.append(check(
        "slackness", worst_slack <= eta * B * B / 2 + chk["slackness_tol"],
        f"max slackness average = {worst_slack:.6f} vs eta B^2/2 = {eta * B * B / 2:.6f} (tolerance {chk['slackness_tol']})",
    ))
    res.checks.append(check(
        "deficit-identity", worst_deficit < chk["deficit_tol"],
        f"max discrepancy on projection-free prefixes = {worst_deficit:.3e}",
    ))
    crossed = [d for d in per_seed.values() if d["crossings"]]
    zero = all(d["max_switch_delay"] == 0 for d in crossed)
    res.checks.append(check(
        "switch-co-occurrence", zero,
        f"{len(crossed)} seeds cross lambda_1 = 1; switch delay 0 at every crossing: {zero}",
    ))
    lim = _multiplier_bound(mdp, eta, chk["reference_slack"], P_star)
    peak = max(d["max_lambda_l1"] for d in per_seed.values())
    res.checks.append(check(
        "dual-boundedness", peak <= lim,
        f"max ||lambda||_1 = {peak:.4f} vs bound {lim:.4f} with slack C = {chk['reference_slack']}", soft=True,
    ))
    return res


# ---------------------------------------------------------------- continuous A-CRL


def region_probe(policy: RbfPolicy, env: ContinuousMonitoringEnv, lam, region: int, n: int = 10) -> float:
    """Fraction of an ``n x n`` grid where the policy mean points toward the centre of ``region`` (1-based)."""
    xs = np.linspace(env.low[0], env.high[0], 2 * n + 1)[1::2]
    ys = np.linspace(env.low[1], env.high[1], 2 * n + 1)[1::2]
    pts = np.array([(x, y) for x in xs for y in ys])
    target = env.region_centers()[region - 1]
    mu = policy.mean(pts, np.broadcast_to(np.asarray(lam, dtype=float), (len(pts), env.n_constraints)))
    return float(np.mean(np.sum(mu * (target - pts), axis=1) > 0))


def build_rbf_policy(cfg: ExperimentConfig, env: ContinuousMonitoringEnv, lambda_max: float) -> RbfPolicy:
    return RbfPolicy.grid(env.low, env.high, env.n_constraints, lambda_max, **policy_layout(cfg))


def run_continuous_acrl(cfg: ExperimentConfig) -> ExperimentResult:
    env = build_environment(cfg)
    chk = cfg.checks
    res = ExperimentResult(cfg.kind)
    tc = train_config(cfg)
    policy = build_rbf_policy(cfg, env, tc.lambda_max)
    train = train_acrl(env, policy, tc)
    res.tables["training_curve"] = _rows(train.csv_rows())
    per_seed, reports = {}, {}
    occ = None
    for seed in cfg.seeds:
        rep = execute_acrl(env, policy, exec_config(cfg, seed))
        reports[seed] = rep
        res.tables[f"dual_trace_seed{seed}"] = _rows(rep.dual.csv_rows())
        per_seed[seed] = rep.summary()
        occ = rep.occupancy if occ is None else occ + rep.occupancy
    occ = occ / len(cfg.seeds)
    res.reports = {"executions": reports, "policy": policy, "training": train}
    res.tables["summary"] = _summary_rows(per_seed)
    nb = occ.shape[0]
    res.tables["occupancy"] = [["ix", "iy", "mass"]] + [[i, j, occ[i, j]] for i in range(nb) for j in range(occ.shape[1])]
    res.heatmaps["occupancy"] = Heatmap(
        occ.T, (env.low[0], env.low[1], env.high[0], env.high[1]), env.regions, "mean state occupancy"
    )
    margins = np.mean([rep.margins for rep in reports.values()], axis=0)
    res.values.update({f"mean_margin_{i + 1}": float(v) for i, v in enumerate(margins)})
    res.checks.append(check(
        "feasibility", bool(np.all(margins >= -chk["feasibility_tol"])),
        f"mean-over-seeds margins {np.array2string(margins, precision=4)} (tolerance {chk['feasibility_tol']})",
    ))
    region = int(chk["probe_region"])
    probe_lam = chk.get("probe_lambda")
    if probe_lam is None:
        probe_lam = np.zeros(env.n_constraints)
        probe_lam[region - 1] = tc.lambda_max
    frac = region_probe(policy, env, probe_lam, region)
    res.values["probe_fraction"] = frac
    res.checks.append(check(
        "behavioral-probe", frac >= chk["probe_fraction"],
        f"policy at lambda={np.asarray(probe_lam).tolist()} points toward region {region} on {frac:.0%} of the grid",
    ))
    mass = [float(np.mean([r.summary()[f"average_r{i + 1}"] for r in reports.values()])) for i in range(env.n_constraints)]
    res.checks.append(check(
        "occupancy-ordering", mass[0] > mass[-1],
        f"mean time in region 1 = {mass[0]:.4f}, region {env.n_constraints} = {mass[-1]:.4f}", soft=True,
    ))
    return res


# ---------------------------------------------------------------- primal-dual contrast


def run_primal_dual_contrast(cfg: ExperimentConfig) -> ExperimentResult:
    mdp = build_environment(cfg)
    chk = cfg.checks
    res = ExperimentResult(cfg.kind)
    acrl_policy = ExactMaximizerPolicy(mdp)
    rows = [["seed", "acrl_cross", "acrl_switch", "acrl_delay", "pd_cross", "pd_switch", "pd_delay",
             "acrl_peak_lambda_1", "pd_peak_lambda_1", "pd_average_r1"]]
    delays_ok = peaks_ok = 0
    pd_r1 = []
    comparisons = {}
    for seed in cfg.seeds:
        pc = primal_dual_config(cfg, seed, probe_state=R1)
        if "executor" in cfg.blocks:
            ec = exec_config(cfg, seed)
        else:  # matched budget: same dual step, epoch length and epoch count
            ec = ExecConfig(pc.eta_lambda, pc.T0, pc.epochs, seed, pc.lambda0)
        acrl = execute_acrl(mdp, acrl_policy, ec, probe_state=R1)
        pd = run_primal_dual(mdp, SoftmaxTabularPolicy(mdp), pc)
        cmp = switch_delay_compare(acrl, pd.execution, R1)
        comparisons[seed] = (acrl, pd, cmp)
        a, p = cmp.acrl, cmp.primal_dual
        if a.delay == 0 and p.delay is not None and p.delay > 0:
            delays_ok += 1
        if cmp.peak_primal_dual >= cmp.peak_acrl:
            peaks_ok += 1
        pd_r1.append(float(pd.execution.running_average[1]))
        res.tables[f"pd_dual_trace_seed{seed}"] = _rows(pd.execution.dual.csv_rows())
        rows.append([seed, *(-1 if v is None else v for v in (a.k_lambda_cross, a.k_policy_switch, a.delay,
                                                               p.k_lambda_cross, p.k_policy_switch, p.delay)),
                     cmp.peak_acrl, cmp.peak_primal_dual, pd_r1[-1]])
    res.tables["switch_delay"] = rows
    res.reports = comparisons
    n = len(cfg.seeds)
    need = int(np.ceil(chk["seed_fraction"] * n))
    res.values.update(delay_seeds=delays_ok, peak_seeds=peaks_ok, required=need)
    res.checks.append(check(
        "switch-delay", delays_ok >= need,
        f"primal-dual delay > 0 and A-CRL delay = 0 in {delays_ok}/{n} seeds (need {need})",
    ))
    res.checks.append(check(
        "transient-peak", peaks_ok >= need,
        f"primal-dual peak lambda_1 >= A-CRL peak in {peaks_ok}/{n} seeds (need {need})",
    ))
    mean_r1 = float(np.mean(pd_r1))
    res.checks.append(check(
        "primal-dual-average", abs(mean_r1 - mdp.thresholds[0]) <= 0.03,
        f"seed-mean running average of r_1 under primal-dual = {mean_r1:.4f} (range {min(pd_r1):.4f}..{max(pd_r1):.4f})",
        soft=True,
    ))
    return res


# ---------------------------------------------------------------- oracle certificates


def run_oracle_certify(cfg: ExperimentConfig) -> ExperimentResult:
    mdp = build_environment(cfg)
    chk = cfg.checks
    opts = {"grid_high": 3.0, "grid_step": 0.05, "refine_step": 0.001}
    opts.update(cfg.block("oracle"))
    res = ExperimentResult(cfg.kind)
    sol = solve_cmdp_lp(mdp)
    grid = product_grid(0.0, opts["grid_high"], opts["grid_step"], mdp.n_constraints)
    probe = certify_strong_duality(mdp, grid, refine_step=opts["refine_step"])
    cert = certify_primal_recovery_gap(mdp, tol=chk["inclusion_tol"])
    res.reports = {"solution": sol, "duality": probe, "recovery": cert}
    res.values.update(P_star=sol.value, D_star=probe.min_value, gap=probe.gap)
    res.tables["dual_function"] = _rows(probe.csv_rows())
    res.tables["occupation"] = [["state", "action", "rho"]] + [
        [s, a, sol.rho[s, a]] for s in range(mdp.n_states) for a in range(mdp.n_actions)
    ]
    res.tables["certificate"] = [["line"]] + [[ln] for ln in cert.lines()]
    res.heatmaps["occupation"] = _tabular_heatmap(mdp, sol.state_occupation, "optimal state occupation")
    res.checks.append(check(
        "strong-duality", abs(probe.gap) < chk["duality_tol"],
        f"min d(lambda) - P* = {probe.gap:.3e} (P* = {sol.value:.12f})",
    ))
    res.checks.append(check(
        "weak-duality", probe.weak_duality_violation <= chk["duality_tol"],
        f"largest d(lambda) below P* on the grid: {probe.weak_duality_violation:.3e}",
    ))
    target = chk.get("argmin_target")
    if target is not None:
        dist = float(np.max(np.abs(probe.argmin - np.asarray(target, dtype=float))))
        res.checks.append(check(
            "dual-argmin", dist <= chk["argmin_tol"],
            f"argmin {np.array2string(probe.argmin, precision=4)} is {dist:.4f} from {target}",
        ))
    res.checks.append(check(
        "optimum-in-maximizer-set", cert.inclusion_error < chk["inclusion_tol"],
        f"|L(pi*, lambda*) - d(lambda*)| = {cert.inclusion_error:.3e}",
    ))
    res.checks.append(check(
        "recovery-strict", cert.strict,
        "infeasible deterministic maximizer found" if cert.strict else "no infeasible maximizer at lambda*",
    ))
    return res


# ---------------------------------------------------------------- epoch-length sweep


def run_t0_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    mdp = build_environment(cfg)
    chk = cfg.checks
    sweep = cfg.block("sweep")
    res = ExperimentResult(cfg.kind)
    policy = ExactMaximizerPolicy(mdp)
    m = mdp.n_constraints
    rows = [["seed", "T0", "epochs", *(f"margin_{i + 1}" for i in range(m)), "average_r0", "slackness_average"]]
    worst = np.inf
    for seed in cfg.seeds:
        out = t0_bias_sweep(mdp, policy, exec_config(cfg, seed), sweep["T0_values"], sweep.get("total_steps"))
        for r in out:
            rows.append([seed, r.T0, r.epochs, *r.margins, r.average_r0, r.slackness])
            worst = min(worst, float(r.margins.min()))
    res.tables["t0_sweep"] = rows
    res.values["worst_margin"] = worst
    res.checks.append(check(
        "feasibility-across-T0", worst >= -chk["feasibility_tol"],
        f"worst margin over T0 in {sweep['T0_values']} and {len(cfg.seeds)} seeds = {worst:.5f}",
    ))
    return res


# ---------------------------------------------------------------- primal averaging


def run_primal_average(cfg: ExperimentConfig) -> ExperimentResult:
    mdp = build_environment(cfg)
    chk = cfg.checks
    opts = {"steps": 100_000, "T0": 10}
    opts.update(cfg.block("averaging"))
    res = ExperimentResult(cfg.kind)
    policy = ExactMaximizerPolicy(mdp)
    m = mdp.n_constraints
    rows = [["seed", *(f"margin_{i + 1}" for i in range(m)), "average_r0", "exact_min_margin",
             "visit_weighted_exact_min_margin"]]
    worst, reports = np.inf, {}
    for seed in cfg.seeds:
        ec = exec_config(cfg, seed, record_steps=True)
        run = execute_acrl(mdp, policy, ec)
        avg = average_policy_from_trace(policy, run.dual.lam)
        # diagnostic only: the same run's empirical state-action frequencies as a policy
        visit = visit_weighted_policy(mdp, run.steps.states, run.steps.actions)
        visit_margin = float(np.min(evaluate_policy(mdp, visit)[1:, mdp.initial] - mdp.thresholds))
        exact_margin = float(np.min(evaluate_policy(mdp, avg.to_tabular())[1:, mdp.initial] - mdp.thresholds))
        frozen = StaticTabularPolicy(avg.to_tabular())
        static_cfg = ExecConfig(ec.eta_lambda, opts["T0"], max(1, opts["steps"] // opts["T0"]), seed)
        rep = execute_acrl(mdp, frozen, static_cfg)
        reports[seed] = (run, avg, rep)
        rows.append([seed, *rep.margins, rep.running_average[0], exact_margin, visit_margin])
        worst = min(worst, float(rep.margins.min()))
        res.tables[f"averaged_policy_seed{seed}"] = [["state", *(f"p_action_{a}" for a in range(mdp.n_actions))]] + [
            [s, *avg.probs[s]] for s in range(mdp.n_states)
        ]
    res.tables["averaged_execution"] = rows
    res.reports = reports
    res.values["worst_margin"] = worst
    res.values["worst_exact_margin"] = min(r[-2] for r in rows[1:])
    res.values["worst_visit_weighted_margin"] = min(r[-1] for r in rows[1:])
    res.checks.append(check(
        "averaged-policy-feasibility", worst >= -chk["feasibility_tol"],
        f"frozen averaged policy over {opts['steps']} steps: worst margin {worst:.5f}",
    ))
    return res


def visit_weighted_policy(mdp: TabularCmdp, states, actions) -> TabularPolicy:
    """Empirical ``N(s, a) / N(s)`` from a trajectory; unvisited states act uniformly."""
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    np.add.at(counts, (np.asarray(states), np.asarray(actions)), 1.0)
    uniform = TabularPolicy.uniform(mdp).probs
    n = counts.sum(axis=1, keepdims=True)
    return TabularPolicy(np.where(n > 0, counts / np.maximum(n, 1.0), uniform))


RUNNERS = {
    "tabular-acrl": run_tabular_acrl,
    "continuous-acrl": run_continuous_acrl,
    "primal-dual": run_primal_dual_contrast,
    "oracle-certify": run_oracle_certify,
    "t0-sweep": run_t0_sweep,
    "primal-average": run_primal_average,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg)
