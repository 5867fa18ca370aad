"""Experiment driver: configuration, equal-cost allocation, alpha sweeps,
replication studies, theory reports, and CSV/JSON emission.

Sample budgets are expressed in high-fidelity equivalents: a budget of B
buys the reference estimator B high-fidelity evaluations, and every other
estimator gets sample counts whose total cost
``n_HF * cost_ratio + n_LF`` matches ``B * cost_ratio`` up to flooring.
All randomness derives from one seed through numbered streams, so reports
are byte-identical across runs and worker-thread counts.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import theory
from ._util import parallel_map
from .cross_entropy import EMConfig, ce_fit
from .densities import FailureConditional, RngStream, importance_weights
from .estimators import (
    BatchPlan,
    acv_mc_estimate,
    ensemble_acv_is,
    ensemble_cv_is,
    ensemble_cv_mc,
    is_estimate,
)
from .models import (
    ModelPair,
    analytic_pair,
    beam_pair,
    calibrate_thresholds,
    equicorrelated_rho,
    intermediate_threshold_model,
    plate_pair,
    synthetic_gaussian_family,
)

__all__ = [
    "ExperimentConfig",
    "Report",
    "allocate_equal_cost",
    "prepare_problem",
    "run_alpha_sweep",
    "run_theory_validation",
    "run_experiment",
    "replicated_ensemble_estimates",
    "main",
]

#: default low-to-high-fidelity allocation ratios and cost ratios per problem
PROBLEM_DEFAULTS = {
    "analytic": {"cost_ratio": 30.0, "lf_hf_ratio": 4.5},
    "beam": {"cost_ratio": 11.0, "lf_hf_ratio": 4.0},
    "plate": {"cost_ratio": 37.0, "lf_hf_ratio": 4.5},
    "synthetic": {"cost_ratio": 30.0, "lf_hf_ratio": 4.5},
}

_SWEEP_COLUMNS = [
    "alpha",
    "v_cv_ratio", "v_cv_stderr",
    "v_is_ratio", "v_is_stderr",
    "v_bar_cv_ratio", "v_bar_cv_stderr",
    "v_bar_is_ratio", "v_bar_is_stderr",
]
_EXPERIMENT_COLUMNS = [
    "name", "n_hf", "n_lf", "estimate", "empirical_variance",
    "variance_ratio_vs_mfis", "alpha", "stderr_of_mean", "cost", "status",
]
_THEOREM2_COLUMNS = [
    "K", "scheme", "predicted_ratio", "empirical_ratio", "stderr",
    "bound_B", "reduction_guaranteed", "empirical_below_one",
]


@dataclass
class ExperimentConfig:
    """Everything a driver run needs; mirrors the JSON config file."""

    problem: str = "analytic"
    em: EMConfig = field(default_factory=EMConfig)
    plan: BatchPlan = field(default_factory=lambda: BatchPlan(K=50, n=20))
    budget: int = 5000
    cost_ratio: float | None = None
    lf_hf_ratio: float | None = None
    alpha_grid: list[float] | None = None
    replications: int = 200
    seed: int = 0
    threads: int = 1
    problem_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEM_DEFAULTS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.budget <= 0 or self.replications < 1:
            raise ValueError("budget must be positive and replications >= 1")
        defaults = PROBLEM_DEFAULTS[self.problem]
        if self.cost_ratio is None:
            self.cost_ratio = defaults["cost_ratio"]
        if self.lf_hf_ratio is None:
            self.lf_hf_ratio = defaults["lf_hf_ratio"]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        if "em" in doc and isinstance(doc["em"], dict):
            doc["em"] = EMConfig(**doc["em"])
        if "plan" in doc and isinstance(doc["plan"], dict):
            plan = dict(doc["plan"])
            if plan.get("r") is not None:
                plan["r"] = tuple(plan["r"])
            doc["plan"] = BatchPlan(**plan)
        return cls(**doc)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Report:
    """Schema-stable result table plus theory annotations.

    ``estimates`` holds raw per-replication arrays for downstream
    statistical tests; it is not serialised.
    """

    kind: str
    columns: list[str]
    rows: list[dict]
    theory: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "meta": self.meta,
            "theory": self.theory,
            "columns": self.columns,
            "rows": self.rows,
        }, indent=2)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([row.get(col, "") for col in self.columns])


def allocate_equal_cost(budget_nhf: int, cost_ratio: float, scheme: str,
                        rho_alloc: float = 1.0) -> tuple[int, int]:
    """Sample counts matching the reference cost ``budget_nhf * cost_ratio``.

    MFIS keeps the full high-fidelity budget.  The CV scheme shares every
    sample between both models: ``n_HF = floor(B w / (w + 1))``, ``n_LF =
    n_HF``.  ACV schemes hold ``rho_alloc`` low-fidelity samples per
    high-fidelity one: ``n_HF = floor(B w / (w + rho))``,
    ``n_LF = floor(rho * n_HF)``.
    """
    if budget_nhf < 1:
        raise ValueError("budget must be positive")
    if cost_ratio <= 1.0:
        raise ValueError("cost_ratio must exceed 1")
    if scheme == "MFIS":
        return int(budget_nhf), 0
    if scheme == theory.CV:
        if rho_alloc != 1.0:
            raise ValueError("CV shares samples: rho_alloc must be 1")
        n_hf = int(np.floor(budget_nhf * cost_ratio / (cost_ratio + 1.0)))
        return n_hf, n_hf
    if scheme in (theory.ACV_IS, theory.ACV_MF):
        if rho_alloc < 1.0:
            raise ValueError("ACV allocation needs rho_alloc >= 1")
        n_hf = int(np.floor(budget_nhf * cost_ratio / (cost_ratio + rho_alloc)))
        return n_hf, int(np.floor(rho_alloc * n_hf))
    raise ValueError(f"unknown scheme {scheme!r}")


def prepare_problem(cfg: ExperimentConfig, rng: RngStream):
    """Build the model pair, fit the biasing density, and resolve mu1.

    Returns ``(pair, q_hat, mu1, offline)`` where ``offline`` records the
    setup work (threshold calibration, biasing fit, reference run for the
    control mean) that is excluded from the online cost comparison.
    """
    opts = cfg.problem_options
    offline: dict = {}
    if cfg.problem == "analytic":
        pair = analytic_pair(
            l0=opts.get("l0", 3.0), l1=opts.get("l1", 2.8),
            cost_ratio=cfg.cost_ratio,
        )
    elif cfg.problem == "synthetic":
        rho = opts.get("correlation", 0.9)
        fam = synthetic_gaussian_family([rho], costs=[cfg.cost_ratio, 1.0])
        pair = ModelPair(fam.models[0], fam.models[1], fam.input_density,
                         name="synthetic", extras={"family": fam})
    elif cfg.problem in ("beam", "plate"):
        builder = beam_pair if cfg.problem == "beam" else plate_pair
        pair = builder(cost_ratio=cfg.cost_ratio, threads=cfg.threads)
        if "thresholds" in opts:
            l0, l1 = opts["thresholds"]
        else:
            pf_hf = opts.get("target_pf_hf", 0.02)
            pf_lf = opts.get("target_pf_lf", 0.03)
            n_ref_hf = int(opts.get("n_ref_hf", np.ceil(100.0 / pf_hf)))
            n_ref_lf = int(opts.get("n_ref_lf", np.ceil(100.0 / pf_lf)))
            l0, pf0 = calibrate_thresholds(pair.hf, pair.input_density, pf_hf,
                                           n_ref_hf, rng.stream(90))
            l1, pf1 = calibrate_thresholds(pair.lf, pair.input_density, pf_lf,
                                           n_ref_lf, rng.stream(91))
            offline["calibration"] = {
                "l0": l0, "achieved_pf_hf": pf0, "n_ref_hf": n_ref_hf,
                "l1": l1, "achieved_pf_lf": pf1, "n_ref_lf": n_ref_lf,
            }
        pair = ModelPair(pair.hf.with_threshold(l0), pair.lf.with_threshold(l1),
                         pair.input_density, name=pair.name, extras=pair.extras)
    else:  # pragma: no cover - guarded by ExperimentConfig
        raise ValueError(cfg.problem)

    if cfg.problem == "analytic" and opts.get("proposal_threshold") is not None:
        # exact rejection-sampled conditional at an intermediate threshold:
        # fixed-proposal studies with controlled distance from the target
        level = float(opts["proposal_threshold"])
        ref = intermediate_threshold_model(level)
        q_hat = FailureConditional(pair.input_density, ref, mass=ref.mean)
        offline["proposal"] = {"kind": "conditional", "threshold": level}
    elif pair.lf.is_failure_model:
        q_hat = ce_fit(pair.lf, pair.input_density, cfg.em, rng.stream(92))
        offline["ce_levels"] = "converged"
    else:
        q_hat = None  # synthetic QoI study: plain MC baselines

    if pair.lf.mean is not None:
        mu1 = float(pair.lf.mean)
    else:
        n_mu1 = int(opts.get("n_ref_mu1", 100_000))
        mu1, var_mu1, _ = is_estimate(pair.lf, pair.input_density, q_hat,
                                      rng.stream(93), n_mu1)
        offline["mu1_reference"] = {"n": n_mu1, "mu1": mu1,
                                    "stderr": float(np.sqrt(var_mu1))}
    return pair, q_hat, mu1, offline


def _pilot_moments(pair, q_hat, rng: RngStream, n_pilot: int = 40_000):
    """Per-sample second moments of the weighted model outputs under q_hat."""
    gen = rng.generator()
    z = q_hat.sample(gen, n_pilot)
    w = importance_weights(pair.input_density, q_hat, z)
    y0 = pair.hf.response(z) * w
    y1 = pair.lf.response(z) * w
    cov = np.cov(np.column_stack([y0, y1]), rowvar=False, ddof=1)
    return {"var0": float(cov[0, 0]), "var1": float(cov[1, 1]),
            "cov": float(cov[0, 1])}


def _variance_ratio_stderr(ratio: float, n_num: int, n_den: int) -> float:
    """Delta-method stderr of a ratio of two independent sample variances."""
    return float(abs(ratio) * np.sqrt(2.0 / max(n_num - 1, 1)
                                      + 2.0 / max(n_den - 1, 1)))


def _paired_ratio_stderr(est_num: np.ndarray, est_den: np.ndarray) -> np.ndarray:
    """Delta-method stderr of ``var(num)/var(den)`` with paired replications.

    Uses the empirical second and fourth moments, so it stays valid for
    the heavy-tailed squared errors of rare-event IS estimators and
    credits the common-random-number correlation between the two columns.
    """
    num = np.atleast_2d(np.asarray(est_num, dtype=float))
    den = np.broadcast_to(np.asarray(est_den, dtype=float), num.shape)
    r = num.shape[0]
    u = (num - num.mean(axis=0)) ** 2
    w = (den - den.mean(axis=0)) ** 2
    ub, wb = u.mean(axis=0), w.mean(axis=0)
    ratio = ub / wb
    rel = (u.var(axis=0) / ub**2 + w.var(axis=0) / wb**2
           - 2.0 * ((u - ub) * (w - wb)).mean(axis=0) / (ub * wb))
    return np.abs(ratio) * np.sqrt(np.maximum(rel, 0.0) / r)


def run_alpha_sweep(cfg: ExperimentConfig,
                    include_ensembles: bool = True) -> Report:
    """Empirical variance of the hybrid estimators over a grid of weights.

    Per grid point the fixed-weight estimators are replicated
    ``cfg.replications`` times at equal online cost and their variances
    normalised by the replicated MFIS variance; the ensemble estimators
    (estimated weight) contribute constant reference rows.
    ``include_ensembles=False`` skips those rows (their replications double
    the high-fidelity work, which matters for the PDE problems at desk
    scale).
    """
    rng = RngStream(cfg.seed)
    pair, q_hat, mu1, offline = prepare_problem(cfg, rng)
    if q_hat is None:
        raise ValueError("alpha sweeps need an importance-sampling problem")
    p = pair.input_density
    w_cost = cfg.cost_ratio
    n0 = int(cfg.budget)
    n_cv, _ = allocate_equal_cost(n0, w_cost, theory.CV, 1.0)
    n_acv, n_acv_lf = allocate_equal_cost(n0, w_cost, theory.ACV_IS,
                                          cfg.lf_hf_ratio)
    m_extra = n_acv_lf - n_acv
    R = cfg.replications
    # FEM models thread internally over solves; avoid nesting pools
    rep_threads = 1 if cfg.problem in ("beam", "plate") else cfg.threads

    default_pilot = 40_000 if cfg.problem in ("analytic", "synthetic") else 4000
    moments = _pilot_moments(pair, q_hat, rng.stream(94),
                             n_pilot=int(cfg.problem_options.get(
                                 "n_pilot", default_pilot)))
    lo, hi = theory.weight_range(cov=moments["cov"], var=moments["var1"])
    if cfg.alpha_grid is not None:
        grid = np.asarray(cfg.alpha_grid, dtype=float)
    else:
        pad = 0.45 * max(hi - lo, 1e-12)
        grid = np.linspace(lo - pad, hi + pad, 21)

    def pooled_rep(i):
        """All fixed-weight estimators on one draw pool (common random numbers).

        The empirical variance of IS estimators for rare events is very
        heavy-tailed, so variance comparisons pair the estimators on shared
        draws; each estimator's marginal law is untouched.
        """
        gen = rng.stream(3_000_000 + i).generator()
        n_hf_pool = max(n0, n_cv, n_acv)
        n_lf_pool = max(n_cv, n_acv + m_extra)
        z = q_hat.sample(gen, max(n_hf_pool, n_lf_pool))
        wts = importance_weights(p, q_hat, z)
        y0 = pair.hf.response(z[:n_hf_pool]) * wts[:n_hf_pool]
        y1 = pair.lf.response(z[:n_lf_pool]) * wts[:n_lf_pool]
        mu1_hat = float(np.mean(y1[:n_acv + m_extra]))
        return (float(np.mean(y0[:n0])),
                float(np.mean(y0[:n_cv])), float(np.mean(y1[:n_cv])),
                float(np.mean(y0[:n_acv])), float(np.mean(y1[:n_acv])),
                mu1_hat)

    pooled = np.array(parallel_map(pooled_rep, R, rep_threads))
    v0_ests = pooled[:, 0]
    mf = pooled[:, 1:3]
    acv = pooled[:, 3:6]
    v0 = float(v0_ests.var(ddof=1))

    est_cv = mf[:, [0]] + grid[None, :] * (mf[:, [1]] - mu1)
    est_is = acv[:, [0]] + grid[None, :] * (acv[:, [1]] - acv[:, [2]])
    v_cv = est_cv.var(axis=0, ddof=1)
    v_is = est_is.var(axis=0, ddof=1)
    paired_cv = _paired_ratio_stderr(est_cv, v0_ests[:, None])
    paired_is = _paired_ratio_stderr(est_is, v0_ests[:, None])

    k = cfg.plan.K
    plan_cv = BatchPlan(K=k, n=max(1, n_cv // k), scheme=theory.CV)
    plan_is = BatchPlan(K=k, n=max(1, n_acv // k), m=max(1, m_extra // k),
                        scheme=theory.ACV_IS)

    if include_ensembles:
        def bar_cv_rep(i):
            return ensemble_cv_is(pair, q_hat, mu1, plan_cv,
                                  rng.stream(6_000_000 + i)).estimate

        def bar_is_rep(i):
            return ensemble_acv_is(pair, q_hat, plan_is,
                                   rng.stream(7_000_000 + i)).estimate

        vbar_cv = float(np.array(parallel_map(bar_cv_rep, R,
                                              rep_threads)).var(ddof=1))
        vbar_is = float(np.array(parallel_map(bar_is_rep, R,
                                              rep_threads)).var(ddof=1))
    else:
        vbar_cv = vbar_is = float("nan")

    rows = []
    for idx, alpha in enumerate(grid):
        rows.append({
            "alpha": float(alpha),
            "v_cv_ratio": float(v_cv[idx] / v0),
            "v_cv_stderr": float(paired_cv[idx]),
            "v_is_ratio": float(v_is[idx] / v0),
            "v_is_stderr": float(paired_is[idx]),
            "v_bar_cv_ratio": vbar_cv / v0,
            "v_bar_cv_stderr": _variance_ratio_stderr(vbar_cv / v0, R, R),
            "v_bar_is_ratio": vbar_is / v0,
            "v_bar_is_stderr": _variance_ratio_stderr(vbar_is / v0, R, R),
        })
    theory_info = {
        "weight_range": [lo, hi],
        "alpha_star": float(-moments["cov"] / moments["var1"]),
        "pilot_moments": moments,
    }
    meta = {
        "problem": cfg.problem, "budget": n0, "replications": R,
        "n_cv": n_cv, "n_acv": n_acv, "n_acv_lf": n_acv_lf,
        "seed": cfg.seed, "offline": offline,
    }
    estimate_arrays = {
        "MFIS": v0_ests,
        "MF": est_cv,       # (replications, len(grid))
        "MF-ACV": est_is,
        "alpha_grid": grid,
    }
    return Report("alpha_sweep", _SWEEP_COLUMNS, rows, theory_info, meta,
                  estimates=estimate_arrays)


def replicated_ensemble_estimates(models, p, plan: BatchPlan, replications: int,
                                  seed: int, means=None, threads: int = 1,
                                  base_stream: int = 0) -> np.ndarray:
    """Independent replicated ensemble estimates on Monte Carlo baselines.

    CV plans need the controls' exact ``means``; ACV plans estimate the
    control means from their partition's extra samples.
    """
    def one(i):
        rng = RngStream(seed, base_stream + i)
        if plan.scheme == theory.CV:
            return ensemble_cv_mc(models, p, means, plan, rng).estimate
        return acv_mc_estimate(models, p, plan, rng).estimate

    return np.array(parallel_map(one, replications, threads))


def run_theory_validation(m: int, k_grid, r2: float, scheme: str, r=None,
                          replications: int = 2000, n: int = 50,
                          seed: int = 0, threads: int = 1) -> Report:
    """Empirical vs. predicted ensemble variance ratios on synthetic models.

    Builds the equicorrelated linear-Gaussian family reaching the requested
    multiple correlation, replicates the ensemble estimator at each K, and
    reports the ratio to the exact equal-budget Monte Carlo variance next
    to the closed-form prediction and the minimum-K bound.
    """
    rho = equicorrelated_rho(m, r2)
    fam = synthetic_gaussian_family(np.full(m, rho))
    rr = None if scheme == theory.CV else np.atleast_1d(r)
    r2_scheme = theory.r_squared(scheme, fam.stats, rr)
    k_min = theory.min_ensembles(scheme, r2_scheme, m, rr)
    rows = []
    for k in np.atleast_1d(k_grid).astype(int):
        plan = BatchPlan(K=int(k), n=n, scheme=scheme,
                         r=None if rr is None else tuple(rr))
        ests = replicated_ensemble_estimates(
            fam.models, fam.input_density, plan, replications, seed,
            means=fam.means[1:], threads=threads, base_stream=1000 * int(k))
        base_var = fam.stats.var0 / (n * k)
        ratio = float(ests.var(ddof=1) / base_var)
        try:
            pred = theory.variance_ratio_prediction(scheme, r2_scheme, m,
                                                    int(k), rr)
        except Exception:
            pred = float("nan")
        rows.append({
            "K": int(k), "scheme": scheme,
            "predicted_ratio": pred, "empirical_ratio": ratio,
            "stderr": float(ratio * np.sqrt(2.0 / (replications - 1))),
            "bound_B": k_min - 1,
            "reduction_guaranteed": bool(k >= k_min),
            "empirical_below_one": bool(ratio < 1.0),
        })
    theory_info = {"r_squared_cv": r2, "r_squared_scheme": r2_scheme,
                   "k_min": k_min, "rho": rho}
    meta = {"m": m, "n": n, "replications": replications, "seed": seed}
    return Report("theorem2_validation", _THEOREM2_COLUMNS, rows, theory_info,
                  meta)


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Replicated equal-cost comparison: MFIS vs. hybrid CV/ACV estimators.

    The biasing density is fitted once (offline, excluded from the online
    cost like the threshold calibration and the control-mean reference
    run); each estimator is then replicated at equal online cost and
    summarised by its mean, empirical variance, and variance ratio against
    MFIS.  Estimator failures are recorded as rows with ``status`` set to
    the error, with the remaining rows intact.
    """
    rng = RngStream(cfg.seed)
    pair, q_hat, mu1, offline = prepare_problem(cfg, rng)
    if q_hat is None:
        raise ValueError("run_experiment needs an importance-sampling problem")
    p = pair.input_density
    n0 = int(cfg.budget)
    w_cost = cfg.cost_ratio
    n_cv, _ = allocate_equal_cost(n0, w_cost, theory.CV, 1.0)
    n_acv, n_acv_lf = allocate_equal_cost(n0, w_cost, theory.ACV_IS,
                                          cfg.lf_hf_ratio)
    k = cfg.plan.K
    plan_cv = BatchPlan(K=k, n=max(1, n_cv // k), scheme=theory.CV)
    plan_is = BatchPlan(K=k, n=max(1, n_acv // k),
                        m=max(1, (n_acv_lf - n_acv) // k), scheme=theory.ACV_IS)
    R = cfg.replications
    rep_threads = 1 if cfg.problem in ("beam", "plate") else cfg.threads

    n_sh_cv = plan_cv.K * plan_cv.n
    n_sh_is = plan_is.K * plan_is.n
    m_is = plan_is.K * plan_is.m

    def paired_rep(i):
        """One replication of all three estimators on a shared draw pool."""
        gen = rng.stream(3_000_000 + i).generator()
        pool = q_hat.sample(gen, max(n0, n_sh_cv, n_sh_is + m_is))
        mfis = float(np.mean(
            pair.hf.response(pool[:n0])
            * importance_weights(p, q_hat, pool[:n0])))
        res_cv = ensemble_cv_is(pair, q_hat, mu1, plan_cv, rng,
                                samples=pool[:n_sh_cv])
        res_is = ensemble_acv_is(
            pair, q_hat, plan_is, rng,
            samples=(pool[:n_sh_is], pool[n_sh_is:n_sh_is + m_is]))
        return (mfis, res_cv.estimate, float(res_cv.weight[0]), res_cv.cost,
                res_is.estimate, float(res_is.weight[0]), res_is.cost)

    rows = []
    estimate_arrays: dict[str, np.ndarray] = {}
    try:
        out = np.array(parallel_map(paired_rep, R, rep_threads))
        columns = {
            "MFIS": (out[:, 0], np.zeros(R), np.full(R, n0 * pair.hf.cost),
                     n0, 0),
            "MF-CV": (out[:, 1], out[:, 2], out[:, 3], n_sh_cv, n_sh_cv),
            "MF-ACV": (out[:, 4], out[:, 5], out[:, 6], n_sh_is,
                       n_sh_is + m_is),
        }
        v0 = float(out[:, 0].var(ddof=1))
        for name, (ests, alphas, costs, n_hf, n_lf) in columns.items():
            estimate_arrays[name] = ests
            var = float(ests.var(ddof=1))
            rows.append({
                "name": name, "n_hf": n_hf, "n_lf": n_lf,
                "estimate": float(ests.mean()),
                "empirical_variance": var,
                "variance_ratio_vs_mfis": float(var / v0) if v0 > 0 else 1.0,
                "alpha": float(alphas.mean()),
                "stderr_of_mean": float(np.sqrt(var / R)),
                "cost": float(costs.mean()),
                "status": "ok",
            })
    except Exception as exc:  # partial results with failure markers
        for name in ("MFIS", "MF-CV", "MF-ACV"):
            if name not in estimate_arrays:
                rows.append({
                    "name": name, "n_hf": "", "n_lf": "",
                    "estimate": "", "empirical_variance": "",
                    "variance_ratio_vs_mfis": "", "alpha": "",
                    "stderr_of_mean": "", "cost": "",
                    "status": f"error: {exc}",
                })
    theory_info = {}
    if pair.hf.mean is not None:
        theory_info["exact_mean"] = float(pair.hf.mean)
    meta = {
        "problem": cfg.problem, "budget": n0, "replications": R,
        "cost_ratio": w_cost, "lf_hf_ratio": cfg.lf_hf_ratio,
        "K": k, "mu1": float(mu1), "seed": cfg.seed, "offline": offline,
    }
    return Report("experiment", _EXPERIMENT_COLUMNS, rows, theory_info, meta,
                  estimates=estimate_arrays)


# ----------------------------------------------------------------------
# command-line interface
# ----------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfvr",
        description="Multi-fidelity variance reduction for rare events.",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for replications")
    parser.add_argument("--out", type=str, default=".",
                        help="output directory for reports")
    sub = parser.add_subparsers(dest="command", required=True)

    alloc = sub.add_parser("allocate", help="equal-cost sample allocation")
    alloc.add_argument("--budget", type=int, required=True)
    alloc.add_argument("--cost-ratio", type=float, required=True)
    alloc.add_argument("--scheme", default="CV",
                       choices=["MFIS", "CV", "ACV-IS", "ACV-MF"])
    alloc.add_argument("--rho-alloc", type=float, default=1.0)

    theo = sub.add_parser("theory", help="closed-form predictions as JSON")
    theo.add_argument("--scheme", default="CV",
                      choices=["CV", "ACV-IS", "ACV-MF"])
    theo.add_argument("--correlations", type=_floats, required=True,
                      help="comma-separated correlations of each control with the baseline")
    theo.add_argument("--variances", type=_floats, default=None,
                      help="comma-separated M+1 output variances (default all 1)")
    theo.add_argument("--r", type=_floats, default=None,
                      help="comma-separated sample ratios for ACV schemes")
    theo.add_argument("--k", type=int, default=10)
    theo.add_argument("--y", type=float, default=1.0)

    for name in ("fit-biasing", "estimate", "sweep-alpha"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=str, required=True,
                         help="JSON file with ExperimentConfig fields")

    val = sub.add_parser("validate-theorem2",
                         help="empirical check of the ensemble variance ratios")
    val.add_argument("--m", type=int, default=1)
    val.add_argument("--r2", type=float, required=True)
    val.add_argument("--scheme", default="CV",
                     choices=["CV", "ACV-IS", "ACV-MF"])
    val.add_argument("--r", type=_floats, default=None)
    val.add_argument("--k-grid", type=_ints, required=True)
    val.add_argument("--replications", type=int, default=2000)
    val.add_argument("--n", type=int, default=50)
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.command == "allocate":
        n_hf, n_lf = allocate_equal_cost(args.budget, args.cost_ratio,
                                         args.scheme, args.rho_alloc)
        print(json.dumps({"scheme": args.scheme, "n_hf": n_hf, "n_lf": n_lf}))
        return 0

    if args.command == "theory":
        fam = synthetic_gaussian_family(args.correlations,
                                        variances=args.variances)
        pred = theory.predict(args.scheme, fam.stats, args.k, r=args.r,
                              y=args.y)
        print(json.dumps(pred.to_dict()))
        return 0

    if args.command == "fit-biasing":
        cfg = _load_config(args)
        rng = RngStream(cfg.seed)
        pair, q_hat, mu1, offline = prepare_problem(cfg, rng)
        path = out_dir / "biasing.json"
        path.write_text(q_hat.to_json(), encoding="utf-8")
        print(json.dumps({"written": str(path), "components": q_hat.n_components,
                          "mu1": mu1, "offline": offline}))
        return 0

    if args.command == "estimate":
        cfg = _load_config(args)
        report = run_experiment(cfg)
        report.write_json(out_dir / "report.json")
        report.write_csv(out_dir / "report.csv")
        print(report.to_json())
        return 0

    if args.command == "sweep-alpha":
        cfg = _load_config(args)
        report = run_alpha_sweep(cfg)
        report.write_json(out_dir / "sweep.json")
        report.write_csv(out_dir / "sweep.csv")
        print(json.dumps(report.meta))
        return 0

    if args.command == "validate-theorem2":
        threads = args.threads if args.threads is not None else 1
        seed = args.seed if args.seed is not None else 0
        report = run_theory_validation(args.m, args.k_grid, args.r2,
                                       args.scheme, r=args.r,
                                       replications=args.replications,
                                       n=args.n, seed=seed, threads=threads)
        report.write_json(out_dir / "theorem2.json")
        report.write_csv(out_dir / "theorem2.csv")
        print(report.to_json())
        return 0

    return 1  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
