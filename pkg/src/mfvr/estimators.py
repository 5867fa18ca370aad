"""Estimator algebra: plain MC, importance sampling, control variates,
approximate control variates, and their K-batch ensemble forms with
weights estimated from batch means.

The ensemble estimators split the sample budget into K independent
batches, estimate the optimal control weight from the batch-mean sample
covariances, and average the per-batch estimators.  Each batch draws from
its own RNG stream (the caller's stream refined by the batch index), so
batches are independent and the result does not depend on evaluation
order.  When an approximate control is used, the extra low-fidelity set is
drawn after the shared set within the same batch stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .densities import Density, RngStream, importance_weights
from .exceptions import DegenerateCovarianceError, SingularSystemError
from .theory import ACV_IS, ACV_MF, CV, SCHEMES, f_matrix, solve_weight_system

__all__ = [
    "BatchPlan",
    "BatchMatrix",
    "EnsembleResult",
    "mc_estimate",
    "is_estimate",
    "cv_estimate",
    "sample_cov_batches",
    "estimated_weight",
    "ensemble_cv_is",
    "ensemble_acv_is",
    "ensemble_cv_mc",
    "acv_mc_estimate",
]

#: relative threshold below which an estimated-weight denominator is treated
#: as degenerate and the weight falls back to 0 (a zero weight never hurts)
DEGENERATE_REL = 1e-14


@dataclass(frozen=True)
class BatchPlan:
    """Per-estimator sample budget: K batches of n baseline samples.

    ``m`` extra low-fidelity samples per batch feed the approximate-control
    mean; ``r`` are the per-control sample ratios used by the Monte Carlo
    ACV partitions and the closed-form theory.
    """

    K: int
    n: int
    m: int = 0
    r: tuple[float, ...] | None = None
    scheme: str = CV

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least K = 2 batches")
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.r is not None:
            r = tuple(float(v) for v in np.atleast_1d(self.r))
            if self.scheme != CV and any(v <= 1.0 for v in r):
                raise ValueError("ACV sample ratios must satisfy r > 1")
            object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class BatchMatrix:
    """Per-batch estimator values: column 0 is the baseline model."""

    q: np.ndarray                    # (K, M+1)
    q_prime: np.ndarray | None = None  # (K, M) approximate-control means

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if q.shape[0] < 2 or not np.all(np.isfinite(q)):
            raise ValueError("batch matrix needs >= 2 finite rows")
        object.__setattr__(self, "q", q)
        if self.q_prime is not None:
            qp = np.atleast_2d(np.asarray(self.q_prime, dtype=float))
            if qp.shape != (q.shape[0], q.shape[1] - 1):
                raise ValueError("q_prime must be (K, M)")
            object.__setattr__(self, "q_prime", qp)

    @property
    def n_batches(self) -> int:
        return self.q.shape[0]

    @property
    def n_controls(self) -> int:
        return self.q.shape[1] - 1


@dataclass(frozen=True)
class EnsembleResult:
    """Estimate, estimated weight, variance estimate and consumed cost."""

    estimate: float
    weight: np.ndarray
    variance_estimate: float
    cost: float
    K: int
    n: int
    m: int
    scheme: str
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "weight", np.atleast_1d(np.asarray(self.weight,
                                                                    dtype=float)))
        if self.variance_estimate < 0.0:
            raise ValueError("variance estimate must be nonnegative")

    def to_json(self) -> str:
        return json.dumps({
            "estimate": self.estimate,
            "weight": self.weight.tolist(),
            "variance": self.variance_estimate,
            "cost": self.cost,
            "K": self.K,
            "n": self.n,
            "m": self.m,
            "scheme": self.scheme,
        })


def _mean_and_variance_of_mean(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.var(ddof=1) / v.size)


def mc_estimate(model, p: Density, rng, n: int) -> tuple[float, float]:
    """Plain Monte Carlo mean of the model response under ``p``.

    Returns ``(estimate, variance_estimate)`` with the usual sample
    variance over n divided by n.
    """
    if n < 2:
        raise ValueError("need n >= 2 for a variance estimate")
    z = p.sample(rng, n)
    return _mean_and_variance_of_mean(model.response(z))


def is_estimate(model, p: Density, q: Density, rng, n: int):
    """Importance-sampling mean: sample ``q``, weight by ``p/q``.

    Returns ``(estimate, variance_estimate, per_sample_values)``; the
    per-sample weighted values are kept so a control variate can reuse the
    same draws.
    """
    if n < 2:
        raise ValueError("need n >= 2 for a variance estimate")
    z = q.sample(rng, n)
    vals = model.response(z) * importance_weights(p, q, z)
    est, var = _mean_and_variance_of_mean(vals)
    return est, var, vals


def cv_estimate(baseline_values, control_values, known_means, alpha) -> float:
    """Classical control-variate estimate on shared samples.

    ``mean(Y0) + alpha . (mean(Y) - mu)`` where every column of
    ``control_values`` was evaluated on the same draws as the baseline.
    """
    y0 = np.asarray(baseline_values, dtype=float)
    yc = np.asarray(control_values, dtype=float)
    if yc.ndim == 1:
        yc = yc.reshape(-1, 1)
    mu = np.atleast_1d(np.asarray(known_means, dtype=float))
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if yc.shape[0] != y0.size:
        raise ValueError("baseline and controls must share the sample count")
    if mu.size != yc.shape[1] or a.size != yc.shape[1]:
        raise ValueError("means/alpha must have one entry per control")
    return float(y0.mean() + a @ (yc.mean(axis=0) - mu))


def sample_cov_batches(batches: BatchMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariances across batch means (divisor K - 1).

    Returns ``(C_hat, c_hat)``: the M x M covariance among the control
    columns and their covariances with the baseline column.  Estimating the
    weight downstream needs K >= M + 2 batches for a well-posed inverse.
    """
    full = np.atleast_2d(np.cov(batches.q, rowvar=False, ddof=1))
    return full[1:, 1:], full[1:, 0]


def estimated_weight(scheme: str, c_hat: np.ndarray, c_vec: np.ndarray,
                     f: np.ndarray | None = None) -> np.ndarray:
    """Estimated optimal weight ``-(C_hat o F)^{-1} (diag(F) o c_hat)``.

    ``F`` defaults to the all-ones CV matrix.  Raises
    :class:`DegenerateCovarianceError` when the system is singular (for
    instance a constant control).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    c_hat = np.atleast_2d(np.asarray(c_hat, dtype=float))
    c_vec = np.atleast_1d(np.asarray(c_vec, dtype=float))
    if f is None:
        f = np.ones_like(c_hat)
    f = np.atleast_2d(np.asarray(f, dtype=float))
    try:
        return -solve_weight_system(c_hat * f, np.diag(f) * c_vec)
    except SingularSystemError as exc:
        raise DegenerateCovarianceError(str(exc)) from exc


def _batched_samples(q: Density, rng: RngStream, k: int, n: int, m: int = 0,
                     samples=None):
    """Per-batch draws: shared block then extra block from one batch stream.

    ``samples`` may carry pre-drawn i.i.d. pools ``(shared, extra)`` of
    shapes ``(k, n, d)`` and ``(k, m, d)`` for common-random-number
    comparisons across estimators; the batch layout of an i.i.d. pool is
    statistically equivalent to per-batch streams.
    """
    if samples is not None:
        shared, extra = samples if isinstance(samples, tuple) else (samples, None)
        shared = np.asarray(shared, dtype=float).reshape(k, n, q.dimension)
        if m > 0:
            extra = np.asarray(extra, dtype=float).reshape(k, m, q.dimension)
        return shared, extra
    shared = np.empty((k, n, q.dimension))
    extra = np.empty((k, m, q.dimension)) if m > 0 else None
    for j in range(k):
        gen = rng.generator(j)
        shared[j] = q.sample(gen, n)
        if m > 0:
            extra[j] = q.sample(gen, m)
    return shared, extra


def _scalar_weight(numerator: float, denominator: float, scale: float):
    """-num/den with a fallback to 0 when the denominator is degenerate."""
    if abs(denominator) <= DEGENERATE_REL * max(scale, 1e-300):
        return 0.0, True
    return -numerator / denominator, False


def ensemble_cv_is(pair, q: Density, mu1: float, plan: BatchPlan,
                   rng: RngStream, alpha_override: float | None = None,
                   samples=None) -> EnsembleResult:
    """K-batch ensemble control variate on importance-sampling baselines.

    Per batch, n shared draws from the biasing density ``q`` feed weighted
    evaluations ``Y_k(z) W(z)`` of both models; the weight is estimated
    from the batch means as ``-c_hat / s1_hat`` and applied against the
    known control mean ``mu1``.  The variance estimate is
    ``(s0 + a^2 s1 + 2 a c) / K``.
    """
    if plan.scheme != CV:
        raise ValueError("ensemble_cv_is requires a CV plan")
    k, n = plan.K, plan.n
    p = pair.input_density
    shared, _ = _batched_samples(q, rng, k, n, samples=samples)
    flat = shared.reshape(k * n, -1)
    w = importance_weights(p, q, flat)
    y0 = (pair.hf.response(flat) * w).reshape(k, n)
    y1 = (pair.lf.response(flat) * w).reshape(k, n)
    q0 = y0.mean(axis=1)
    q1 = y1.mean(axis=1)

    cov = np.cov(np.column_stack([q0, q1]), rowvar=False, ddof=1)
    s0, s1, c = cov[0, 0], cov[1, 1], cov[0, 1]
    fallback = False
    if alpha_override is not None:
        alpha = float(alpha_override)
    else:
        alpha, fallback = _scalar_weight(c, s1, max(s0, abs(c)))
    estimate = q0.mean() + alpha * (q1.mean() - mu1)
    variance = (s0 + alpha**2 * s1 + 2.0 * alpha * c) / k
    cost = k * n * (pair.hf.cost + pair.lf.cost)
    return EnsembleResult(
        estimate=float(estimate), weight=np.array([alpha]),
        variance_estimate=max(float(variance), 0.0), cost=float(cost),
        K=k, n=n, m=0, scheme=CV,
        diagnostics={"c_hat": c, "s0_hat": s0, "s1_hat": s1,
                     "alpha_fallback": fallback,
                     "batch_means": np.column_stack([q0, q1])},
    )


def ensemble_acv_is(pair, q: Density, plan: BatchPlan, rng: RngStream,
                    alpha_override: float | None = None,
                    samples=None) -> EnsembleResult:
    """K-batch ensemble approximate control variate on IS baselines.

    Per batch, n shared draws feed both models and m extra draws feed only
    the low-fidelity model; the control mean is estimated from all n + m
    low-fidelity values.  The weight is the batch-statistics plug-in
    ``-(c - c0') / (s1 + s' - 2 c1')`` of the optimal approximate-control
    weight, and the variance estimate is
    ``(s0 + a^2 (s1 + s' - 2 c1') + 2 a (c - c0')) / K``.
    """
    if plan.scheme != ACV_IS:
        raise ValueError("ensemble_acv_is requires an ACV-IS plan")
    if plan.m < 1:
        raise ValueError("need m >= 1 extra low-fidelity samples per batch")
    k, n, m = plan.K, plan.n, plan.m
    p = pair.input_density
    shared, extra = _batched_samples(q, rng, k, n, m, samples=samples)
    flat = shared.reshape(k * n, -1)
    w = importance_weights(p, q, flat)
    y0 = (pair.hf.response(flat) * w).reshape(k, n)
    y1 = (pair.lf.response(flat) * w).reshape(k, n)
    flat_x = extra.reshape(k * m, -1)
    wx = importance_weights(p, q, flat_x)
    y1x = (pair.lf.response(flat_x) * wx).reshape(k, m)

    q0 = y0.mean(axis=1)
    q1 = y1.mean(axis=1)
    q1p = (y1.sum(axis=1) + y1x.sum(axis=1)) / (n + m)

    cov = np.cov(np.column_stack([q0, q1, q1p]), rowvar=False, ddof=1)
    s0, s1, sp = cov[0, 0], cov[1, 1], cov[2, 2]
    c, c0p, c1p = cov[0, 1], cov[0, 2], cov[1, 2]
    denom = s1 + sp - 2.0 * c1p
    numer = c - c0p
    fallback = False
    if alpha_override is not None:
        alpha = float(alpha_override)
    else:
        alpha, fallback = _scalar_weight(numer, denom, max(s0, s1, abs(c)))
    estimate = q0.mean() + alpha * (q1.mean() - q1p.mean())
    variance = (s0 + alpha**2 * denom + 2.0 * alpha * numer) / k
    cost = k * (n * pair.hf.cost + (n + m) * pair.lf.cost)
    return EnsembleResult(
        estimate=float(estimate), weight=np.array([alpha]),
        variance_estimate=max(float(variance), 0.0), cost=float(cost),
        K=k, n=n, m=m, scheme=ACV_IS,
        diagnostics={"c_hat": c, "c0_prime": c0p, "c1_prime": c1p,
                     "s0_hat": s0, "s1_hat": s1, "s_prime": sp,
                     "alpha_fallback": fallback,
                     "batch_means": np.column_stack([q0, q1, q1p])},
    )


def ensemble_cv_mc(models, p: Density, means, plan: BatchPlan,
                   rng: RngStream) -> EnsembleResult:
    """General-M ensemble control variate on plain Monte Carlo baselines.

    ``models[0]`` is the baseline; the controls' exact means must be known.
    The weight is the batch-covariance plug-in ``-C_hat^{-1} c_hat``.
    """
    if plan.scheme != CV:
        raise ValueError("ensemble_cv_mc requires a CV plan")
    k, n = plan.K, plan.n
    m_ctl = len(models) - 1
    mu = np.atleast_1d(np.asarray(means, dtype=float))
    if mu.size != m_ctl:
        raise ValueError("need one known mean per control")
    shared, _ = _batched_samples(p, rng, k, n)
    flat = shared.reshape(k * n, -1)
    qmat = np.column_stack(
        [models[i].response(flat).reshape(k, n).mean(axis=1)
         for i in range(m_ctl + 1)]
    )
    batches = BatchMatrix(qmat)
    c_hat, c_vec = sample_cov_batches(batches)
    fallback = False
    try:
        alpha = estimated_weight(CV, c_hat, c_vec)
    except DegenerateCovarianceError:
        alpha = np.zeros(m_ctl)
        fallback = True
    estimate = qmat[:, 0].mean() + alpha @ (qmat[:, 1:].mean(axis=0) - mu)
    s0 = float(np.var(qmat[:, 0], ddof=1))
    variance = (s0 + alpha @ c_hat @ alpha + 2.0 * alpha @ c_vec) / k
    cost = k * n * sum(mo.cost for mo in models)
    return EnsembleResult(
        estimate=float(estimate), weight=alpha,
        variance_estimate=max(float(variance), 0.0), cost=float(cost),
        K=k, n=n, m=0, scheme=CV,
        diagnostics={"C_hat": c_hat, "c_hat": c_vec, "alpha_fallback": fallback,
                     "batch_matrix": batches},
    )


def acv_mc_estimate(models, p: Density, plan: BatchPlan, rng: RngStream,
                    samples=None) -> EnsembleResult:
    """General-M ensemble approximate control variate on MC baselines.

    Sample sets follow the plan's partition: with per-batch baseline count
    n and ratios ``r_i``, ACV-IS gives every control its own disjoint extra
    block of ``round(n (r_i - 1))`` draws on top of the shared set, while
    ACV-MF nests the controls' sets as prefixes of one enlarged pool.  The
    weight is the batch-covariance plug-in of the scheme's closed form
    (``estimated_weight`` with the scheme's F matrix); a degenerate
    covariance falls back to zero weight, which never hurts.

    ``samples`` may carry a pre-drawn i.i.d. pool of shape
    ``(K, n_pool, d)`` laid out as the shared block followed by the extra
    blocks (ACV-IS: one block per control in order; ACV-MF: the enlarged
    nested pool).
    """
    if plan.scheme not in (ACV_IS, ACV_MF):
        raise ValueError("acv_mc_estimate requires an ACV-IS or ACV-MF plan")
    if plan.r is None:
        raise ValueError("the plan must carry per-control ratios r")
    m_ctl = len(models) - 1
    r = np.asarray(plan.r, dtype=float)
    if r.size != m_ctl:
        raise ValueError("need one ratio per control")
    k, n = plan.K, plan.n
    counts = np.rint(n * r).astype(int)  # per-control total LF draws
    extras = np.maximum(counts - n, 0)
    if plan.scheme == ACV_IS:
        n_pool = n + int(extras.sum())
    else:
        n_pool = int(max(counts.max(), n))

    if samples is not None:
        pool = np.asarray(samples, dtype=float).reshape(k, n_pool, p.dimension)
    else:
        pool = np.empty((k, n_pool, p.dimension))
        for j in range(k):
            gen = rng.generator(j)
            pool[j, :n] = p.sample(gen, n)
            if n_pool > n:
                pool[j, n:] = p.sample(gen, n_pool - n)

    qmat = np.empty((k, m_ctl + 1))
    qprime = np.empty((k, m_ctl))
    flat_shared = pool[:, :n].reshape(k * n, -1)
    qmat[:, 0] = models[0].response(flat_shared).reshape(k, n).mean(axis=1)
    offset = n
    for i in range(1, m_ctl + 1):
        vals = models[i].response(flat_shared).reshape(k, n)
        qmat[:, i] = vals.mean(axis=1)
        if plan.scheme == ACV_IS:
            n_extra = int(extras[i - 1])
            if n_extra > 0:
                block = pool[:, offset:offset + n_extra].reshape(k * n_extra, -1)
                extra_vals = models[i].response(block).reshape(k, n_extra)
                qprime[:, i - 1] = ((vals.sum(axis=1) + extra_vals.sum(axis=1))
                                    / counts[i - 1])
                offset += n_extra
            else:
                qprime[:, i - 1] = vals.mean(axis=1)
        else:  # ACV-MF: nested prefixes of the enlarged pool
            ni = int(counts[i - 1])
            if ni > n:
                tail = pool[:, n:ni].reshape(k * (ni - n), -1)
                tail_vals = models[i].response(tail).reshape(k, ni - n)
                qprime[:, i - 1] = ((vals.sum(axis=1) + tail_vals.sum(axis=1))
                                    / ni)
            else:
                qprime[:, i - 1] = vals.mean(axis=1)

    batches = BatchMatrix(qmat, qprime)
    c_hat, c_vec = sample_cov_batches(batches)
    fallback = False
    try:
        alpha = estimated_weight(plan.scheme, c_hat, c_vec,
                                 f_matrix(plan.scheme, r))
    except DegenerateCovarianceError:
        alpha = np.zeros(m_ctl)
        fallback = True
    delta = qmat[:, 1:] - qprime
    estimate = qmat[:, 0].mean() + alpha @ delta.mean(axis=0)
    s0 = float(np.var(qmat[:, 0], ddof=1))
    if k > 1 and np.any(delta.std(axis=0) > 0):
        joint = np.cov(np.column_stack([qmat[:, 0:1], delta]), rowvar=False,
                       ddof=1)
        joint = np.atleast_2d(joint)
        s_dd = joint[1:, 1:]
        s_d0 = joint[1:, 0]
    else:
        s_dd = np.zeros((m_ctl, m_ctl))
        s_d0 = np.zeros(m_ctl)
    variance = (s0 + alpha @ s_dd @ alpha + 2.0 * alpha @ s_d0) / k
    cost = k * n * models[0].cost \
        + float(k * counts @ np.array([mo.cost for mo in models[1:]]))
    return EnsembleResult(
        estimate=float(estimate), weight=alpha,
        variance_estimate=max(float(variance), 0.0), cost=float(cost),
        K=k, n=n, m=int(counts.max() - n), scheme=plan.scheme,
        diagnostics={"C_hat": c_hat, "c_hat": c_vec, "alpha_fallback": fallback,
                     "batch_matrix": batches},
    )
