"""Gaussian-mixture biasing densities fitted by the multilevel cross-entropy method.

The target is the zero-variance importance-sampling density of an indicator
limit state, ``p(z) I[g(z) < 0] / P_f``.  Because direct failure samples are
rare, the fit walks through a sequence of intermediate failure domains
``{g <= threshold_l}`` with thresholds set by the tau-quantile of the
limit-state values at each level (clipped at the true threshold 0 and kept
non-increasing), and updates the mixture on each elite set with weighted
expectation-maximisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .densities import (
    Density,
    GaussianMixture,
    RngStream,
    as_generator,
    importance_weights,
)
from .exceptions import (
    CENotConvergedError,
    DegenerateResponsibilityError,
    EMDegenerateError,
)

__all__ = [
    "EMConfig",
    "CEState",
    "responsibilities",
    "em_update",
    "weighted_log_likelihood",
    "ce_fit",
]


@dataclass(frozen=True)
class EMConfig:
    """Knobs of the cross-entropy / EM fit.

    ``n_s`` samples per level, elite fraction ``tau`` in (0, 1), ``k_init``
    initial mixture components, at most ``max_levels`` levels, ``em_iters``
    EM sweeps per level.  ``cov_jitter`` is a relative diagonal
    regulariser (scaled by the elite data variance) and ``min_weight``
    prunes vanishing components.

    ``defensive_weight`` reserves that much mixture mass for a component
    moment-matched to the input density.  Narrow fitted components have
    lighter tails than the input, so without the defensive mass the
    importance weights p/q can be unbounded (rare but huge weights, i.e.
    unstable variance); with it they are capped near
    ``1 / defensive_weight``.  Set to 0 for the bare fit.
    """

    n_s: int = 3000
    tau: float = 0.1
    k_init: int = 3
    max_levels: int = 20
    cov_jitter: float = 1e-8
    min_weight: float = 1e-4
    em_iters: int = 10
    defensive_weight: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly between 0 and 1")
        if self.n_s < 2 or self.k_init < 1 or self.max_levels < 1:
            raise ValueError("n_s, k_init and max_levels must be positive")
        if self.cov_jitter < 0.0 or self.min_weight < 0.0:
            raise ValueError("cov_jitter and min_weight must be nonnegative")
        if self.em_iters < 1:
            raise ValueError("em_iters must be >= 1")
        if not 0.0 <= self.defensive_weight < 1.0:
            raise ValueError("defensive_weight must lie in [0, 1)")


@dataclass(frozen=True)
class CEState:
    """Snapshot of one cross-entropy level (diagnostics)."""

    mixture: GaussianMixture
    threshold: float
    level: int
    n_elite: int
    effective_sample_size: float


def responsibilities(samples: np.ndarray, mixture: GaussianMixture) -> np.ndarray:
    """Posterior component memberships, one row per sample, rows sum to 1.

    Computed in log space; a sample at which every component underflows to
    zero raises :class:`DegenerateResponsibilityError`.
    """
    comp = mixture.component_log_pdf(samples)
    norm = logsumexp(comp, axis=1)
    if np.any(np.isneginf(norm)):
        raise DegenerateResponsibilityError(
            "all mixture components vanished at a sample"
        )
    return np.exp(comp - norm[:, None])


def em_update(samples: np.ndarray, is_weights: np.ndarray, gamma: np.ndarray,
              cov_jitter: float = 0.0) -> GaussianMixture:
    """One weighted EM maximisation step.

    With combined weights ``w_ij = W_i * gamma_ij``::

        nu_j  = sum_i w_ij
        pi_j  = nu_j / sum_r nu_r
        mu_j  = sum_i w_ij z_i / nu_j
        Sig_j = sum_i w_ij (z_i - mu_j)(z_i - mu_j)^T / nu_j + jitter * I

    Components whose ``nu_j`` vanishes are pruned (their weight is
    redistributed by the renormalisation).  ``cov_jitter`` is the absolute
    diagonal addition.
    """
    z = np.asarray(samples, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    w_is = np.asarray(is_weights, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(w_is < 0.0):
        raise ValueError("importance weights must be nonnegative")
    if not np.any(w_is > 0.0):
        raise ValueError("importance weights must not all vanish")
    if gamma.shape != (z.shape[0], gamma.shape[1]):
        raise ValueError("gamma must be (n_samples, k)")

    w = w_is[:, None] * gamma
    nu = w.sum(axis=0)
    keep = nu > 0.0
    if not np.any(keep):
        raise EMDegenerateError("every component lost all weight")
    w = w[:, keep]
    nu = nu[keep]
    d = z.shape[1]

    pi = nu / nu.sum()
    mu = (w.T @ z) / nu[:, None]
    cov = np.empty((nu.size, d, d))
    for j in range(nu.size):
        dz = z - mu[j]
        cov[j] = (w[:, j] * dz.T) @ dz / nu[j]
    cov += cov_jitter * np.eye(d)
    try:
        return GaussianMixture(pi, mu, cov)
    except ValueError as exc:
        raise EMDegenerateError(f"EM produced an invalid mixture: {exc}") from exc


def weighted_log_likelihood(samples: np.ndarray, is_weights: np.ndarray,
                            mixture: GaussianMixture) -> float:
    """``sum_i W_i log q(z_i)`` - the objective EM increases monotonically."""
    log_q = np.atleast_1d(mixture.log_pdf(samples))
    return float(np.asarray(is_weights, dtype=float) @ log_q)


def _prune(mixture: GaussianMixture, min_weight: float) -> GaussianMixture:
    keep = mixture.weights >= min_weight
    if np.all(keep) or not np.any(keep):
        return mixture
    w = mixture.weights[keep]
    return GaussianMixture(w / w.sum(), mixture.means[keep],
                           mixture.covariances[keep])


def _reference_gaussian(p: Density, gen: np.random.Generator):
    """Moment-matched single Gaussian used as the defensive component."""
    from .densities import StandardNormal, UniformBox

    d = p.dimension
    if isinstance(p, StandardNormal):
        return np.zeros(d), np.eye(d)
    if isinstance(p, UniformBox):
        return 0.5 * (p.lo + p.hi), np.diag((p.hi - p.lo) ** 2 / 12.0)
    pilot = p.sample(gen, max(500, 50 * d))
    cov = np.atleast_2d(np.cov(pilot, rowvar=False))
    return pilot.mean(axis=0), cov + 1e-12 * np.eye(d)


def _with_defensive(mixture: GaussianMixture, weight: float, mean: np.ndarray,
                    cov: np.ndarray) -> GaussianMixture:
    if weight <= 0.0:
        return mixture
    w = np.concatenate([(1.0 - weight) * mixture.weights, [weight]])
    mu = np.vstack([mixture.means, mean[None, :]])
    sig = np.concatenate([mixture.covariances, cov[None, :, :]], axis=0)
    return GaussianMixture(w, mu, sig)


def _level_init(samples: np.ndarray, weights: np.ndarray, k: int,
                gen: np.random.Generator, jitter: float) -> GaussianMixture:
    """Fresh per-level mixture init from the weighted elite set.

    Means are drawn weight-proportionally without replacement; every
    component starts from the full weighted elite covariance, so the fit
    cannot inherit an over-narrow shape from the previous level.
    """
    n, d = samples.shape
    k = min(k, n)
    p_sel = weights / weights.sum() if weights.sum() > 0 else None
    if p_sel is not None and np.count_nonzero(p_sel) < k:
        p_sel = None  # too few weighted points to pick k distinct means
    idx = gen.choice(n, size=k, replace=False, p=p_sel)
    mu_bar = weights @ samples / weights.sum()
    centred = samples - mu_bar
    cov = (weights[:, None] * centred).T @ centred / weights.sum()
    cov = cov + max(jitter, 1e-10 * max(np.trace(cov) / d, 1.0)) * np.eye(d)
    return GaussianMixture(np.full(k, 1.0 / k), samples[idx],
                           np.tile(cov, (k, 1, 1)))


def _data_scale(samples: np.ndarray) -> float:
    if samples.shape[0] < 2:
        return 1.0
    return float(max(np.mean(np.var(samples, axis=0)), 1e-12))


def ce_fit(model, p: Density, cfg: EMConfig, rng: RngStream,
           full_output: bool = False):
    """Fit a Gaussian-mixture biasing density for the failure set of ``model``.

    Returns the final mixture, or ``(mixture, [CEState, ...])`` with
    ``full_output=True``.  Raises :class:`CENotConvergedError` (with the
    last state attached) if ``cfg.max_levels`` is exhausted before the
    intermediate threshold reaches 0.
    """
    d = model.dimension
    if cfg.n_s < 10 * d * cfg.k_init:
        raise ValueError(
            f"n_s={cfg.n_s} is below the identifiability floor "
            f"10 * d * k_init = {10 * d * cfg.k_init}"
        )
    gen = as_generator(rng)
    ref_mean, ref_cov = _reference_gaussian(p, gen)
    proposal: Density = p
    threshold = np.inf
    states: list[CEState] = []
    state = None

    for level in range(1, cfg.max_levels + 1):
        z = proposal.sample(gen, cfg.n_s)
        g = np.atleast_1d(model.limit_state_values(z))
        threshold = min(threshold, max(0.0, float(np.quantile(g, cfg.tau))))
        elite = g <= threshold
        if not np.any(elite):
            raise CENotConvergedError(
                f"no elite samples at level {level} (threshold {threshold})",
                state=state,
            )
        ze = z[elite]
        w = importance_weights(p, proposal, ze)
        jitter = cfg.cov_jitter * max(_data_scale(ze), 1.0)
        mixture = _level_init(ze, w, cfg.k_init, gen, jitter)
        for _ in range(cfg.em_iters):
            gamma = responsibilities(ze, mixture)
            mixture = em_update(ze, w, gamma, cov_jitter=jitter)
        mixture = _prune(mixture, cfg.min_weight)
        mixture = _with_defensive(mixture, cfg.defensive_weight, ref_mean,
                                  ref_cov)
        ess = float(w.sum()) ** 2 / float(w @ w)
        state = CEState(mixture, threshold, level, int(elite.sum()), ess)
        states.append(state)
        proposal = mixture
        if threshold == 0.0:
            return (mixture, states) if full_output else mixture

    raise CENotConvergedError(
        f"threshold {threshold} after {cfg.max_levels} levels", state=state
    )
