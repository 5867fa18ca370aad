"""Model abstraction and the benchmark model families.

A :class:`Model` couples a deterministic quantity of interest with an
indicator limit state (failure iff ``g(z) < 0``) and a per-evaluation cost.
Estimators call :meth:`Model.response`: the failure indicator when the
model has a limit state, the raw quantity of interest otherwise (the
synthetic linear-Gaussian family used for validating the closed-form
theory has no threshold).

Families provided:

* ``analytic_pair`` - scalar Gaussian threshold exceedance with exact
  failure probabilities,
* ``synthetic_gaussian_family`` - jointly Gaussian model outputs with
  exactly known covariances, for theory validation,
* ``beam_pair`` - plane-stress cantilever whose Young's modulus is a
  uniform random field built from a Karhunen-Loeve expansion (fine mesh +
  spatial field vs. coarse mesh + centroid field),
* ``plate_pair`` - clamped Mindlin plate with random per-quadrant
  thickness and load (fine vs. coarse mesh).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from concurrent.futures import ThreadPoolExecutor

from . import fem
from ._util import single_threaded_blas
from .densities import Density, RngStream, StandardNormal, as_generator
from .exceptions import DimensionMismatchError, InsufficientTailMassError
from .theory import ModelStatistics

__all__ = [
    "Model",
    "ModelPair",
    "SyntheticFamily",
    "analytic_pair",
    "intermediate_threshold_model",
    "synthetic_gaussian_family",
    "equicorrelated_rho",
    "beam_pair",
    "plate_pair",
    "plate_deflection",
    "calibrate_thresholds",
]


@dataclass(frozen=True)
class Model:
    """Deterministic map from inputs to a scalar output with a cost.

    ``qoi`` maps an ``(n, d)`` array of input rows to ``(n,)`` values and
    must be a pure function.  With a ``threshold`` l the limit state is
    ``g(z) = l - qoi(z)``; a custom ``limit_state`` callable may replace
    it.  ``mean`` carries the exact expectation of :meth:`response` when
    known (analytic failure probabilities, synthetic family means).
    """

    dimension: int
    qoi: Callable[[np.ndarray], np.ndarray]
    cost: float
    threshold: float | None = None
    limit_state: Callable[[np.ndarray], np.ndarray] | None = None
    mean: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.cost <= 0.0:
            raise ValueError("cost must be positive")

    def _coerce(self, z) -> np.ndarray:
        pts = np.asarray(z, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if pts.ndim != 2 or pts.shape[1] != self.dimension:
            raise DimensionMismatchError(
                f"expected (n, {self.dimension}) inputs, got shape {np.shape(z)}"
            )
        return pts

    @property
    def is_failure_model(self) -> bool:
        return self.threshold is not None or self.limit_state is not None

    def qoi_values(self, z) -> np.ndarray:
        return np.asarray(self.qoi(self._coerce(z)), dtype=float)

    def limit_state_values(self, z) -> np.ndarray:
        if self.limit_state is not None:
            return np.asarray(self.limit_state(self._coerce(z)), dtype=float)
        if self.threshold is None:
            raise ValueError(f"model {self.name!r} has no limit state")
        return self.threshold - self.qoi_values(z)

    def indicator(self, z) -> np.ndarray:
        """Failure indicator, exactly ``[g(z) < 0]`` as floats."""
        return (self.limit_state_values(z) < 0.0).astype(float)

    def response(self, z) -> np.ndarray:
        """The estimand: indicator for failure models, QoI otherwise."""
        return self.indicator(z) if self.is_failure_model else self.qoi_values(z)

    def with_threshold(self, threshold: float, mean: float | None = None) -> "Model":
        return replace(self, threshold=float(threshold), limit_state=None, mean=mean)


@dataclass(frozen=True)
class ModelPair:
    """A high-fidelity model, one low-fidelity control, and their input law."""

    hf: Model
    lf: Model
    input_density: Density
    name: str = ""
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.hf.dimension != self.lf.dimension:
            raise DimensionMismatchError("paired models must share the input dimension")
        if self.hf.dimension != self.input_density.dimension:
            raise DimensionMismatchError("input density dimension mismatch")

    @property
    def cost_ratio(self) -> float:
        return self.hf.cost / self.lf.cost


def analytic_pair(l0: float = 3.0, l1: float = 2.8,
                  cost_ratio: float = 30.0) -> ModelPair:
    """Scalar Gaussian exceedance pair: ``g_i(z) = l_i - z`` under ``N(0,1)``.

    Exact failure probabilities ``1 - Phi(l_i)`` are attached as model
    means.  The low-fidelity model differs only in its threshold; the cost
    ratio is configurable (default 30).
    """
    p = StandardNormal(1)

    def make(level: float, cost: float, tag: str) -> Model:
        return Model(
            dimension=1,
            qoi=lambda z: z[:, 0],
            cost=cost,
            threshold=float(level),
            mean=float(norm.sf(level)),
            name=tag,
        )

    hf = make(l0, cost_ratio, f"analytic-hf(l={l0})")
    lf = make(l1, 1.0, f"analytic-lf(l={l1})")
    return ModelPair(hf, lf, p, name="analytic")


def intermediate_threshold_model(l_seq: float) -> Model:
    """Proposal-defining model ``g(z) = l - z`` for a threshold sequence.

    Its exact conditional density under ``N(0,1)`` is sampled by
    :func:`mfvr.densities.rejection_sample`; lowering ``l`` yields
    proposals that are progressively farther from the final one.
    """
    return Model(
        dimension=1,
        qoi=lambda z: z[:, 0],
        cost=1.0,
        threshold=float(l_seq),
        mean=float(norm.sf(l_seq)),
        name=f"intermediate(l={l_seq})",
    )


@dataclass(frozen=True)
class SyntheticFamily:
    """Linear-Gaussian model ensemble with exactly known joint moments."""

    models: list[Model]
    input_density: Density
    stats: ModelStatistics
    means: np.ndarray
    covariance: np.ndarray

    @property
    def n_controls(self) -> int:
        return len(self.models) - 1


def synthetic_gaussian_family(correlations, variances=None, means=None,
                              costs=None) -> SyntheticFamily:
    """Models ``Y_i = mu_i + (L z)_i`` with prescribed correlations to ``Y_0``.

    ``correlations[i-1]`` is the Pearson correlation between ``Y_0`` and
    control ``Y_i``; cross-correlations among controls follow the implied
    single-factor structure ``rho_i rho_j``.  The joint covariance is
    factorised by Cholesky, so the outputs are exactly jointly Gaussian at
    every sample size and the attached statistics are exact.
    """
    rho = np.atleast_1d(np.asarray(correlations, dtype=float))
    m = rho.size
    var = np.ones(m + 1) if variances is None else np.asarray(variances, float)
    mu = np.zeros(m + 1) if means is None else np.asarray(means, float)
    cost = np.ones(m + 1) if costs is None else np.asarray(costs, float)
    if var.size != m + 1 or mu.size != m + 1 or cost.size != m + 1:
        raise DimensionMismatchError("need M+1 variances, means and costs")

    sd = np.sqrt(var)
    corr = np.eye(m + 1)
    corr[0, 1:] = corr[1:, 0] = rho
    for i in range(1, m + 1):
        for j in range(1, m + 1):
            if i != j:
                corr[i, j] = rho[i - 1] * rho[j - 1]
    sigma = corr * np.outer(sd, sd)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        # singular-PSD (e.g. a perfectly correlated control) still factors
        lam, vec = np.linalg.eigh(sigma)
        if np.min(lam) < -1e-10 * max(np.max(lam), 1.0):
            raise ValueError("implied joint covariance is not PSD") from None
        chol = vec * np.sqrt(np.clip(lam, 0.0, None))

    p = StandardNormal(m + 1)
    models = []
    for i in range(m + 1):
        row = chol[i].copy()
        models.append(
            Model(
                dimension=m + 1,
                qoi=(lambda z, row=row, mu_i=float(mu[i]): mu_i + z @ row),
                cost=float(cost[i]),
                mean=float(mu[i]),
                name=f"synthetic-{i}",
            )
        )
    stats = ModelStatistics(C=sigma[1:, 1:], c=sigma[1:, 0], var0=float(sigma[0, 0]))
    return SyntheticFamily(models, p, stats, mu.copy(), sigma)


def equicorrelated_rho(m: int, r2: float) -> float:
    """The common correlation giving multiple correlation ``R^2`` for M controls.

    For the single-factor family with equal rho, ``R^2 = M rho^2 / (1 +
    (M-1) rho^2)``; inverting gives ``rho^2 = R^2 / (M - (M-1) R^2)``.
    """
    if not 0.0 <= r2 < 1.0:
        raise ValueError("R^2 must lie in [0, 1)")
    return float(np.sqrt(r2 / (m - (m - 1) * r2)))


def _solve_loop(n: int, body, threads: int) -> np.ndarray:
    """Run ``body(i) -> float`` for i in range(n), optionally threaded.

    The per-sample solves release the GIL inside LAPACK, so contiguous
    chunks on a small pool scale; outputs land in index-assigned slots and
    are identical for any thread count.
    """
    out = np.empty(n)

    def run_chunk(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            out[i] = body(i)

    with single_threaded_blas():
        if threads <= 1 or n < 4 * threads:
            run_chunk(0, n)
        else:
            bounds = np.linspace(0, n, threads + 1).astype(int)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(run_chunk, bounds[t], bounds[t + 1])
                           for t in range(threads)]
                for fut in futures:
                    fut.result()
    return out


def calibrate_thresholds(model: Model, p: Density, target_pf: float,
                         n_ref: int, rng: RngStream) -> tuple[float, float]:
    """Empirical threshold for a target failure probability.

    Returns ``(l, achieved_pf)`` where ``l`` is the empirical
    ``(1 - target_pf)``-quantile of the QoI over ``n_ref`` reference
    samples and ``achieved_pf`` the fraction of reference QoI values above
    it.  Requires ``n_ref * target_pf >= 100`` expected tail hits.
    ``target_pf = 0.5`` returns the median.
    """
    if not 0.0 < target_pf <= 0.5:
        raise ValueError("target_pf must lie in (0, 0.5]")
    if n_ref * target_pf < 100.0:
        raise InsufficientTailMassError(
            f"n_ref * target_pf = {n_ref * target_pf:.1f} < 100 tail samples"
        )
    z = p.sample(as_generator(rng), int(n_ref))
    vals = model.qoi_values(z)
    level = float(np.quantile(vals, 1.0 - target_pf))
    achieved = float(np.mean(vals > level))
    return level, achieved


# ----------------------------------------------------------------------
# PDE-backed pairs
# ----------------------------------------------------------------------

def beam_pair(hf_mesh=(60, 20), lf_mesh=(30, 10), n_per_direction: int = 5,
              n_kl: int = 10, a: float = 1.0, b: float = 2.0, nu: float = 0.3,
              corr_lengths=(60.0, 20.0), dims=(0.6, 0.2),
              cost_ratio: float = 11.0, thresholds=None,
              n_quad: int = 128, threads: int = 1) -> ModelPair:
    """Cantilever pair: fine mesh + spatial modulus field vs. coarse mesh
    + centroid modulus.

    Inputs are ``n_kl`` standard-normal coefficients of the Karhunen-Loeve
    expansion of a Gaussian field with separable squared-exponential
    covariance; the Young's modulus is its pointwise map onto
    ``Uniform(a, b)``.  The high-fidelity model samples the field at every
    element centroid; the low-fidelity model uses the single value at the
    beam centroid, so its modulus is spatially constant.  The QoI is the
    downward tip deflection under a unit load at the upper-right corner.
    ``thresholds=(l0, l1)`` attaches limit states ``g_i = l_i - u``.
    """
    lx, ly = float(dims[0]), float(dims[1])
    basis = fem.KLBasis.build(corr_lengths, dims, n_per_direction, n_kl, n_quad)
    sqrt_lam = np.sqrt(basis.eigenvalues)

    def build_problem(shape):
        mesh = fem.StructuredMesh(shape[0], shape[1], lx, ly)
        tip_node = shape[0] * (shape[1] + 1) + shape[1]  # upper-right corner
        tip_dof = 2 * tip_node + 1
        problem = fem.PlaneStressProblem(mesh, nu, thickness=1.0,
                                         loads={tip_dof: -1.0})
        return mesh, problem, tip_dof

    hf_mesh_obj, hf_problem, hf_tip = build_problem(hf_mesh)
    lf_mesh_obj, lf_problem, lf_tip = build_problem(lf_mesh)
    # field-to-modulus maps: rows of `modes` multiply sqrt(lambda) * xi
    hf_modes = basis.eval_modes(hf_mesh_obj.element_centroids) * sqrt_lam
    centroid = np.array([[lx / 2.0, ly / 2.0]])
    lf_modes = basis.eval_modes(centroid) * sqrt_lam  # (1, n_kl)

    def hf_modulus(xi: np.ndarray) -> np.ndarray:
        return fem.young_modulus(hf_modes @ xi, a, b)

    def lf_modulus(xi: np.ndarray) -> float:
        return float(fem.young_modulus(lf_modes @ xi, a, b)[0])

    def make_qoi(problem, tip_dof, modulus, n_elems):
        def one(z, i):
            e_field = np.broadcast_to(modulus(z[i]), (n_elems,))
            u = fem.solve(problem.assemble(np.asarray(e_field, float)))
            return -u[tip_dof]

        def qoi(z: np.ndarray) -> np.ndarray:
            return _solve_loop(z.shape[0], lambda i: one(z, i), threads)
        return qoi

    hf = Model(
        dimension=n_kl,
        qoi=make_qoi(hf_problem, hf_tip, hf_modulus, hf_mesh_obj.n_elements),
        cost=float(cost_ratio),
        name=f"beam-hf{hf_mesh}",
    )
    lf = Model(
        dimension=n_kl,
        qoi=make_qoi(lf_problem, lf_tip,
                     lambda xi: np.full(lf_mesh_obj.n_elements, lf_modulus(xi)),
                     lf_mesh_obj.n_elements),
        cost=1.0,
        name=f"beam-lf{lf_mesh}",
    )
    if thresholds is not None:
        hf = hf.with_threshold(thresholds[0])
        lf = lf.with_threshold(thresholds[1])
    extras = {
        "basis": basis,
        "hf_modulus": hf_modulus,
        "lf_modulus": lf_modulus,
        "hf_mesh": hf_mesh_obj,
        "lf_mesh": lf_mesh_obj,
    }
    return ModelPair(hf, lf, StandardNormal(n_kl), name="beam", extras=extras)


def plate_deflection(thickness, load, mesh_shape=(30, 30), e_modulus: float = 1e4,
                     nu: float = 0.3, kappa: float = 5.0 / 6.0) -> float:
    """Centre deflection of the clamped plate at given per-quadrant inputs."""
    mesh = fem.StructuredMesh(mesh_shape[0], mesh_shape[1], 1.0, 1.0)
    problem = fem.MindlinPlateProblem(mesh, e_modulus, nu, kappa)
    return problem.center_deflection(np.asarray(thickness, float),
                                     np.asarray(load, float))


def plate_pair(hf_mesh=(30, 30), lf_mesh=(10, 10), e_modulus: float = 1e4,
               nu: float = 0.3, kappa: float = 5.0 / 6.0,
               cost_ratio: float = 37.0, thresholds=None,
               thickness_range=(0.05, 0.1), load_range=(1.0, 2.0),
               threads: int = 1) -> ModelPair:
    """Clamped-plate pair: 30x30 vs. 10x10 meshes of the same physics.

    Eight inputs: per-quadrant thickness ``h_i ~ U(0.05, 0.1)`` and load
    ``s_i ~ U(1, 2)``.  The models operate on a standard-normal input space
    and apply the marginal probability transforms internally, so the fitted
    Gaussian-mixture biasing density has valid (global) support while the
    physical inputs stay inside their ranges.  The QoI is the centre
    deflection.
    """
    h_lo, h_hi = thickness_range
    s_lo, s_hi = load_range

    def build(shape):
        mesh = fem.StructuredMesh(shape[0], shape[1], 1.0, 1.0)
        return fem.MindlinPlateProblem(mesh, e_modulus, nu, kappa)

    hf_problem = build(hf_mesh)
    lf_problem = build(lf_mesh)

    def make_qoi(problem):
        def qoi(z: np.ndarray) -> np.ndarray:
            h = h_lo + (h_hi - h_lo) * ndtr(z[:, :4])
            s = s_lo + (s_hi - s_lo) * ndtr(z[:, 4:])
            return _solve_loop(
                z.shape[0], lambda i: problem.center_deflection(h[i], s[i]),
                threads)
        return qoi

    hf = Model(dimension=8, qoi=make_qoi(hf_problem), cost=float(cost_ratio),
               name=f"plate-hf{hf_mesh}")
    lf = Model(dimension=8, qoi=make_qoi(lf_problem), cost=1.0,
               name=f"plate-lf{lf_mesh}")
    if thresholds is not None:
        hf = hf.with_threshold(thresholds[0])
        lf = lf.with_threshold(thresholds[1])
    extras = {"hf_problem": hf_problem, "lf_problem": lf_problem}
    return ModelPair(hf, lf, StandardNormal(8), name="plate", extras=extras)
