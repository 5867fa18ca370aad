"""Closed-form predictions for control-variate estimators with estimated weights.

Everything here is a pure function of model statistics: sample-sharing
matrices for the two approximate-control-variate partitions, optimal
weights, squared multiple correlations, predicted variance-reduction
ratios of K-batch ensemble estimators, minimum ensemble counts that
guarantee reduction, and the weight intervals inside which any (possibly
misestimated) weight still cannot hurt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    BoundViolatedError,
    InfeasibleTargetError,
    InvalidRatioError,
    SingularSystemError,
    UndefinedRangeError,
)

__all__ = [
    "CV",
    "ACV_IS",
    "ACV_MF",
    "SCHEMES",
    "ModelStatistics",
    "TheoryPrediction",
    "hadamard",
    "outer",
    "diag_part",
    "f_matrix",
    "optimal_weight",
    "r_squared",
    "variance_ratio_prediction",
    "min_ensembles",
    "weight_range",
    "variance_profile",
    "predict",
]

CV = "CV"
ACV_IS = "ACV-IS"
ACV_MF = "ACV-MF"
SCHEMES = (CV, ACV_IS, ACV_MF)

#: condition-number threshold beyond which a weight system is declared singular
COND_LIMIT = 1e12


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise (Hadamard) product."""
    return np.asarray(a) * np.asarray(b)


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Outer product ``u v^T``."""
    return np.outer(u, v)


def diag_part(a: np.ndarray) -> np.ndarray:
    """The diagonal of a square matrix as a vector."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("diag_part expects a square matrix")
    return np.diag(a).copy()


def _check_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return scheme


def _ratios(r, m: int) -> np.ndarray:
    rr = np.atleast_1d(np.asarray(r, dtype=float))
    if rr.size != m:
        raise InvalidRatioError(f"expected {m} ratios, got {rr.size}")
    if np.any(rr <= 1.0):
        raise InvalidRatioError("sample ratios must satisfy r > 1")
    return rr


def solve_weight_system(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` with an explicit conditioning guard."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > COND_LIMIT:
        raise SingularSystemError("weight system is singular or near-singular")
    return np.linalg.solve(a, b)


@dataclass(frozen=True)
class ModelStatistics:
    """Second moments linking the baseline model to its M controls.

    ``C`` is the M x M covariance among the control outputs, ``c`` the
    M-vector of covariances with the baseline output, ``var0`` the baseline
    output variance.  ``c_bar = c / sqrt(var0)`` so that, per control,
    ``c_bar_i = rho_i * sqrt(Var[Y_i])``.
    """

    C: np.ndarray
    c: np.ndarray
    var0: float

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if C.shape[0] != C.shape[1] or c.size != C.shape[0]:
            raise ValueError("C must be (M, M) and c length M")
        scale = max(1.0, float(np.max(np.abs(C))))
        if np.max(np.abs(C - C.T)) > 1e-8 * scale:
            raise ValueError("C must be symmetric")
        C = 0.5 * (C + C.T)
        if np.min(np.linalg.eigvalsh(C)) < -1e-10 * scale:
            raise ValueError("C must be positive semi-definite")
        if self.var0 <= 0.0:
            raise ValueError("var0 must be positive")
        corr = c / np.sqrt(self.var0 * np.diag(C))
        if np.any(np.abs(corr) > 1.0 + 1e-9):
            raise ValueError("correlations must lie in [-1, 1]")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "var0", float(self.var0))

    @property
    def n_controls(self) -> int:
        return self.c.size

    @property
    def c_bar(self) -> np.ndarray:
        return self.c / np.sqrt(self.var0)


def f_matrix(scheme: str, r=None, m: int | None = None) -> np.ndarray:
    """Sample-sharing matrix of the chosen partition.

    For M controls with per-control sample ratios ``r_i > 1``::

        CV      f_ij = 1
        ACV-IS  f_ii = (r_i-1)/r_i,   f_ij = (r_i-1)/r_i * (r_j-1)/r_j
        ACV-MF  f_ij = (min(r_i,r_j)-1)/min(r_i,r_j)

    As every ``r_i -> inf`` both partitions recover the all-ones CV matrix.
    """
    _check_scheme(scheme)
    if scheme == CV:
        if m is None:
            if r is None:
                raise InvalidRatioError("CV f_matrix needs the control count m")
            m = np.atleast_1d(r).size
        return np.ones((m, m))
    rr = _ratios(r, np.atleast_1d(r).size)
    g = (rr - 1.0) / rr
    if scheme == ACV_IS:
        f = outer(g, g)
        np.fill_diagonal(f, g)
        return f
    rmin = np.minimum.outer(rr, rr)
    return (rmin - 1.0) / rmin


def optimal_weight(scheme: str, stats: ModelStatistics, r=None) -> np.ndarray:
    """Variance-minimising control weight ``alpha*``.

    CV: ``-C^{-1} c``.  ACV partitions: ``-[C o F]^{-1} [diag(F) o c]``.
    """
    _check_scheme(scheme)
    if scheme == CV:
        return -solve_weight_system(stats.C, stats.c)
    f = f_matrix(scheme, _ratios(r, stats.n_controls))
    return -solve_weight_system(hadamard(stats.C, f), diag_part(f) * stats.c)


def r_squared(scheme: str, stats: ModelStatistics, r=None) -> float:
    """Squared multiple correlation governing the ideal reduction ``1 - R^2``."""
    _check_scheme(scheme)
    cb = stats.c_bar
    if scheme == CV:
        val = float(cb @ solve_weight_system(stats.C, cb))
    else:
        f = f_matrix(scheme, _ratios(r, stats.n_controls))
        a = diag_part(f) * cb
        val = float(a @ solve_weight_system(hadamard(stats.C, f), a))
    return val


def _a_factor(scheme: str, r=None, m: int | None = None) -> float:
    """Partition-dependent inflation factor in the ensemble variance ratio."""
    if scheme in (CV, ACV_IS):
        return 1.0
    rr = _ratios(r, m if m is not None else np.atleast_1d(r).size)
    if not np.allclose(rr, rr[0]):
        raise InvalidRatioError("the ACV-MF prediction requires equal ratios r_i = r")
    return float((rr[0] - 1.0) / rr[0])


def variance_ratio_prediction(scheme: str, r2: float, m: int, k: int, r=None) -> float:
    """Predicted ``Var[ensemble] / Var[plain baseline]`` at equal sample count.

    ``(1 - R^2) (1 + a M / (K - M - 2))`` with ``a = 1`` for CV and ACV-IS
    (the latter assuming ``r >> 1``) and ``a = (r-1)/r`` for ACV-MF with
    equal ratios.  Requires ``K > M + 2``.
    """
    _check_scheme(scheme)
    if not 0.0 <= r2 <= 1.0:
        raise ValueError("R^2 must lie in [0, 1]")
    if k <= m + 2:
        raise BoundViolatedError(f"need K > M + 2 (got K={k}, M={m})")
    a = _a_factor(scheme, r, m)
    return (1.0 - r2) * (1.0 + a * m / (k - m - 2))


def min_ensembles(scheme: str, r2: float, m: int, r=None, y: float = 1.0) -> int:
    """Smallest K guaranteeing ``Var[ensemble]/Var[baseline] < y``.

    Feasible only when ``y + R^2 > 1``; the bound is
    ``K > max(M + 2, M + 2 - a M (1 - R^2) / (1 - y - R^2))``,
    which at ``y = 1`` reduces to ``M/R^2 + 2`` for CV and ACV-IS and to
    ``(r-1)/r * M/R^2 + M/r + 2`` for ACV-MF.  The inequality is strict, so
    an integral bound still rounds up.
    """
    _check_scheme(scheme)
    if not 0.0 < y <= 1.0:
        raise ValueError("target ratio y must lie in (0, 1]")
    if r2 <= 0.0:
        raise ValueError("R^2 must be positive")
    if y + r2 <= 1.0:
        raise InfeasibleTargetError(
            f"no K can reach ratio {y} at R^2={r2}: need y + R^2 > 1"
        )
    a = _a_factor(scheme, r, m)
    b = m + 2.0 - a * m * (1.0 - r2) / (1.0 - y - r2)
    bound = max(float(m + 2), b)
    if abs(bound - round(bound)) < 1e-9:
        bound = round(bound)
    return int(np.floor(bound)) + 1


def weight_range(cov: float | None = None, var: float | None = None,
                 acv_terms: tuple[float, float] | None = None) -> tuple[float, float]:
    """Closed weight interval within which variance cannot exceed the baseline.

    Classical control: endpoint ``-2 cov / var``.  Approximate control:
    pass ``acv_terms = (s1, s2)`` with ``s1 = Var[Q_1 - mu_1^e]`` and
    ``s2 = Cov[Q_0, Q_1 - mu_1^e]``; endpoint ``-2 s2 / s1``.  The interval
    always contains 0 (equality there).
    """
    if acv_terms is not None:
        s1, s2 = acv_terms
        if s1 <= 0.0:
            raise UndefinedRangeError("differenced control has zero variance")
        endpoint = -2.0 * s2 / s1
    else:
        if var is None or cov is None:
            raise ValueError("need (cov, var) or acv_terms")
        if var <= 0.0:
            raise UndefinedRangeError("control has zero variance")
        endpoint = -2.0 * cov / var
    return (min(0.0, endpoint), max(0.0, endpoint))


def variance_profile(alpha, var0: float, var1: float | None = None,
                     cov: float | None = None,
                     acv_terms: tuple[float, float] | None = None):
    """Estimator variance as a function of the weight: a parabola in alpha.

    ``var0 + alpha^2 * var1 + 2 alpha * cov``; with ``acv_terms=(s1, s2)``
    the differenced-control second moments replace ``(var1, cov)``.
    Vectorised over ``alpha``.
    """
    if var0 < 0.0:
        raise ValueError("variances must be nonnegative")
    if acv_terms is not None:
        var1, cov = acv_terms
    if var1 is None or cov is None:
        raise ValueError("need (var1, cov) or acv_terms")
    if var1 < 0.0:
        raise ValueError("variances must be nonnegative")
    alpha = np.asarray(alpha, dtype=float)
    out = var0 + alpha**2 * var1 + 2.0 * alpha * cov
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TheoryPrediction:
    """Bundle of closed-form quantities for one scheme and one K."""

    scheme: str
    f: np.ndarray
    alpha_star: np.ndarray
    r_squared: float
    variance_ratio: float
    k_min: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "f": np.asarray(self.f).tolist(),
            "alpha_star": np.asarray(self.alpha_star).tolist(),
            "r_squared": self.r_squared,
            "variance_ratio": self.variance_ratio,
            "k_min": self.k_min,
            **self.meta,
        }


def predict(scheme: str, stats: ModelStatistics, k: int, r=None,
            y: float = 1.0) -> TheoryPrediction:
    """All predictions for a scheme at ensemble count ``K``."""
    m = stats.n_controls
    rr = None if scheme == CV else _ratios(r, m)
    f = np.ones((m, m)) if scheme == CV else f_matrix(scheme, rr)
    r2 = r_squared(scheme, stats, rr)
    ratio = variance_ratio_prediction(scheme, r2, m, k, rr)
    kmin = min_ensembles(scheme, r2, m, rr, y=y)
    alpha = optimal_weight(scheme, stats, rr)
    if not 0.0 <= r2 <= 1.0 + 1e-12 or ratio < 0.0:
        raise ValueError("inconsistent statistics produced an invalid prediction")
    return TheoryPrediction(scheme, f, alpha, r2, ratio, kmin, meta={"K": k, "y": y})
