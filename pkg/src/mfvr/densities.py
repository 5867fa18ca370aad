"""Probability densities, seeded sampling, density ratios and divergences.

Points are row vectors: batched arguments have shape ``(n, d)`` and batched
results shape ``(n,)``.  A single point may be passed as a length-``d``
vector (or a scalar when ``d == 1``) and yields a scalar result.

All densities are immutable after construction and safe to share across
threads.  Randomness always flows through an explicit :class:`RngStream`
(or a ``numpy.random.Generator`` derived from one); a stream is
single-owner, and parallel work is organised by giving each batch or
replication its own stream id, never by sharing one generator.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .exceptions import (
    DimensionMismatchError,
    IntractableTargetError,
    UnsupportedPointError,
)

__all__ = [
    "RngStream",
    "Density",
    "StandardNormal",
    "UniformBox",
    "GaussianMixture",
    "FailureConditional",
    "density_ratio",
    "importance_weights",
    "rejection_sample",
    "kl_divergence_mc",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    The same pair always yields byte-identical draws; distinct stream ids
    give statistically independent streams (numpy ``SeedSequence`` spawn
    keys).
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= self.stream_id < 2**32:
            raise ValueError("stream_id must fit in 32 bits")

    def generator(self, *subkeys: int) -> np.random.Generator:
        """Generator for this stream, optionally refined by integer subkeys."""
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *subkeys)
        )
        return np.random.default_rng(ss)

    def stream(self, stream_id: int) -> "RngStream":
        """Sibling stream with the same seed and a different id."""
        return RngStream(self.seed, stream_id)


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngStream` or a ready ``numpy.random.Generator``."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


class Density(ABC):
    """Evaluable and sampleable probability density on R^d."""

    dimension: int

    def _coerce(self, z) -> tuple[np.ndarray, bool]:
        """Return ``(points (n, d), scalar_input)`` after shape validation."""
        pts = np.asarray(z, dtype=float)
        scalar = pts.ndim < 2
        if pts.ndim == 0:
            pts = pts.reshape(1, 1)
        elif pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if pts.ndim != 2 or pts.shape[1] != self.dimension:
            raise DimensionMismatchError(
                f"expected points of dimension {self.dimension}, got shape {np.shape(z)}"
            )
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        return pts, scalar

    @abstractmethod
    def _log_pdf(self, pts: np.ndarray) -> np.ndarray:
        """Log density at validated ``(n, d)`` points."""

    def log_pdf(self, z):
        pts, scalar = self._coerce(z)
        out = self._log_pdf(pts)
        return float(out[0]) if scalar else out

    @abstractmethod
    def sample(self, rng, n: int) -> np.ndarray:
        """Draw ``n`` i.i.d. points, shape ``(n, d)``."""


class StandardNormal(Density):
    """Independent standard normal coordinates in d dimensions."""

    def __init__(self, dimension: int = 1):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = int(dimension)

    def _log_pdf(self, pts):
        return -0.5 * (self.dimension * _LOG_2PI + np.sum(pts * pts, axis=1))

    def sample(self, rng, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return as_generator(rng).standard_normal((n, self.dimension))


class UniformBox(Density):
    """Uniform density on an axis-aligned box [lo_i, hi_i]^d."""

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatchError("lo and hi must be 1-d and equally long")
        if np.any(hi <= lo):
            raise ValueError("need hi > lo in every coordinate")
        self.lo = lo
        self.hi = hi
        self.dimension = lo.size
        self._log_volume = float(np.sum(np.log(hi - lo)))

    def _log_pdf(self, pts):
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        return np.where(inside, -self._log_volume, -np.inf)

    def sample(self, rng, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        u = as_generator(rng).random((n, self.dimension))
        return self.lo + (self.hi - self.lo) * u


class GaussianMixture(Density):
    """Mixture of multivariate normals with SPD covariances.

    Weights must be probabilities summing to one within 1e-12; every
    covariance must admit a Cholesky factorisation, which is checked at
    construction.  ``log_pdf`` is computed in log space with a log-sum-exp
    over components so tail evaluations do not underflow.
    """

    def __init__(self, weights, means, covariances):
        w = np.asarray(weights, dtype=float)
        mu = np.asarray(means, dtype=float)
        cov = np.asarray(covariances, dtype=float)
        if w.ndim != 1:
            raise DimensionMismatchError("weights must be 1-d")
        k = w.size
        if mu.ndim == 1:
            mu = mu.reshape(k, 1)
        if cov.ndim == 1:
            cov = cov.reshape(k, 1, 1)
        if mu.shape[0] != k or cov.shape[0] != k:
            raise DimensionMismatchError("weights, means, covariances disagree on k")
        d = mu.shape[1]
        if cov.shape[1:] != (d, d):
            raise DimensionMismatchError("covariances must be (k, d, d)")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("mixture weights must lie in [0, 1]")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1 (got {w.sum()!r})")
        sym_err = np.max(np.abs(cov - np.transpose(cov, (0, 2, 1))))
        if sym_err > 1e-8 * max(1.0, float(np.max(np.abs(cov)))):
            raise ValueError("covariances must be symmetric")
        cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("every mixture covariance must be SPD") from exc

        self.weights = w
        self.means = mu
        self.covariances = cov
        self.dimension = d
        self.n_components = k
        with np.errstate(divide="ignore"):
            self._log_weights = np.log(w)
        self._log_det = 2.0 * np.sum(
            np.log(np.diagonal(self._chol, axis1=1, axis2=2)), axis=1
        )

    def component_log_pdf(self, z) -> np.ndarray:
        """``log(pi_j) + log N(z; mu_j, Sigma_j)`` as an ``(n, k)`` matrix."""
        pts, _ = self._coerce(z)
        n = pts.shape[0]
        out = np.empty((n, self.n_components))
        for j in range(self.n_components):
            y = solve_triangular(
                self._chol[j], (pts - self.means[j]).T, lower=True
            )
            maha = np.sum(y * y, axis=0)
            out[:, j] = self._log_weights[j] - 0.5 * (
                self.dimension * _LOG_2PI + self._log_det[j] + maha
            )
        return out

    def _log_pdf(self, pts):
        return logsumexp(self.component_log_pdf(pts), axis=1)

    def sample(self, rng, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        gen = as_generator(rng)
        p = self.weights / self.weights.sum()
        comps = gen.choice(self.n_components, size=n, p=p)
        eps = gen.standard_normal((n, self.dimension))
        out = np.empty((n, self.dimension))
        for j in range(self.n_components):
            idx = comps == j
            if np.any(idx):
                out[idx] = self.means[j] + eps[idx] @ self._chol[j].T
        return out

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_json(self) -> str:
        """Serialise as ``{d, k, weights, means, covariances}``.

        Floats are emitted with shortest round-trip repr, so
        ``from_json(to_json(.))`` reproduces the mixture exactly.
        """
        doc = {
            "d": self.dimension,
            "k": self.n_components,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        doc = json.loads(text)
        gm = cls(doc["weights"], doc["means"], doc["covariances"])
        if gm.dimension != doc["d"] or gm.n_components != doc["k"]:
            raise ValueError("JSON document is inconsistent with its own shapes")
        return gm


class FailureConditional(Density):
    """The base density restricted to a failure set and renormalised.

    This is the zero-variance importance-sampling proposal for an indicator
    target: ``pdf(z) = base(z) * I[g(z) < 0] / mass`` where ``mass`` is the
    failure probability.  Sampling is exact via rejection from the base
    density.
    """

    def __init__(self, base: Density, model, mass: float,
                 max_proposals_per_sample: int = 10_000_000):
        if not 0.0 < mass < 1.0:
            raise ValueError("mass must be a probability in (0, 1)")
        self.base = base
        self.model = model
        self.mass = float(mass)
        self.dimension = base.dimension
        self._max_proposals = int(max_proposals_per_sample)

    def _log_pdf(self, pts):
        base = np.atleast_1d(self.base.log_pdf(pts))
        inside = self.model.indicator(pts).astype(bool)
        return np.where(inside, base - np.log(self.mass), -np.inf)

    def sample(self, rng, n: int) -> np.ndarray:
        return rejection_sample(
            self.model, self.base, rng, n,
            max_proposals_per_sample=self._max_proposals,
        )


def density_ratio(p: Density, q: Density, z):
    """``p(z) / q(z)`` computed as ``exp(log p - log q)``.

    Raises :class:`UnsupportedPointError` where ``q(z) == 0``, since the
    ratio (and any importance-sampling identity built on it) is undefined
    there.
    """
    log_p = p.log_pdf(z)
    log_q = q.log_pdf(z)
    if np.any(np.isneginf(log_q)):
        raise UnsupportedPointError("q vanishes at the requested point")
    return np.exp(log_p - log_q)


def importance_weights(p: Density, q: Density, points: np.ndarray) -> np.ndarray:
    """Vector of weights ``p/q`` at sampled points, tolerant of ``p == 0``.

    Points outside ``supp(p)`` get weight zero (they contribute nothing to
    a weighted estimator).  Points where ``q == 0`` but ``p > 0`` violate
    the support condition and raise :class:`UnsupportedPointError`.
    """
    log_p = np.atleast_1d(p.log_pdf(points))
    log_q = np.atleast_1d(q.log_pdf(points))
    bad = np.isneginf(log_q) & ~np.isneginf(log_p)
    if np.any(bad):
        raise UnsupportedPointError(
            f"q vanishes at {int(bad.sum())} sampled point(s) inside supp(p)"
        )
    w = np.zeros(log_p.shape)
    ok = ~np.isneginf(log_p)
    w[ok] = np.exp(log_p[ok] - log_q[ok])
    return w


def rejection_sample(limit_state, p: Density, rng, n: int,
                     max_proposals_per_sample: int = 10_000_000,
                     return_stats: bool = False):
    """Exact draws from ``p`` conditioned on the failure set ``{g < 0}``.

    Proposes from ``p`` and keeps points whose failure indicator is one.
    ``limit_state`` is any object with an ``indicator(points)`` method
    (see :class:`mfvr.models.Model`).  Raises
    :class:`IntractableTargetError` once the proposal budget
    ``max_proposals_per_sample * n`` is exhausted.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = as_generator(rng)
    budget = int(max_proposals_per_sample) * int(n)
    chunk = int(min(max(4 * n, 1024), 1_000_000))
    kept = []
    n_kept = 0
    proposed = 0
    while n_kept < n:
        take = min(chunk, budget - proposed)
        if take <= 0:
            raise IntractableTargetError(
                f"no acceptance after {proposed} proposals for {n} samples"
            )
        z = p.sample(gen, take)
        proposed += take
        acc = limit_state.indicator(z).astype(bool)
        if np.any(acc):
            kept.append(z[acc])
            n_kept += int(acc.sum())
    out = np.concatenate(kept, axis=0)[:n]
    if return_stats:
        return out, {"proposals": proposed, "accepted": n_kept}
    return out


def kl_divergence_mc(q_ref: Density, q_approx: Density, rng, n: int) -> float:
    """Monte Carlo estimate of ``KL(q_ref || q_approx)``.

    Samples ``q_ref`` and averages ``log q_ref - log q_approx``.  Raises
    :class:`UnsupportedPointError` if ``q_approx`` vanishes at any sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = q_ref.sample(as_generator(rng), n)
    log_ref = np.atleast_1d(q_ref.log_pdf(z))
    log_apx = np.atleast_1d(q_approx.log_pdf(z))
    if np.any(np.isneginf(log_apx)):
        raise UnsupportedPointError("q_approx vanishes on q_ref samples")
    return float(np.mean(log_ref - log_apx))
