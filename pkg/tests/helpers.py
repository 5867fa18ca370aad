"""Shared oracles and statistics for the test suite."""

import numpy as np
from scipy.stats import norm

from mfvr import fem
from mfvr.densities import FailureConditional, StandardNormal
from mfvr.models import intermediate_threshold_model


def paired_bootstrap_p(a: np.ndarray, b: np.ndarray, n_boot: int = 4000,
                       seed: int = 0) -> float:
    """One-sided p-value for ``Var(a) < Var(b)`` with paired replications.

    Resamples replication indices jointly (respecting common-random-number
    pairing) and reports the fraction of resamples with ``Var(a) >=
    Var(b)``; robust to the heavy-tailed squared errors of rare-event IS
    estimators.
    """
    rng = np.random.default_rng(seed)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    idx = rng.integers(0, a.size, size=(n_boot, a.size))
    va = a[idx].var(axis=1, ddof=1)
    vb = b[idx].var(axis=1, ddof=1)
    return float(np.mean(va >= vb))


def conditional_proposal(level: float):
    """Exact rejection-sampled proposal for the scalar threshold problem.

    Returns ``(density, model)``; on its support the importance weight is
    the constant ``1 - Phi(level)``, so all second moments below are exact.
    """
    model = intermediate_threshold_model(level)
    return FailureConditional(StandardNormal(1), model, mass=model.mean), model


def conditional_pair_moments(level: float, l0: float = 3.0, l1: float = 2.8):
    """Exact per-sample moments of the weighted indicators under the
    conditional proposal at ``level``.

    With mass ``c = sf(level)`` the weighted outputs are ``c * I[z > l_i]``
    with exceedance probabilities ``p_i = sf(l_i) / c`` under the proposal,
    and (for ``level < l1 < l0``) the indicators are nested, giving::

        var_i = c^2 p_i (1 - p_i),   cov = c^2 p_hf (1 - p_lf)
    """
    c = float(norm.sf(level))
    p_hf = float(norm.sf(l0)) / c
    p_lf = float(norm.sf(l1)) / c
    var0 = c**2 * p_hf * (1.0 - p_hf)
    var1 = c**2 * p_lf * (1.0 - p_lf)
    cov = c**2 * p_hf * (1.0 - p_lf)
    return {"mass": c, "p_hf": p_hf, "p_lf": p_lf, "var0": var0,
            "var1": var1, "cov": cov}


def dense_assemble(mesh, element_matrices, ndof_per_node: int) -> np.ndarray:
    """Naive dense reference assembly, independent of the banded path."""
    n_dof = ndof_per_node * mesh.n_nodes
    k_full = np.zeros((n_dof, n_dof))
    for e in range(mesh.n_elements):
        ke = element_matrices[e]
        dofs = np.array([
            ndof_per_node * node + c
            for node in mesh.elements[e] for c in range(ndof_per_node)
        ])
        for a in range(dofs.size):
            for b in range(dofs.size):
                k_full[dofs[a], dofs[b]] += ke[a, b]
    return k_full


def dense_solve(k_full, load, fixed):
    """Reduce a dense system by zero Dirichlet dofs and solve."""
    n = k_full.shape[0]
    free = np.setdiff1d(np.arange(n), np.asarray(fixed, dtype=int))
    u = np.zeros(n)
    u[free] = np.linalg.solve(k_full[np.ix_(free, free)], load[free])
    return u


def ritz_mindlin_center(e_modulus, nu, kappa, thickness, load, n_modes=16,
                        n_quad=48) -> float:
    """Independent Rayleigh-Ritz oracle for the uniformly loaded clamped
    Mindlin plate on the unit square.

    Expands deflection and both rotations in sine products (all clamped
    boundary conditions are Dirichlet in Mindlin theory) and minimises the
    bending + shear energy; converges from below as ``n_modes`` grows.
    """
    db_c = e_modulus * thickness**3 / (12.0 * (1.0 - nu**2))
    ds_c = kappa * e_modulus / (2.0 * (1.0 + nu)) * thickness
    t, wt = np.polynomial.legendre.leggauss(n_quad)
    x = 0.5 * (t + 1.0)
    w = 0.5 * wt
    k = np.arange(1, n_modes + 1)
    sin_x = np.sin(np.pi * np.outer(x, k))
    cos_x = np.pi * k * np.cos(np.pi * np.outer(x, k))
    nm = n_modes * n_modes
    phi = np.einsum("ai,bj->abij", sin_x, sin_x).reshape(n_quad, n_quad, nm)
    phi_x = np.einsum("ai,bj->abij", cos_x, sin_x).reshape(n_quad, n_quad, nm)
    phi_y = np.einsum("ai,bj->abij", sin_x, cos_x).reshape(n_quad, n_quad, nm)
    w2 = np.outer(w, w)

    n_tot = 3 * nm
    a_mat = np.zeros((n_tot, n_tot))
    rhs = np.zeros(n_tot)
    sl = [slice(0, nm), slice(nm, 2 * nm), slice(2 * nm, 3 * nm)]
    db = db_c * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0],
                          [0.0, 0.0, (1.0 - nu) / 2.0]])
    ds = ds_c * np.eye(2)

    def accumulate(strain_rows, d_mat):
        for i, row_i in enumerate(strain_rows):
            for j, row_j in enumerate(strain_rows):
                if d_mat[i, j] == 0.0:
                    continue
                for (sa, fa) in row_i:
                    for (sb, fb) in row_j:
                        a_mat[sa, sb] += d_mat[i, j] * np.einsum(
                            "ab,abi,abj->ij", w2, fa, fb)

    accumulate([[(sl[1], phi_x)], [(sl[2], phi_y)],
                [(sl[1], phi_y), (sl[2], phi_x)]], db)
    accumulate([[(sl[0], phi_x), (sl[1], phi)],
                [(sl[0], phi_y), (sl[2], phi)]], ds)
    rhs[sl[0]] = load * np.einsum("ab,abi->i", w2, phi)
    coef = np.linalg.solve(a_mat, rhs)
    centre = np.sin(np.pi * k * 0.5)
    return float(coef[sl[0]] @ np.outer(centre, centre).ravel())
