import numpy as np
import pytest
from scipy.stats import norm

from mfvr.densities import (
    FailureConditional,
    RngStream,
    StandardNormal,
    kl_divergence_mc,
    rejection_sample,
)
from mfvr.exceptions import InsufficientTailMassError
from mfvr.models import (
    Model,
    ModelPair,
    analytic_pair,
    beam_pair,
    calibrate_thresholds,
    equicorrelated_rho,
    intermediate_threshold_model,
    plate_deflection,
    plate_pair,
    synthetic_gaussian_family,
)


class TestAnalyticPair:
    def test_exact_failure_probabilities(self):
        pair = analytic_pair(l0=3.0, l1=2.8)
        assert pair.hf.mean == pytest.approx(1.349898e-3, rel=1e-6)
        assert pair.lf.mean == pytest.approx(2.555130e-3, rel=1e-6)
        assert pair.cost_ratio == 30.0

    def test_symmetric_threshold(self):
        model = intermediate_threshold_model(0.0)
        assert model.mean == pytest.approx(0.5)

    def test_indicator_limit_state_consistency(self):
        pair = analytic_pair()
        z = StandardNormal(1).sample(RngStream(0), 10_000)
        for model in (pair.hf, pair.lf):
            g = model.limit_state_values(z)
            ind = model.indicator(z)
            assert np.array_equal(ind == 1.0, g < 0.0)


class TestIntermediateThresholds:
    def test_acceptance_rate(self):
        model = intermediate_threshold_model(1.6)
        # acceptance rate under the nominal density = 1 - Phi(1.6)
        assert model.mean == pytest.approx(norm.sf(1.6), rel=1e-12)
        _, stats = rejection_sample(model, StandardNormal(1), RngStream(1),
                                    5000, return_stats=True)
        rate = stats["accepted"] / stats["proposals"]
        assert abs(rate - norm.sf(1.6)) < 0.01

    def test_endpoint_matches_lf_optimal_target(self):
        seq_model = intermediate_threshold_model(2.8)
        lf = analytic_pair().lf
        z = StandardNormal(1).sample(RngStream(2), 5000)
        assert np.array_equal(seq_model.indicator(z), lf.indicator(z))

    def test_kl_divergence_monotone_in_threshold(self):
        # the conditional at level l has constant density ratio to the
        # l = 2.8 conditional on its support, so the KL divergence is
        # log(sf(l) / sf(2.8)) and grows as l decreases
        p = StandardNormal(1)
        target_model = intermediate_threshold_model(2.8)
        target = FailureConditional(p, target_model, mass=target_model.mean)
        divergences = []
        for level in (2.6, 2.2, 1.8, 1.6):
            model = intermediate_threshold_model(level)
            cond = FailureConditional(p, model, mass=model.mean)
            divergences.append(
                kl_divergence_mc(target, cond, RngStream(3), 4000))
            assert divergences[-1] == pytest.approx(
                np.log(norm.sf(level) / norm.sf(2.8)), rel=1e-9)
        assert all(a < b for a, b in zip(divergences, divergences[1:]))


class TestSyntheticFamily:
    def test_sample_correlation_matches(self):
        fam = synthetic_gaussian_family([0.8])
        z = fam.input_density.sample(RngStream(4), 100_000)
        y0 = fam.models[0].response(z)
        y1 = fam.models[1].response(z)
        assert abs(np.corrcoef(y0, y1)[0, 1] - 0.8) < 0.01

    def test_perfect_correlation_r2_one(self):
        from mfvr.theory import r_squared
        fam = synthetic_gaussian_family([1.0])
        assert r_squared("CV", fam.stats) == pytest.approx(1.0)
        z = fam.input_density.sample(RngStream(5), 2000)
        y0 = fam.models[0].response(z)
        y1 = fam.models[1].response(z)
        assert abs(np.corrcoef(y0, y1)[0, 1]) > 1.0 - 1e-9

    def test_attached_covariance_matches_samples_m2(self):
        fam = synthetic_gaussian_family([0.9, 0.6], variances=[2.0, 1.0, 3.0])
        z = fam.input_density.sample(RngStream(6), 100_000)
        outs = np.column_stack([m.response(z) for m in fam.models])
        emp = np.cov(outs, rowvar=False)
        assert np.allclose(emp, fam.covariance,
                           atol=0.02 * np.abs(fam.covariance).max())

    def test_non_psd_rejected(self):
        with pytest.raises(ValueError):
            synthetic_gaussian_family([1.2])

    def test_equicorrelated_rho_inverts_r2(self):
        from mfvr.theory import ModelStatistics, r_squared
        for m, r2 in ((1, 0.81), (2, 0.5), (3, 0.9)):
            rho = equicorrelated_rho(m, r2)
            fam = synthetic_gaussian_family(np.full(m, rho))
            assert r_squared("CV", fam.stats) == pytest.approx(r2, rel=1e-9)

    def test_mean_metadata(self):
        fam = synthetic_gaussian_family([0.7], means=[1.5, -2.0])
        z = fam.input_density.sample(RngStream(7), 200_000)
        assert fam.models[0].response(z).mean() == pytest.approx(1.5, abs=0.02)
        assert fam.models[1].mean == -2.0


class TestCalibrateThresholds:
    def test_analytic_target_recovers_three(self):
        pair = analytic_pair()
        base = Model(dimension=1, qoi=lambda z: z[:, 0], cost=1.0)
        level, achieved = calibrate_thresholds(
            base, pair.input_density, 1.349898e-3, 1_000_000, RngStream(8))
        assert abs(level - 3.0) < 0.05
        assert achieved == pytest.approx(1.349898e-3, rel=0.2)

    def test_median_target(self):
        base = Model(dimension=1, qoi=lambda z: z[:, 0], cost=1.0)
        level, achieved = calibrate_thresholds(
            base, StandardNormal(1), 0.5, 10_000, RngStream(9))
        assert abs(level) < 0.05
        assert achieved == pytest.approx(0.5, abs=0.02)

    def test_insufficient_tail_mass(self):
        base = Model(dimension=1, qoi=lambda z: z[:, 0], cost=1.0)
        with pytest.raises(InsufficientTailMassError):
            calibrate_thresholds(base, StandardNormal(1), 1e-3, 10_000,
                                 RngStream(10))


@pytest.fixture(scope="module")
def beam():
    return beam_pair()


@pytest.fixture(scope="module")
def plate():
    return plate_pair()


class TestBeamPair:
    def test_hf_field_varies_lf_constant(self, beam):
        xi = np.full(10, 0.5)
        hf_field = beam.extras["hf_modulus"](xi)
        lf_value = beam.extras["lf_modulus"](xi)
        assert hf_field.max() - hf_field.min() > 0.0
        assert np.isscalar(lf_value)
        assert 1.0 < lf_value < 2.0
        assert np.all((hf_field > 1.0) & (hf_field < 2.0))

    def test_qoi_correlation(self, beam):
        z = StandardNormal(10).sample(RngStream(11), 200)
        hf_vals = beam.hf.qoi_values(z)
        lf_vals = beam.lf.qoi_values(z)
        assert np.corrcoef(hf_vals, lf_vals)[0, 1] > 0.9
        assert np.all(hf_vals > 0.0)

    def test_lf_threshold_calibration(self, beam):
        # desk-scale recalibration targeting the reported coarse-model
        # failure probability
        level, achieved = calibrate_thresholds(
            beam.lf, beam.input_density, 2.2428e-2, 4500, RngStream(12))
        assert achieved == pytest.approx(2.2428e-2, rel=0.25)
        thresholded = beam.lf.with_threshold(level)
        z = beam.input_density.sample(RngStream(13), 300)
        pf_emp = thresholded.indicator(z).mean()
        assert 0.0 <= pf_emp < 0.15

    def test_threshold_attaches_limit_state(self, beam):
        hf = beam.hf.with_threshold(100.0)
        z = StandardNormal(10).sample(RngStream(14), 20)
        g = hf.limit_state_values(z)
        assert np.array_equal(hf.indicator(z) == 1.0, g < 0.0)


class TestPlatePair:
    def test_corner_configuration_mesh_agreement(self, plate):
        # z -> -inf maps the inputs to (h, s) = (0.05, 1): compare the
        # meshes directly through the physical solver
        w_hf = plate_deflection(np.full(4, 0.05), np.ones(4), (30, 30))
        w_lf = plate_deflection(np.full(4, 0.05), np.ones(4), (10, 10))
        assert abs(w_lf / w_hf - 1.0) < 0.10

    def test_stiffest_corner_has_smallest_deflection(self):
        h_vals = (0.05, 0.1)
        s_vals = (1.0, 2.0)
        deflections = {
            (h, s): plate_deflection(np.full(4, h), np.full(4, s), (10, 10))
            for h in h_vals for s in s_vals
        }
        assert min(deflections, key=deflections.get) == (0.1, 1.0)
        assert max(deflections, key=deflections.get) == (0.05, 2.0)

    def test_qoi_correlation(self, plate):
        z = StandardNormal(8).sample(RngStream(15), 200)
        hf_vals = plate.hf.qoi_values(z)
        lf_vals = plate.lf.qoi_values(z)
        assert np.corrcoef(hf_vals, lf_vals)[0, 1] > 0.9

    def test_inputs_map_into_physical_ranges(self, plate):
        # the standard-normal inputs reach the uniform marginals exactly
        z = StandardNormal(8).sample(RngStream(16), 50_000)
        from scipy.special import ndtr
        h = 0.05 + 0.05 * ndtr(z[:, 0])
        assert h.min() >= 0.05 and h.max() <= 0.1
        # distributional check against U(0.05, 0.1)
        assert abs(h.mean() - 0.075) < 2e-4
        assert abs(h.var() - 0.05**2 / 12.0) < 2e-6

    def test_calibrated_thresholds_in_target_band(self, plate):
        level, achieved = calibrate_thresholds(
            plate.lf, plate.input_density, 0.03, 3400, RngStream(17))
        assert 1e-3 <= achieved <= 3e-2 * 1.5


class TestCostAccounting:
    def test_pair_cost_ratio(self):
        assert beam_pair.__defaults__  # defaults exist
        pair = analytic_pair(cost_ratio=30.0)
        assert pair.hf.cost == 30.0
        assert pair.lf.cost == 1.0

    def test_dimension_mismatch_rejected(self):
        from mfvr.exceptions import DimensionMismatchError
        a = Model(dimension=1, qoi=lambda z: z[:, 0], cost=1.0)
        b = Model(dimension=2, qoi=lambda z: z[:, 0], cost=1.0)
        with pytest.raises(DimensionMismatchError):
            ModelPair(a, b, StandardNormal(1))
