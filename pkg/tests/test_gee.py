import math

import numpy as np
import pytest

from smartlong import (
    AdjustmentOptions,
    BetweenCorr,
    CorrCai,
    EmbeddedCai,
    FitOptions,
    MeanModelSpec,
    ThetaEstimate,
    VarianceCai,
    VarianceTime,
    WithinCorr,
    WorkingCovSpec,
    consistency_indicator,
    contrast_end_of_study,
    custom_contrast,
    design_weight,
    enumerate_cais,
    finite_sample_adjust,
    fit,
    fit_end_of_study,
    end_of_study_contrast,
    make_saturated_basis,
    mu,
    sandwich_covariance,
    solve_theta,
    stack_design_matrix,
    wald_test,
)
from smartlong.errors import InsufficientData, ZeroVariance
from smartlong.gee import _make_workspace

from conftest import make_cluster, make_dataset, random_design2_dataset

D11 = EmbeddedCai(1, None, 1)
D1M = EmbeddedCai(1, None, -1)
DM1 = EmbeddedCai(-1, None, 1)
DMM = EmbeddedCai(-1, None, -1)

IID = WorkingCovSpec.independent_homoscedastic()
EXCH = WorkingCovSpec(
    variance_time=VarianceTime.HETEROSCEDASTIC,
    variance_cai=VarianceCai.HETEROGENEOUS,
    within_corr=WithinCorr.EXCHANGEABLE,
    between_corr=BetweenCorr.EXCHANGEABLE,
    corr_cai=CorrCai.HETEROGENEOUS,
)


def model_mean(theta, a1, a2nr, t, knot=1.0):
    g = theta
    if t <= knot:
        return g[0] + g[1] * t + g[2] * a1 * t
    a2 = a2nr if a2nr is not None else 0
    return (
        g[0] + g[1] * knot + g[2] * a1 * knot
        + (g[3] + g[4] * a1 + g[5] * a2 + g[6] * a1 * a2) * (t - knot)
    )


def exact_dataset(design, grid, theta, rng, n_clusters=24, responders=False):
    """Outcomes exactly on the model surface (no noise)."""
    clusters = []
    for i in range(n_clusters):
        a1 = 1 if i % 2 == 0 else -1
        if responders and i % 3 == 0:
            r, a2nr = 1, None
        else:
            r, a2nr = 0, [1, -1][(i // 2) % 2]
        n = int(rng.integers(1, 4))
        ys = [
            tuple(model_mean(theta, a1, a2nr, t) for t in grid.times)
            for _ in range(n)
        ]
        clusters.append(make_cluster(f"c{i:03d}", a1, r, a2nr, ys))
    return make_dataset(clusters, design, grid)


class TestSolveTheta:
    def test_exact_fixed_point(self, design2, grid012):
        rng = np.random.default_rng(0)
        theta0 = np.array([0.5, 0.3, -0.1, 0.2, 0.05, 0.1, -0.02])
        ds = exact_dataset(design2, grid012, theta0, rng)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        est = solve_theta(ds, spec)
        np.testing.assert_allclose(est.gamma, theta0, atol=1e-10)

    def test_weight_scale_invariance(self, design2, grid012):
        rng = np.random.default_rng(1)
        ds = random_design2_dataset(rng, 30, grid012, design2)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        ws = _make_workspace(ds, spec)
        base = solve_theta(ds, spec)
        doubled = solve_theta(ds, spec, weights=2.0 * ws.weights)
        np.testing.assert_allclose(doubled.full, base.full, rtol=1e-12)

    def test_saturated_identity_v_reproduces_weighted_means(self, design2, grid012):
        # six-cluster hand dataset; oracle computed by direct weighted means
        clusters = [
            make_cluster("a", 1, 1, None, [(1.0, 2.0, 3.0), (2.0, 3.0, 4.0)]),
            make_cluster("b", 1, 0, 1, [(0.0, 1.0, 5.0)]),
            make_cluster("c", 1, 0, -1, [(1.0, 0.0, 2.0), (3.0, 1.0, 0.0), (2.0, 2.0, 2.0)]),
            make_cluster("d", -1, 1, None, [(4.0, 4.0, 4.0)]),
            make_cluster("e", -1, 0, 1, [(2.0, 5.0, 1.0), (0.0, 1.0, 1.0)]),
            make_cluster("f", -1, 0, -1, [(1.0, 1.0, 2.0)]),
        ]
        ds = make_dataset(clusters, design2, grid012)
        spec = MeanModelSpec.custom(design2, grid012, make_saturated_basis(design2, grid012))
        est = solve_theta(ds, spec)

        for ci, d in enumerate(enumerate_cais(design2)):
            for k, t in enumerate(grid012.times):
                num = den = 0.0
                for cl in clusters:
                    ind = consistency_indicator(cl, d, design2)
                    if not ind:
                        continue
                    w = design_weight(cl, design2)
                    num += w * sum(indiv.y[k] for indiv in cl.individuals)
                    den += w * cl.n
                fitted = mu(spec, d, (), t, est)
                assert fitted == pytest.approx(num / den, abs=1e-10)


class TestFit:
    def test_iid_converges_in_two_iterations(self, design2, grid012):
        rng = np.random.default_rng(2)
        ds = random_design2_dataset(rng, 40, grid012, design2)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, IID)
        assert res.converged
        assert res.iterations <= 2
        assert res.max_delta < 1e-12  # scalar V reproduces the initializer

    def test_infinite_tolerance_returns_initializer(self, design2, grid012):
        rng = np.random.default_rng(3)
        ds = random_design2_dataset(rng, 40, grid012, design2)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, EXCH, FitOptions(tolerance=math.inf))
        base = solve_theta(ds, spec)
        np.testing.assert_array_equal(res.theta.full, base.full)
        assert res.iterations == 0 and res.converged

    def test_root_certificate(self, design2, grid012):
        rng = np.random.default_rng(4)
        ds = random_design2_dataset(rng, 50, grid012, design2, sizes=(2, 3))
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, EXCH)
        assert res.converged
        y_max = max(abs(v) for cl in ds.clusters for ind in cl.individuals for v in ind.y)
        assert res.ee_residual_norm < 1e-8 * (1.0 + y_max)

    def test_nonconvergence_is_warning_state(self, design2, grid012):
        rng = np.random.default_rng(5)
        ds = random_design2_dataset(rng, 40, grid012, design2, sizes=(2, 3))
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        with pytest.warns(RuntimeWarning):
            res = fit(ds, spec, EXCH, FitOptions(max_iter=1))
        assert not res.converged
        assert res.iterations == 1

    def test_missing_regime_is_hard_error(self, design2, grid012):
        clusters = [
            make_cluster("a", 1, 0, 1, [(1.0, 2.0, 3.0)]),
            make_cluster("b", -1, 0, 1, [(1.0, 2.0, 3.0)]),
            make_cluster("c", -1, 0, -1, [(0.0, 1.0, 2.0)]),
        ]  # nothing consistent with (1,-1)
        ds = make_dataset(clusters, design2, grid012)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        with pytest.raises(InsufficientData):
            fit(ds, spec, IID)

    def test_determinism_and_cluster_order_invariance(self, design2, grid012):
        rng = np.random.default_rng(6)
        ds = random_design2_dataset(rng, 30, grid012, design2, sizes=(2, 3))
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res1 = fit(ds, spec, EXCH)
        res2 = fit(ds, spec, EXCH)
        reversed_ds = make_dataset(list(reversed(ds.clusters)), design2, grid012)
        res3 = fit(reversed_ds, spec, EXCH)
        np.testing.assert_array_equal(res1.theta.full, res2.theta.full)
        np.testing.assert_array_equal(res1.sigma_theta, res2.sigma_theta)
        np.testing.assert_array_equal(res1.theta.full, res3.theta.full)
        np.testing.assert_array_equal(res1.sigma_theta, res3.sigma_theta)

    def test_engine_design_path_matches_public_stacker(self, design2, grid012):
        rng = np.random.default_rng(7)
        ds = random_design2_dataset(
            rng, 10, grid012, design2,
            cluster_covariates=("u",), individual_covariates=("v",),
        )
        spec = MeanModelSpec.piecewise_linear(design2, grid012, covariate_terms=("u", "v"))
        ws = _make_workspace(ds, spec)
        by_id = {cl.cluster_id: cl for cl in ds.clusters}
        for g in ws.groups:
            for row_idx, pos in enumerate(g.cluster_pos):
                cl = ws.clusters[pos]
                expected = stack_design_matrix(spec, g.cai, cl, ds)
                np.testing.assert_allclose(g.design[row_idx], expected)


class TestSandwich:
    def test_zero_residuals_zero_covariance(self, design2, grid012):
        rng = np.random.default_rng(8)
        theta0 = np.array([1.0, 0.5, 0.2, 0.1, 0.0, 0.3, -0.1])
        ds = exact_dataset(design2, grid012, theta0, rng)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        # identity working covariance keeps the meat matrix in outcome scale
        res = fit(ds, spec, IID, FitOptions(tolerance=math.inf))
        np.testing.assert_allclose(res.q_hat, 0.0, atol=1e-20)
        np.testing.assert_allclose(res.sigma_theta, 0.0, atol=1e-20)
        # a converged fit under estimated variance still reports zero sigma
        res2 = fit(ds, spec, IID)
        np.testing.assert_allclose(res2.sigma_theta, 0.0, atol=1e-20)

    def test_intercept_model_matches_hand_sandwich(self, design2):
        # three singleton non-responder clusters, two times, intercept-only mean
        from smartlong import CustomBasis, TimeGrid

        grid = TimeGrid(times=(0.0, 1.0), knot=0.0)
        ys = [(1.0, 2.0), (0.0, 1.0), (3.0, 5.0)]
        paths = [(1, 1), (-1, 1), (-1, -1)]
        clusters = [
            make_cluster(f"c{i}", a1, 0, a2, [y])
            for i, ((a1, a2), y) in enumerate(zip(paths, ys))
        ]
        # cover remaining regime so the fit precondition holds
        clusters.append(make_cluster("c3", 1, 0, -1, [(2.0, 2.0)]))
        ys.append((2.0, 2.0))
        ds = make_dataset(clusters, design2, grid)
        basis = CustomBasis(functions=[lambda t, d: 1.0], grid=grid, labels=["mean"])
        spec = MeanModelSpec.custom(design2, grid, basis)
        res = fit(ds, spec, IID, FitOptions(tolerance=math.inf))

        w = 4.0  # all non-responders under balanced randomization
        sums = np.array([sum(y) for y in ys])
        theta_hat = (w * sums).sum() / (w * 2 * len(ys))
        assert res.theta.full[0] == pytest.approx(theta_hat, abs=1e-12)
        n = len(ys)
        j_hat = w * 2 * n / n
        u = w * (sums - 2 * theta_hat)
        q_hat = (u**2).sum() / n
        expected_var = q_hat / j_hat**2 / n
        assert res.sigma_theta[0, 0] == pytest.approx(expected_var, rel=1e-12)

    def test_sandwich_helper_psd_and_symmetry(self):
        j = np.array([[2.0, 0.3], [0.3, 1.0]])
        q = np.array([[1.0, 0.2], [0.2, 0.5]])
        sig = sandwich_covariance(j, q, 25)
        np.testing.assert_array_equal(sig, sig.T)
        assert np.linalg.eigvalsh(sig)[0] >= 0

    def test_weight_scale_leaves_sigma_invariant(self, design2, grid012):
        rng = np.random.default_rng(9)
        ds = random_design2_dataset(rng, 25, grid012, design2)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        ws = _make_workspace(ds, spec)

        from smartlong.gee import _Workspace, _assemble, WeightMode
        from smartlong.workingcov import estimate_alpha as est_alpha

        def run(scale):
            w = _Workspace(ds, spec, ws.weights * scale, ws.clusters)
            theta, _, _ = w.solve(None)
            alpha = est_alpha(w.residual_groups(theta), IID, enumerate_cais(design2))
            return _assemble(
                w, spec, IID, theta, alpha, None,
                iterations=0, converged=True, max_delta=0.0,
                weight_mode=WeightMode.DESIGN_KNOWN, weight_model=None,
            )

        r1, r5 = run(1.0), run(5.0)
        np.testing.assert_allclose(r1.theta.full, r5.theta.full, rtol=1e-12)
        np.testing.assert_allclose(r1.sigma_theta, r5.sigma_theta, rtol=1e-10)


class TestWald:
    @pytest.fixture
    def fitted(self, design2, grid012):
        rng = np.random.default_rng(10)
        ds = random_design2_dataset(
            rng, 60, grid012, design2, sizes=(2, 3),
            mean_fn=lambda a1, r, a2nr, t: 0.5 + 0.2 * t + 0.1 * (a1 == 1) * t,
        )
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        return spec, fit(ds, spec, EXCH)

    def test_zero_estimate_gives_unit_p(self, fitted):
        # exact-integer theta and contrast so the dot product cancels exactly
        spec, res = fitted
        from dataclasses import replace

        from smartlong import ContrastVector, ThetaEstimate

        gamma = np.array([1.0, 2.0, 4.0, 0.5, -1.0, 3.0, 2.0])
        null_fit = replace(res, theta=ThetaEstimate(gamma, res.theta.eta, res.theta.names))
        c = np.zeros(spec.n_params)
        c[0], c[1] = 2.0, -1.0  # 2*1 - 1*2 == 0 with exact float products
        w = wald_test(null_fit, ContrastVector(c=c, label="null"))
        assert w.statistic == 0.0
        assert w.p_value == 1.0
        assert w.ci[0] <= 0.0 <= w.ci[1]

    def test_contrast_scale_invariance(self, fitted):
        spec, res = fitted
        c = contrast_end_of_study(spec, D11, DMM)
        from smartlong import ContrastVector

        # power-of-two scaling is exact in floating point: bitwise equality
        pow2 = ContrastVector(c=32.0 * c.c, label="x32")
        w1, w2 = wald_test(res, c), wald_test(res, pow2)
        assert w1.statistic == w2.statistic
        assert w1.p_value == w2.p_value
        np.testing.assert_allclose([v / 32.0 for v in w2.ci], w1.ci, rtol=0, atol=0)
        # arbitrary positive scaling agrees to floating-point accuracy
        w3 = wald_test(res, ContrastVector(c=37.0 * c.c, label="x37"))
        assert w3.statistic == pytest.approx(w1.statistic, rel=1e-12)
        assert w3.p_value == pytest.approx(w1.p_value, rel=1e-12)
        np.testing.assert_allclose([v / 37.0 for v in w3.ci], w1.ci, rtol=1e-12)

    def test_ci_contains_estimate_and_se_positive(self, fitted):
        spec, res = fitted
        w = wald_test(res, contrast_end_of_study(spec, D11, DM1), level=0.9)
        assert w.se > 0
        assert w.ci[0] <= w.estimate <= w.ci[1]

    def test_zero_variance_raises(self, design2, grid012):
        rng = np.random.default_rng(11)
        theta0 = np.array([1.0, 0.5, 0.2, 0.1, 0.0, 0.3, -0.1])
        ds = exact_dataset(design2, grid012, theta0, rng)
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, IID)
        with pytest.raises(ZeroVariance):
            wald_test(res, contrast_end_of_study(spec, D11, DMM))


class TestAdjustments:
    def test_nonneg_clamp_noop_when_already_nonneg(self, design2, grid012):
        rng = np.random.default_rng(12)
        ds = random_design2_dataset(
            rng, 60, grid012, design2, sizes=(2, 3),
            mean_fn=lambda a1, r, a2nr, t: 1.0,
        )
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, EXCH)
        adj = finite_sample_adjust(res, AdjustmentOptions(enforce_nonneg_corr=True))
        if all(v >= 0 for v in {**res.alpha.rho_w, **res.alpha.rho_b}.values()):
            assert adj.alpha.rho_w == res.alpha.rho_w
            assert adj.alpha.rho_b == res.alpha.rho_b
            np.testing.assert_allclose(adj.theta.full, res.theta.full, rtol=1e-12)
        assert "enforce_nonneg_corr" in adj.adjustments_applied

    def test_nonneg_clamp_refits_once_when_negative(self, design2, grid012):
        rng = np.random.default_rng(13)
        ds = random_design2_dataset(rng, 40, grid012, design2, sizes=(2, 3))
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, EXCH)
        negatives = [v for v in {**res.alpha.rho_w, **res.alpha.rho_b}.values() if v < 0]
        adj = finite_sample_adjust(res, AdjustmentOptions(enforce_nonneg_corr=True))
        assert all(v >= 0 for v in {**adj.alpha.rho_w, **adj.alpha.rho_b}.values())
        if negatives:
            assert not np.array_equal(adj.theta.full, res.theta.full)

    def test_t_matches_z_for_large_n(self, design2, grid012):
        rng = np.random.default_rng(14)
        ds = random_design2_dataset(
            rng, 2000, grid012, design2, sizes=(2,),
            mean_fn=lambda a1, r, a2nr, t: 0.2 * t * (1 + (a1 > 0)),
        )
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, IID)
        adj = finite_sample_adjust(res, AdjustmentOptions(t_reference=True))
        assert adj.df == 2000 - spec.n_params
        c = contrast_end_of_study(spec, D11, DMM)
        wz, wt = wald_test(res, c), wald_test(adj, c)
        assert abs(wz.p_value - wt.p_value) < 1e-3

    def test_bias_correction_inflates_variance(self, design2, grid012):
        rng = np.random.default_rng(15)
        ds = random_design2_dataset(rng, 25, grid012, design2, sizes=(2, 3))
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, EXCH)
        adj = finite_sample_adjust(res, AdjustmentOptions(bias_correct=True))
        assert "bias_correct" in adj.adjustments_applied
        # leverage inflation cannot shrink every diagonal entry
        assert np.trace(adj.sigma_theta) > np.trace(res.sigma_theta)

    def test_adjustments_recorded(self, design2, grid012):
        rng = np.random.default_rng(16)
        ds = random_design2_dataset(rng, 30, grid012, design2, sizes=(2,))
        spec = MeanModelSpec.piecewise_linear(design2, grid012)
        res = fit(ds, spec, EXCH, FitOptions(adjustments=AdjustmentOptions.all()))
        assert set(res.adjustments_applied) == {
            "enforce_nonneg_corr", "bias_correct", "t_reference",
        }
        assert res.df == 30 - spec.n_params


class TestEndOfStudyComparator:
    def test_singleton_clusters_match_weighted_mean(self, design2, grid012):
        rng = np.random.default_rng(17)
        ds = random_design2_dataset(rng, 50, grid012, design2, sizes=(1,))
        eos = fit_end_of_study(ds)
        for ci, d in enumerate(eos.cais):
            num = den = 0.0
            for cl in ds.clusters:
                if consistency_indicator(cl, d, design2):
                    w = design_weight(cl, design2)
                    num += w * cl.individuals[0].y[-1]
                    den += w
            assert eos.cell_means[ci] == pytest.approx(num / den)

    def test_contrast_runs(self, design2, grid012):
        rng = np.random.default_rng(18)
        ds = random_design2_dataset(rng, 60, grid012, design2, sizes=(2, 3))
        eos = fit_end_of_study(ds)
        w = end_of_study_contrast(eos, D11, DMM)
        assert w.se > 0
        assert w.ci[0] <= w.estimate <= w.ci[1]
