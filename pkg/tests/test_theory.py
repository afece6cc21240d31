import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepfact.core import AllOnes, AlphaM, BlockSpec, FactorChain, Identity, ObservationSet
from deepfact.errors import DegenerateBlockError, DimensionMismatchError, PretrainUndefinedError
from deepfact.flow import IntegratorConfig, integrate_gradient_flow
from deepfact.metrics import stable_rank
from deepfact.theory import (
    Branch,
    ImplicitParams,
    closed_form_L2,
    constant_C,
    dxd_example_bound,
    dxd_example_truth,
    jacobian,
    lop_2x2_bounds,
    misalignment_bound,
    misalignment_ratios,
    predict_limit,
    pretrain_closed_form,
    solve_implicit,
    srank_lower_bound_dxd,
)


def f1(x, n, total, L):
    a = (2.0 - L) / L
    return x**a - ((total - x) / (n - 1)) ** a


def f2(x, n, total, L):
    a = (2.0 - L) / L
    return (total - (n - 1) * x) ** a - x**a


class TestClosedFormL2:
    def test_worked_example(self):
        lim = closed_form_L2(2.0, 2, 2, 1, 1.0)
        assert lim.sigma1 == pytest.approx(1.8)
        assert lim.sigma_secondary == pytest.approx(0.2)
        assert lim.branch is Branch.CLOSED_FORM_L2

    def test_infinite_m(self):
        lim = closed_form_L2(math.inf, 6, 3, 2, 1.5)
        assert lim.sigma1 == lim.sigma_secondary == 3.0
        assert lim.branch is Branch.DECOUPLED_INFINITY

    @pytest.mark.parametrize("m,d,n,s", [(2.0, 4, 4, 1), (5.0, 6, 3, 2), (100.0, 10, 5, 2)])
    def test_stable_rank_formula(self, m, d, n, s):
        lim = closed_form_L2(m, d, n, s, 1.0)
        big, small = (m + d - 1) ** 4, (m - 1) ** 4
        assert lim.stable_rank == pytest.approx((big + (n - 1) * small) / big, rel=1e-12)
        assert lim.stable_rank == pytest.approx(stable_rank(np.diag(lim.singular_values())), rel=1e-12)
        assert lim.sigma_zero_count == d - n

    def test_errors(self):
        with pytest.raises(DimensionMismatchError):
            closed_form_L2(2.0, 5, 2, 2, 1.0)
        with pytest.raises(DegenerateBlockError):
            closed_form_L2(2.0, 3, 1, 3, 1.0)

    @given(m=st.floats(1.01, 1e6), n=st.integers(2, 6), s=st.integers(1, 3), w=st.floats(0.1, 10.0))
    def test_invariants(self, m, n, s, w):
        lim = closed_form_L2(m, n * s, n, s, w)
        assert lim.sigma1 >= lim.sigma_secondary >= 0
        assert lim.sigma1 + (n - 1) * lim.sigma_secondary == pytest.approx(w * n * s, rel=1e-12)


class TestConstantC:
    def test_direct_evaluation(self):
        c = constant_C(2.0, 2.0, 3, 2)
        assert c.sign == -1.0
        assert c.value == pytest.approx(1.0 / 3.0 - 1.0)

    @given(alpha=st.floats(1e-40, 10.0), m=st.floats(1.001, 1e6), L=st.integers(3, 8), d=st.integers(2, 50))
    def test_always_negative_and_finite(self, alpha, m, L, d):
        c = constant_C(alpha, m, L, d)
        assert c.sign == -1.0
        assert math.isfinite(c.log_abs)

    def test_matches_direct_formula(self):
        for alpha, m, L, d in [(0.5, 3.0, 3, 4), (0.1, 10.0, 5, 3), (2.0, 1.5, 4, 6)]:
            direct = (alpha / m) ** (2 - L) * ((m + d - 1) ** (2 - L) - (m - 1) ** (2 - L))
            assert constant_C(alpha, m, L, d).value == pytest.approx(direct, rel=1e-12)

    def test_grows_as_alpha_shrinks(self):
        logs = [constant_C(a, 5.0, 4, 3).log_abs for a in (1e-2, 1e-10, 1e-40)]
        assert logs[0] < logs[1] < logs[2]

    def test_invalid(self):
        with pytest.raises(ValueError):
            constant_C(1.0, 2.0, 2, 3)
        with pytest.raises(ValueError):
            constant_C(1.0, math.inf, 3, 3)


class TestSolveImplicit:
    @pytest.mark.parametrize("alpha,m,L,n,s", [(0.1, 2.0, 3, 3, 1), (0.5, 5.0, 4, 2, 2), (0.3, 10.0, 5, 4, 1)])
    def test_residuals(self, alpha, m, L, n, s):
        lim = solve_implicit(ImplicitParams(alpha, m, L, n, s))
        total = n * s
        c = constant_C(alpha, m, L, n * s).value
        assert f1(lim.sigma1, n, total, L) == pytest.approx(c, rel=1e-9)
        assert f2(lim.sigma_secondary, n, total, L) == pytest.approx(c, rel=1e-9)
        assert lim.sigma1 + (n - 1) * lim.sigma_secondary == pytest.approx(total, rel=1e-8)
        assert lim.branch is Branch.IMPLICIT

    def test_small_alpha_sweep(self):
        alphas = [10.0**-k for k in range(2, 11)]
        lims = [solve_implicit(ImplicitParams(a, 5.0, 3, 5, 2)) for a in alphas]
        sranks = [lim.stable_rank for lim in lims]
        # The excess over one drops below float resolution of srank itself early on.
        excess = [4 * (lim.sigma_secondary / lim.sigma1) ** 2 for lim in lims]
        assert all(b <= a for a, b in zip(sranks, sranks[1:]))
        assert all(b < a for a, b in zip(excess, excess[1:]))
        assert sranks[-1] <= 1.01

    def test_extreme_scale(self):
        lim = solve_implicit(ImplicitParams(1e-10, 2.0, 5, 3, 1))
        assert lim.sigma1 == pytest.approx(3.0, rel=1e-9)
        assert 0 < lim.sigma_secondary < 1e-20

    def test_branch_continuity(self):
        big_m = solve_implicit(ImplicitParams(0.5, 1e8, 3, 3, 2))
        assert big_m.sigma1 == pytest.approx(2.0, rel=1e-3)
        assert big_m.sigma_secondary == pytest.approx(2.0, rel=1e-3)

    @given(
        log_alpha=st.floats(-8, 0), m=st.floats(1.1, 1e4), L=st.integers(3, 6),
        n=st.integers(2, 5), s=st.integers(1, 3),
    )
    def test_invariants(self, log_alpha, m, L, n, s):
        lim = solve_implicit(ImplicitParams(10.0**log_alpha, m, L, n, s))
        assert lim.sigma1 >= lim.sigma_secondary > 0
        assert lim.sigma1 + (n - 1) * lim.sigma_secondary == pytest.approx(n * s, rel=1e-8)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            ImplicitParams(0.1, 2.0, 2, 3)
        with pytest.raises(ValueError):
            ImplicitParams(0.1, 2.0, 3, 1)


class TestPredictLimit:
    def test_infinite_m(self):
        lim = predict_limit(BlockSpec(2, 3, 3.0), AlphaM(0.1), 5)
        assert lim.sigma1 == lim.sigma_secondary == 6.0
        assert lim.sigma_zero_count == 3

    def test_identity_maps_to_infinite_m(self):
        assert predict_limit(BlockSpec(1, 4), Identity(0.2), 3).branch is Branch.DECOUPLED_INFINITY

    def test_huge_m_depth_two_full_rank(self):
        sv = predict_limit(BlockSpec(1, 10), AlphaM(0.1, 1e10), 2).singular_values()
        np.testing.assert_allclose(sv, 1.0, rtol=1e-8)

    def test_small_alpha_depth_three(self):
        lim = predict_limit(BlockSpec(1, 4), AlphaM(1e-4, 3.0), 3)
        assert lim.sigma1 == pytest.approx(4.0, rel=1e-3)
        assert lim.sigma_secondary < 1e-3

    def test_depth_two_independent_of_alpha(self):
        spec = BlockSpec(2, 3)
        outs = {predict_limit(spec, AlphaM(a, 4.0), 2) for a in (1e-6, 1e-2, 1.0)}
        assert len(outs) == 1

    def test_errors(self):
        with pytest.raises(DegenerateBlockError):
            predict_limit(BlockSpec(3, 1), AlphaM(0.1, 2.0), 3)
        with pytest.raises(TypeError):
            predict_limit(BlockSpec(1, 3), AllOnes(0.1), 3)

    def test_singular_values_layout(self):
        sv = predict_limit(BlockSpec(2, 3), AlphaM(0.1, 2.0), 3).singular_values()
        assert sv.shape == (6,)
        assert np.all(sv[3:] == 0.0)
        assert np.all(np.diff(sv) <= 0)


class TestPretrain:
    def test_scaled_identity(self):
        obs = ObservationSet.from_entries(3, [(i, i, 2.0) for i in range(3)])
        A, B = pretrain_closed_form(0.1 * np.eye(3), 0.1 * np.eye(3), obs)
        np.testing.assert_allclose(A, math.sqrt(2.0) * np.eye(3), atol=1e-12)
        np.testing.assert_allclose(B, math.sqrt(2.0) * np.eye(3), atol=1e-12)

    @given(seed=st.integers(0, 2**32 - 1))
    def test_fits_observations(self, seed):
        r = np.random.default_rng(seed)
        perm = r.permutation(3)
        obs = ObservationSet.from_entries(3, [(i, int(perm[i]), float(r.uniform(0.5, 2.0))) for i in range(3)])
        A0 = 0.1 * r.standard_normal((3, 3))
        B0 = 0.1 * r.standard_normal((3, 3))
        try:
            A, B = pretrain_closed_form(A0, B0, obs)
        except PretrainUndefinedError:
            return
        W = A @ B
        np.testing.assert_allclose(W[obs.rows, obs.cols], obs.targets, atol=1e-10)

    def test_matches_simulation(self):
        r = np.random.default_rng(3)
        obs = ObservationSet.from_entries(3, [(0, 1, 1.0), (1, 2, 1.5), (2, 0, 0.8)])
        A0 = 0.3 * r.standard_normal((3, 3))
        B0 = 0.3 * r.standard_normal((3, 3))
        A, B = pretrain_closed_form(A0, B0, obs)
        traj = integrate_gradient_flow(FactorChain.from_matrices([B0, A0]), obs, IntegratorConfig(t_max=500.0, stop_loss=1e-14))
        assert traj.final_loss <= 1e-14
        np.testing.assert_allclose(traj.final_chain[1], A, atol=1e-4)
        np.testing.assert_allclose(traj.final_chain[0], B, atol=1e-4)

    def test_unreachable_target(self):
        # a0 = -b0 makes P + Q/2 = 0: the pair can only shrink towards zero.
        obs = ObservationSet.from_entries(1, [(0, 0, 1.0)])
        with pytest.raises(PretrainUndefinedError):
            pretrain_closed_form(np.array([[0.5]]), np.array([[-0.5]]), obs)

    def test_not_a_permutation(self):
        obs = ObservationSet.from_entries(2, [(0, 0, 1.0), (1, 0, 1.0)])
        with pytest.raises(ValueError):
            pretrain_closed_form(np.eye(2), np.eye(2), obs)


class TestLopBounds:
    def test_worked_example(self):
        b = lop_2x2_bounds(1.0, 0.1)
        assert b.srank_lower == pytest.approx(1.449, abs=1e-3)
        assert b.decay_rate == 2.0
        assert b.loss_envelope_coefficient == pytest.approx(0.005)
        assert b.envelope(1.0, 1.0) == pytest.approx(0.005)

    def test_small_w12_limit(self):
        assert lop_2x2_bounds(1.0, 1e-12).srank_lower == pytest.approx(2.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            lop_2x2_bounds(0.0, 0.1)

    def test_warm_start_simulation(self):
        w, w12 = 1.0, 0.5
        bounds = lop_2x2_bounds(w, w12)
        A0 = B0 = math.sqrt(w) * np.eye(2)
        obs = ObservationSet.from_entries(2, [(0, 0, w), (1, 1, w), (0, 1, w12)])
        traj = integrate_gradient_flow(FactorChain.from_matrices([B0, A0]), obs, IntegratorConfig(t_max=50.0, record_every=10))
        assert traj.converged
        assert np.all(traj.losses <= bounds.envelope(traj.times) * (1 + 1e-9))
        assert stable_rank(traj.products[-1]) >= bounds.srank_lower


class TestJacobian:
    def test_row_norms(self, rng):
        A, B = rng.standard_normal((2, 3, 3))
        obs = ObservationSet.from_entries(3, [(0, 1, 0.0), (2, 2, 0.0), (1, 0, 0.0)])
        rep = jacobian(A, B, obs)
        for n, (i, j, _) in enumerate(obs):
            assert np.sum(rep.matrix[n] ** 2) == pytest.approx(A[i] @ A[i] + B[:, j] @ B[:, j])
        assert rep.sigma_min <= rep.sigma_max
        assert rep.lazy_threshold >= 0

    def test_zero(self):
        rep = jacobian(np.zeros((2, 2)), np.zeros((2, 2)), ObservationSet.from_entries(2, [(0, 0, 1.0)]))
        assert not rep.matrix.any() and rep.sigma_min == rep.sigma_max == 0.0

    def test_finite_differences(self, rng):
        d = 3
        A, B = rng.standard_normal((2, d, d))
        obs = ObservationSet.from_entries(d, [(0, 0, 0.0), (0, 2, 0.0), (1, 1, 0.0), (2, 1, 0.0)])
        theta = np.vstack([A, B.T]).ravel(order="F")

        def predictions(vec):
            T = vec.reshape((2 * d, d), order="F")
            W = T[:d] @ T[d:].T
            return W[obs.rows, obs.cols]

        h = 1e-6
        J = np.empty((len(obs), theta.size))
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = h
            J[:, k] = (predictions(theta + e) - predictions(theta - e)) / (2 * h)
        np.testing.assert_allclose(jacobian(A, B, obs).matrix, J, atol=1e-6)

    @given(seed=st.integers(0, 2**32 - 1))
    def test_lipschitz(self, seed):
        r = np.random.default_rng(seed)
        d = 3
        obs = ObservationSet.from_entries(d, [(i, j, 0.0) for i in range(d) for j in range(d) if r.random() < 0.6] or [(0, 0, 0.0)])
        A1, B1, A2, B2 = r.standard_normal((4, d, d))
        J1 = jacobian(A1, B1, obs).matrix
        J2 = jacobian(A2, B2, obs).matrix
        dist = math.sqrt(np.sum((A1 - A2) ** 2) + np.sum((B1 - B2) ** 2))
        assert np.linalg.norm(J1 - J2, 2) <= math.sqrt(d) * dist + 1e-12


class TestSrankBound:
    def test_example_formula(self):
        assert dxd_example_bound(4) == pytest.approx((15 / 9) ** 2)

    def test_zero_radius(self, rng):
        A = rng.standard_normal((4, 4))
        assert srank_lower_bound_dxd(A, 0.0, 4) == pytest.approx(stable_rank(A))

    @pytest.mark.parametrize("d", [2, 4, 6, 9])
    def test_worked_example_specialises(self, d):
        w = 2.0
        A = math.sqrt(w) * np.eye(d)
        obs = ObservationSet.from_matrix(dxd_example_truth(d, w, 0.01), [(i, j) for i in range(d) for j in range(i, d)])
        rep = jacobian(A, A, obs)
        assert rep.sigma_min == pytest.approx(math.sqrt(2 * w))
        assert rep.sigma_max == pytest.approx(math.sqrt(2 * w))
        assert srank_lower_bound_dxd(A, rep.sigma_min, d) == pytest.approx(dxd_example_bound(d))

    def test_example_truth_rank_one(self):
        T = dxd_example_truth(5, 1.5, 0.2)
        assert np.linalg.matrix_rank(T) == 1
        assert T[1, 3] == pytest.approx(1.5 * 0.04)
        np.testing.assert_allclose(np.diag(T), 1.5)


class TestMisalignment:
    def test_aligned_rows_have_zero_ratio(self):
        B = np.array([[1.0, 0.0], [0.0, 1.0]])
        A = np.array([[2.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_allclose(misalignment_ratios(A, B), 0.0)

    def test_orthogonal_row(self):
        B = np.eye(2)
        A = np.array([[0.0, 3.0], [1.0, 1.0]])
        np.testing.assert_allclose(misalignment_ratios(A, B), [1.0, 0.5])

    def test_bound_scales_with_init(self):
        A0 = np.full((2, 2), 0.1)
        B0 = np.full((2, 2), 0.1)
        small = misalignment_bound(0.1 * A0, 0.1 * B0, 1.0, 2.0)
        big = misalignment_bound(A0, B0, 1.0, 2.0)
        assert np.all(small < big)
        assert big[0] > big[1]
