"""Power iteration, certificates, oracles, and closed-form layer bounds."""

import math

import numpy as np
import pytest

import lipcert.autodiff as ad
from lipcert.autodiff import Tape, Tensor
from lipcert.bounds import (
    ComposedMap,
    ConvOperatorMap,
    DiagMap,
    MatrixMap,
    NormCertificate,
    PowerIterState,
    activation_bound,
    batchnorm_bound,
    certified_operator_norm,
    conv_norm_bound,
    conv_operator_matrix,
    exact_spectral_norm,
    kernel_matrix,
    layer_bound,
    network_layer_bounds,
    pool_bound,
    power_chain_bounds,
    power_step,
    repetition_count,
)
from lipcert.graph import BatchNorm, aggregate_lipschitz
from lipcert.model_io import init_params, parse_model

from conftest import gradcheck


def _has_interior_window(size: int, k: int, s: int, pad: int) -> bool:
    """Some output window lies fully inside the unpadded input.

    The lower half of the kernel-matrix sandwich needs a full kernel patch of
    real input cells; strided, padded layouts can skip all of them.
    """
    starts = range(0, size + 2 * pad - k + 1, s)
    return any(pad <= j and j + k <= size + pad for j in starts)


class TestPowerStep:
    def test_identity_map_norm_one(self, rng):
        phi = MatrixMap(np.eye(3))
        st = PowerIterState.initialize(3, seed=0)
        st, sigma = power_step(phi, st)
        assert st.r_curr == pytest.approx(1.0)
        assert sigma == pytest.approx(1.0)

    def test_diagonal_converges_to_squared_norm(self):
        phi = MatrixMap(np.diag([3.0, 1.0]))
        st = PowerIterState.initialize(2, seed=1)
        for _ in range(80):
            st, sigma = power_step(phi, st)
        assert st.r_curr == pytest.approx(9.0, abs=1e-9)
        assert sigma == pytest.approx(3.0, abs=1e-9)

    def test_random_matrix_matches_svd(self, rng):
        m = rng.standard_normal((50, 30))
        smax = exact_spectral_norm(m)
        st = PowerIterState.initialize(30, seed=2)
        for _ in range(500):
            st, sigma = power_step(MatrixMap(m), st)
        assert abs(sigma - smax) <= 1e-6 * smax

    def test_update_is_gram_matrix_product(self, rng):
        m = rng.standard_normal((4, 5))
        st = PowerIterState.initialize(5, seed=3)
        u0 = st.u / np.linalg.norm(st.u)
        st2, _ = power_step(MatrixMap(m), st)
        assert np.allclose(st2.u, m.T @ (m @ u0))
        assert st2.k == st.k + 1 and np.isnan(st2.r_prev)

    def test_zero_vector_reinitializes_with_warning(self):
        st = PowerIterState(u=np.zeros(3), rng_seed=7)
        with pytest.warns(RuntimeWarning, match="reinitializing"):
            st2, _ = power_step(MatrixMap(np.eye(3)), st)
        assert np.linalg.norm(st2.u) > 0

    def test_conv_operator_limit_matches_matrix_svd(self, rng):
        g = init_params(parse_model("input 1x6x6\nconv out=2 k=4x4 stride=2\n"), 13)
        conv = g.nodes[0]
        st = PowerIterState.initialize(36, seed=4)
        for _ in range(600):
            st, sigma = power_step(ConvOperatorMap(conv), st)
        exact = exact_spectral_norm(conv)
        assert abs(sigma - exact) <= 1e-9 * max(exact, 1.0)


class TestCertifiedNorm:
    def test_converged_chain_has_zero_error(self):
        # run to exact float convergence: R_k == R_{k-1} gives error_term 0
        r, err, _ = power_chain_bounds(
            np.diag([2.0, 0.5]), k_iters=300, batch_m=4, tol_rel=0.0
        )
        assert np.all(err == 0.0)
        assert np.sqrt(r.max()) == pytest.approx(2.0, rel=1e-12)
        cert = certified_operator_norm(np.diag([2.0, 0.5]), k_iters=300, batch_m=4)
        assert cert.upper_bound >= math.sqrt(cert.raw_R_k)
        assert 2.0 <= cert.upper_bound <= 2.0 * (1 + 1e-6)

    def test_batch_128_failure_probability(self):
        cert = certified_operator_norm(np.eye(2), k_iters=5, batch_m=128)
        assert cert.failure_probability <= 1e-12

    def test_diagonal_bound_tight_and_sound_across_seeds(self):
        phi = np.diag([3.0, 1.0])
        for seed in range(25):
            cert = certified_operator_norm(phi, k_iters=50, batch_m=8, seed=seed)
            assert cert.upper_bound >= 3.0
            assert cert.upper_bound <= 3.0 + 1e-6

    def test_soundness_on_random_layers(self, rng):
        """Upper bound never undercuts the SVD oracle (falsification sweep)."""
        for trial in range(200):
            m = int(rng.integers(2, 40))
            n = int(rng.integers(2, 40))
            mat = rng.standard_normal((m, n)) * rng.uniform(0.1, 5.0)
            cert = certified_operator_norm(
                mat, k_iters=60, batch_m=4, seed=trial
            )
            assert cert.upper_bound >= exact_spectral_norm(mat) * (1 - 1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            certified_operator_norm(np.eye(2), k_iters=1)
        with pytest.raises(ValueError):
            certified_operator_norm(np.eye(2), batch_m=0)

    def test_certificate_square_dominates_rayleigh(self, rng):
        mat = rng.standard_normal((20, 20))
        cert = certified_operator_norm(mat, k_iters=10, batch_m=4)
        assert cert.upper_bound**2 >= cert.raw_R_k

    def test_error_term_monotone_after_settling(self, rng):
        """Once the Rayleigh sequence climbs steadily, the error shrinks."""
        mat = rng.standard_normal((30, 30))
        errs = []
        for k in range(2, 40):
            _, err, _ = power_chain_bounds(mat, k_iters=k, batch_m=1, seed=5,
                                           tol_rel=0.0)
            errs.append(err[0])
        tail = errs[5:]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(tail, tail[1:]))


class TestExactOracle:
    def test_identity(self):
        assert exact_spectral_norm(np.eye(4)) == pytest.approx(1.0)

    def test_diagonal_abs(self):
        assert exact_spectral_norm(np.diag([2.0, -5.0])) == pytest.approx(5.0)

    def test_budget_refusal(self, rng):
        with pytest.raises(ValueError, match="budget"):
            exact_spectral_norm(rng.standard_normal((300, 300)), element_budget=100)

    def test_conv_matrix_matches_forward(self, rng):
        from lipcert.graph import forward_eval

        g = init_params(parse_model("input 3x7x7\nconv out=4 k=3x2 pad=1 stride=2\n"), 2)
        conv = g.nodes[0]
        mat = conv_operator_matrix(conv)
        x = rng.standard_normal((3, 7, 7))
        via_graph = forward_eval(g, x).data.ravel()
        bias = np.repeat(conv.bias, conv.out_shape[1] * conv.out_shape[2])
        assert np.allclose(mat @ x.ravel() + bias, via_graph, atol=1e-12)

    def test_batchnorm_diagonal(self):
        bn = BatchNorm(
            "bn", np.array([2.0, -4.0]), np.zeros(2), np.zeros(2),
            np.array([3.0, 0.0]), eps=1.0,
        )
        assert exact_spectral_norm(bn) == pytest.approx(4.0)


class TestRepetitionCount:
    def test_small_kernel_stride_two(self):
        assert repetition_count(30, 30, 4, 4, 2, 2) == 4

    def test_pool_2x2_stride_2(self):
        assert repetition_count(28, 28, 2, 2, 2, 2) == 1

    def test_kernel_equals_input(self):
        assert repetition_count(5, 5, 5, 5, 1, 1) == 1

    def test_overlapping_3x3(self):
        assert repetition_count(28, 28, 3, 3, 1, 1) == 9

    def test_kernel_too_large_errors(self):
        with pytest.raises(ValueError, match="larger"):
            repetition_count(3, 3, 4, 4, 1, 1)

    def test_never_exceeds_kernel_area(self, rng):
        for _ in range(300):
            hk, wk = rng.integers(1, 6, 2)
            hin = int(rng.integers(hk, 15))
            win = int(rng.integers(wk, 15))
            hs, ws = rng.integers(1, 4, 2)
            n = repetition_count(hin, win, int(hk), int(wk), int(hs), int(ws))
            assert 1 <= n <= hk * wk


class TestConvBound:
    def test_pointwise_conv_equals_matrix_norm(self, rng):
        g = parse_model("input 3x5x5\nconv out=4 k=1x1\n")
        conv = g.nodes[0]
        w = rng.standard_normal(conv.weight.shape)
        from lipcert.graph import replace_params

        conv = replace_params(g, {"conv0.weight": w}).nodes[0]
        bound, _ = conv_norm_bound(conv, method="svd")
        assert bound.value == pytest.approx(exact_spectral_norm(w.reshape(4, 3)))

    def test_first_layer_factor_two(self, small_conv_net_text):
        g = init_params(parse_model(small_conv_net_text), 0)
        conv = g.nodes[0]
        bound, _ = conv_norm_bound(conv, method="svd")
        wnorm = exact_spectral_norm(kernel_matrix(conv))
        assert bound.value == pytest.approx(2.0 * wnorm)

    def test_sandwich_on_random_convs(self, rng):
        checked = 0
        for trial in range(40):
            ci = int(rng.integers(1, 3))
            co = int(rng.integers(1, 4))
            k = int(rng.integers(1, 5))
            s = int(rng.integers(1, 4))
            size = int(rng.integers(max(k, 4), 11))
            pad = int(rng.integers(0, 2))
            if not _has_interior_window(size, k, s, pad):
                continue
            text = (
                f"input {ci}x{size}x{size}\n"
                f"conv out={co} k={k}x{k} pad={pad} stride={s}\n"
            )
            g = init_params(parse_model(text), 100 + trial)
            conv = g.nodes[0]
            exact = exact_spectral_norm(conv)
            wnorm = exact_spectral_norm(kernel_matrix(conv))
            bound, _ = conv_norm_bound(conv, method="svd")
            assert wnorm <= exact * (1 + 1e-10)
            assert exact <= bound.value * (1 + 1e-10)
            checked += 1
        assert checked >= 20

    def test_upper_side_holds_even_without_interior_window(self):
        # kernel as large as the input, stride skips every full patch: the
        # lower sandwich side has no full kernel application to realize it,
        # but the sqrt(n)|W'| side must still dominate
        g = init_params(parse_model("input 1x4x4\nconv out=2 k=4x4 pad=1 stride=3\n"), 0)
        conv = g.nodes[0]
        exact = exact_spectral_norm(conv)
        bound, _ = conv_norm_bound(conv, method="svd")
        assert exact <= bound.value * (1 + 1e-10)

    def test_power_and_svd_agree(self, small_conv_net_text):
        g = init_params(parse_model(small_conv_net_text), 4)
        conv = g.nodes[0]
        b_svd, _ = conv_norm_bound(conv, method="svd")
        b_pow, cert = conv_norm_bound(conv, method="power", batch_m=8, seed=0)
        assert b_pow.value >= b_svd.value * (1 - 1e-12)
        assert b_pow.value <= b_svd.value * (1 + 1e-6)
        assert isinstance(cert, NormCertificate)


class TestClosedFormBounds:
    def test_batchnorm_identity(self):
        assert batchnorm_bound(np.ones(4), np.zeros(4), 1.0).value == pytest.approx(1.0)

    def test_batchnorm_elementwise_max(self):
        assert batchnorm_bound(
            np.array([1.0, -3.0]), np.array([0.0, 8.0]), 1.0
        ).value == pytest.approx(1.0)
        assert batchnorm_bound(
            np.array([2.0, -4.0]), np.array([3.0, 0.0]), 1.0
        ).value == pytest.approx(4.0)

    def test_batchnorm_validation(self):
        with pytest.raises(ValueError):
            batchnorm_bound(np.ones(2), np.array([-0.1, 0.0]), 1.0)
        with pytest.raises(ValueError):
            batchnorm_bound(np.ones(2), np.ones(2), 0.0)

    @pytest.mark.parametrize(
        "kind,alpha,expected",
        [
            ("relu", 1.0, 1.0),
            ("leaky_relu", 0.3, 1.0),
            ("leaky_relu", -2.0, 2.0),
            ("sigmoid", 1.0, 0.25),
            ("tanh", 1.0, 1.0),
            ("softplus", 1.0, 1.0),
            ("elu", 2.0, 2.0),
            ("elu", 0.5, 1.0),
        ],
    )
    def test_activation_table(self, kind, alpha, expected):
        assert activation_bound(kind, alpha).value == pytest.approx(expected)

    def test_activation_unknown_kind(self):
        with pytest.raises(ValueError):
            activation_bound("swish")

    def test_pool_bounds(self):
        assert pool_bound("max", 28, 28, 2, 2, 2, 2).value == pytest.approx(1.0)
        assert pool_bound("avg", 28, 28, 2, 2, 2, 2).value == pytest.approx(0.5)
        assert pool_bound("max", 28, 28, 3, 3, 1, 1).value == pytest.approx(3.0)


class TestDifferentiability:
    def test_sigma_gradient_matches_finite_differences(self, rng):
        """One-step spectral estimate is differentiable in the weights."""
        w0 = rng.standard_normal((5, 4))
        u = rng.standard_normal(4)
        u = u / np.linalg.norm(u)

        wt = Tensor(w0, requires_grad=True)
        with Tape() as tape:
            v = MatrixMap(wt).apply_tensor(Tensor(u.reshape(1, -1)))
            sigma = ad.sqrt(ad.sumsq(v))
        (g,) = tape.gradient(sigma, [wt])

        def forward(w):
            return float(np.linalg.norm(w @ u))

        assert gradcheck(forward, w0, g) < 1e-4

    def test_composed_map_with_normalization_flag(self, rng):
        m = MatrixMap(rng.standard_normal((3, 4)))
        d = DiagMap(np.array([1.0, 2.0, 0.5]))
        comp = ComposedMap([m, d])
        assert comp.has_normalization
        u = rng.standard_normal((2, 4))
        assert np.allclose(comp.apply(u), (u @ m.matrix.T) * d.scale)


class TestNetworkDriver:
    def test_bounds_and_csv(self, small_conv_net_text):
        from lipcert.bounds import layer_bounds_csv

        g = init_params(parse_model(small_conv_net_text), 1)
        bounds, certs = network_layer_bounds(g, method="svd")
        assert len(bounds) == 7
        agg = aggregate_lipschitz(g, bounds)
        assert agg.value > 0 and agg.grade == "certified"
        csv_text = layer_bounds_csv(g, bounds, certs, "svd")
        lines = csv_text.strip().splitlines()
        assert lines[0] == "layer,method,upper_bound,error_term,failure_probability"
        assert len(lines) == 8

    def test_power_bounds_dominate_svd(self, small_conv_net_text):
        g = init_params(parse_model(small_conv_net_text), 2)
        b_svd, _ = network_layer_bounds(g, method="svd")
        b_pow, _ = network_layer_bounds(g, method="power", batch_m=8, seed=3)
        for name, b in b_svd.items():
            assert b_pow[name].value >= b.value * (1 - 1e-12)
            assert b_pow[name].value <= b.value * (1 + 1e-4)
