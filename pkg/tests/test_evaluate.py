"""Lipschitz lower bounds, the minimal attack, and the tightness chain."""

import numpy as np
import pytest

from lipcert.bounds import network_layer_bounds
from lipcert.certify import certify_batch
from lipcert.evaluate import (
    global_lipschitz_lower,
    local_lipschitz_lower,
    min_l2_attack,
    network_jacobian_batch,
    tightness_csv,
    tightness_report,
)
from lipcert.graph import LipschitzBound, aggregate_lipschitz, forward_eval, replace_params
from lipcert.model_io import init_params, parse_model


def _linear_net(mat):
    g = parse_model(f"input {mat.shape[1]}\nfc out={mat.shape[0]}\n")
    return replace_params(g, {"fc0.weight": mat})


class TestJacobian:
    def test_linear_network_jacobian_is_matrix(self, rng):
        m = rng.standard_normal((3, 5))
        g = _linear_net(m)
        jac = network_jacobian_batch(g, rng.standard_normal((4, 5)))
        for b in range(4):
            assert np.allclose(jac[b], m, atol=1e-12)

    def test_relu_network_jacobian_matches_finite_differences(self, rng):
        g = init_params(parse_model("input 4\nfc out=6\nrelu\nfc out=3\n"), 5)
        x = rng.standard_normal(4) + 0.3
        jac = network_jacobian_batch(g, x[None])[0]
        eps = 1e-6
        for i in range(4):
            dx = np.zeros(4)
            dx[i] = eps
            fd = (
                forward_eval(g, x + dx).data - forward_eval(g, x - dx).data
            ) / (2 * eps)
            assert np.allclose(jac[:, i], fd, atol=1e-5)


class TestLocalLower:
    def test_linear_network_exact_on_every_trial(self, rng):
        m = rng.standard_normal((3, 6))
        g = _linear_net(m)
        smax = float(np.linalg.svd(m, compute_uv=False)[0])
        got = local_lipschitz_lower(g, rng.standard_normal(6), trials=5, seed=1)
        assert got == pytest.approx(smax, rel=1e-12)

    def test_homogeneous_scaling_doubles(self, rng):
        m = rng.standard_normal((3, 6))
        x = rng.standard_normal(6)
        a = local_lipschitz_lower(_linear_net(m), x, trials=3, seed=0)
        b = local_lipschitz_lower(_linear_net(2 * m), x, trials=3, seed=0)
        assert b == pytest.approx(2 * a, rel=1e-12)

    def test_more_trials_never_decrease(self, rng):
        g = init_params(parse_model("input 4\nfc out=8\ntanh\nfc out=3\n"), 2)
        x = rng.standard_normal(4)
        lo = local_lipschitz_lower(g, x, trials=20, seed=3)
        hi = local_lipschitz_lower(g, x, trials=60, seed=3)
        assert hi >= lo - 1e-12

    def test_invariant_to_logit_shift(self, rng):
        g = init_params(parse_model("input 4\nfc out=8\nrelu\nfc out=3\n"), 4)
        x = rng.standard_normal(4)
        base = local_lipschitz_lower(g, x, trials=10, seed=0)
        shifted = replace_params(
            g, {"fc2.bias": g.nodes[2].bias + 42.0}
        )
        got = local_lipschitz_lower(shifted, x, trials=10, seed=0)
        assert got == pytest.approx(base, rel=1e-12)

    def test_never_exceeds_certified_bound(self, rng):
        g = init_params(parse_model("input 1x8x8\nconv out=3 k=3x3 stride=2\nrelu\n"
                                    "fc out=3\n"), 6)
        per, _ = network_layer_bounds(g, method="svd")
        l_cert = aggregate_lipschitz(g, per).value
        for i in range(5):
            x = rng.uniform(0, 1, (1, 8, 8))
            assert local_lipschitz_lower(g, x, trials=30, seed=i) <= l_cert


class TestGlobalLower:
    def test_singleton_equals_local(self, rng):
        g = init_params(parse_model("input 4\nfc out=8\ntanh\nfc out=3\n"), 7)
        x = rng.standard_normal((1, 4))
        local = local_lipschitz_lower(g, x[0], trials=10, seed=0)
        glob = global_lipschitz_lower(g, x, trials=10, seed=0)
        assert glob == pytest.approx(local)

    def test_linear_network_set_independent(self, rng):
        m = rng.standard_normal((3, 5))
        g = _linear_net(m)
        smax = float(np.linalg.svd(m, compute_uv=False)[0])
        xs = rng.standard_normal((4, 5))
        assert global_lipschitz_lower(g, xs, trials=2, seed=0) == pytest.approx(
            smax, rel=1e-12
        )


class TestAttack:
    def test_binary_linear_closed_form(self, rng):
        # decision boundary of [w, -w]: distance |2 w.x + b1 - b2| / |2w|
        w = rng.standard_normal(6)
        g = parse_model("input 6\nfc out=2\n")
        g = replace_params(
            g,
            {"fc0.weight": np.stack([w, -w]), "fc0.bias": np.array([0.3, -0.3])},
        )
        x = rng.standard_normal(6)
        logits = forward_eval(g, x).data
        t = int(np.argmax(logits))
        exact = abs(logits[0] - logits[1]) / np.linalg.norm(2 * w)
        res = min_l2_attack(g, x, t)
        assert res.found
        assert res.norm == pytest.approx(exact, rel=1e-3)

    def test_already_misclassified_returns_zero(self, rng):
        g = init_params(parse_model("input 4\nfc out=3\n"), 1)
        x = rng.standard_normal(4)
        wrong = int(np.argmin(forward_eval(g, x).data))
        res = min_l2_attack(g, x, wrong)
        assert res.found and res.norm == 0.0
        assert np.array_equal(res.perturbation, np.zeros(4))

    def test_perturbation_flips_argmax(self, rng):
        g = init_params(parse_model("input 1x8x8\nconv out=4 k=3x3 stride=2\nrelu\n"
                                    "fc out=3\n"), 9)
        flips = 0
        for i in range(5):
            x = rng.uniform(0, 1, (1, 8, 8))
            t = int(np.argmax(forward_eval(g, x).data))
            res = min_l2_attack(g, x, t)
            if res.found and res.norm > 0:
                adv = x + res.perturbation
                assert int(np.argmax(forward_eval(g, adv).data)) != t
                flips += 1
        assert flips >= 3

    def test_attack_never_beats_certificate(self, rng):
        """Soundness cross-check with zero tolerance."""
        g = init_params(parse_model("input 1x6x6\nconv out=3 k=3x3\nrelu\nfc out=3\n"),
                        12)
        x = rng.uniform(0, 1, (8, 1, 6, 6))
        y = forward_eval(g, x).data.argmax(axis=1)
        results = certify_batch(g, x, y, norm_method="svd")
        for r in results:
            res = min_l2_attack(g, x[r.sample_id], int(y[r.sample_id]))
            if res.found:
                assert res.norm >= r.radius


class TestTightness:
    def test_linear_network_ratios_are_one(self, rng):
        m = rng.standard_normal((3, 6))
        g = _linear_net(m)
        smax = float(np.linalg.svd(m, compute_uv=False)[0])
        x = rng.standard_normal((6, 6))
        y = forward_eval(g, x).data.argmax(axis=1)
        records, summary = tightness_report(
            g, x, y, LipschitzBound(smax), trials=3, seed=0
        )
        assert summary["median_r1"] == pytest.approx(1.0, rel=1e-9)
        assert summary["median_r2"] == pytest.approx(1.0, rel=1e-9)

    def test_chain_ordering_and_csv(self, rng):
        g = init_params(parse_model("input 1x6x6\nconv out=3 k=3x3\nrelu\nfc out=3\n"),
                        14)
        x = rng.uniform(0, 1, (6, 1, 6, 6))
        y = forward_eval(g, x).data.argmax(axis=1)
        per, _ = network_layer_bounds(g, method="svd")
        l_cert = aggregate_lipschitz(g, per)
        records, summary = tightness_report(g, x, y, l_cert, trials=10, seed=1)
        for r in records:
            assert r.a <= r.b * (1 + 1e-9)
            assert r.b <= r.c * (1 + 1e-9)
            if r.attack_found:
                assert r.d >= r.a  # certified radius below the found attack
        text = tightness_csv(records)
        assert text.splitlines()[0] == "sample_id,A,B,C,D,r1,r2,r3,attack_found"
        assert len(text.strip().splitlines()) == len(records) + 1
