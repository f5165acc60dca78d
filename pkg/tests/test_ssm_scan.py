# tests/test_ssm_scan.py
import numpy as np
import pytest

from errors import ConfigError
from ssm_scan import (SS2DParams, SSMParams, bottleneck_scan, cross_merge, cross_scan, direction_orders,
                      init_ssm, inverse_softplus, refold, scan, scan_reference, selective_scan, ss2d, unfold)
from tensor_ops import layer_norm


def make_params(rng, groups=1, width=8, ratio=2, d_state=4, selective=False, **overrides) -> SSMParams:
    values = {k: v.astype(np.float64) for k, v in init_ssm(rng, groups, width, ratio, d_state, selective).items()}
    values.update(overrides)
    return SSMParams(**values)


def group_values(params: SSMParams, k: int = 0) -> dict:
    out = {}
    for name in ("a_raw", "delta_raw", "b", "c", "d", "w_delta"):
        p = getattr(params, name)
        if p is not None:
            out[name] = np.asarray(p)[k]
    return out


def scan_inputs(rng, bt=2, k=2, length=5, width=3, d_state=4, out_width=2, selective=False):
    inputs = {
        "tokens": rng.normal(size=(bt, k, length, width)),
        "a_raw": rng.normal(size=(k, d_state)),
        "delta_raw": rng.normal(size=(k, d_state)),
        "b_mat": rng.normal(size=(k, d_state, width)),
        "c_mat": rng.normal(size=(k, out_width, d_state)),
        "d_mat": rng.normal(size=(k, out_width, width)),
    }
    if selective:
        inputs["w_delta"] = 0.3 * rng.normal(size=(k, d_state, width))
    return inputs


# --------------------------------------------------------------------
# Recurrence
# --------------------------------------------------------------------
class TestScan:
    def test_zero_input_matrix_leaves_skip_path(self, rng):
        params = make_params(rng, width=4, ratio=1, b=np.zeros((1, 4, 4)))
        tokens = rng.normal(size=(6, 4))
        np.testing.assert_allclose(scan(params, tokens), tokens @ np.asarray(params.d)[0].T, atol=1e-12)

    def test_single_token(self, rng):
        p = make_params(rng, width=4, ratio=1)
        f = rng.normal(size=(1, 4))
        g = group_values(p)
        delta = np.logaddexp(0.0, g["delta_raw"])
        expected = g["c"] @ (delta * (g["b"] @ f[0])) + g["d"] @ f[0]
        np.testing.assert_allclose(scan(p, f)[0], expected, rtol=1e-10)

    @pytest.mark.parametrize("zoh", [False, True])
    @pytest.mark.parametrize("selective", [False, True])
    def test_matches_step_by_step_reference(self, rng, zoh, selective):
        p = make_params(rng, width=6, ratio=1, d_state=5, selective=selective)
        tokens = rng.normal(size=(40, 6))
        np.testing.assert_allclose(scan(p, tokens, zoh), scan_reference(group_values(p), tokens, zoh), rtol=1e-5)

    def test_groups_scan_independently(self, rng):
        p = make_params(rng, groups=3, width=4, ratio=1)
        tokens = rng.normal(size=(2, 3, 7, 4))
        out = scan(p, tokens)
        for b in range(2):
            for k in range(3):
                np.testing.assert_allclose(out[b, k], scan_reference(group_values(p, k), tokens[b, k]), rtol=1e-10)

    def test_linear_in_tokens(self, rng):
        p = make_params(rng, width=4, ratio=1)
        x, z = rng.normal(size=(2, 12, 4))
        np.testing.assert_allclose(scan(p, 2.0 * x - 0.5 * z), 2.0 * scan(p, x) - 0.5 * scan(p, z), atol=1e-10)

    def test_long_sequences_stay_bounded(self, rng):
        p = make_params(rng, width=4, ratio=1)
        tokens = rng.uniform(-1, 1, size=(3000, 4))
        g = group_values(p)
        a = -np.logaddexp(0.0, g["a_raw"])
        delta = np.logaddexp(0.0, g["delta_raw"])
        h_bound = delta * np.abs(g["b"]).sum(axis=1) / (1.0 - np.exp(delta * a))
        y_bound = np.abs(g["c"]) @ h_bound + np.abs(g["d"]).sum(axis=1)
        out = scan(p, tokens)
        assert np.all(np.isfinite(out))
        assert np.all(np.abs(out) <= y_bound + 1e-9)

    def test_inverse_softplus(self):
        y = np.array([1e-3, 0.1, 1.0, 7.0])
        np.testing.assert_allclose(np.logaddexp(0.0, inverse_softplus(y)), y, rtol=1e-10)

    def test_init_rejects_indivisible_width(self, rng):
        with pytest.raises(ConfigError):
            init_ssm(rng, 1, 10, 4, 4)

    def test_init_state_matrix_is_stable(self, rng):
        v = init_ssm(rng, 4, 16, 4, 8, selective=True)
        assert np.all(-np.logaddexp(0.0, v["a_raw"].astype(np.float64)) < 0)
        assert v["w_delta"].shape == (4, 8, 4)
        assert all(x.dtype == np.float32 for x in v.values())


class TestBottleneck:
    def test_ratio_one_with_identity_projections_is_plain_scan(self, rng):
        eye = np.eye(6)[None]
        p = make_params(rng, width=6, ratio=1, reduce=eye, expand=eye)
        tokens = rng.normal(size=(9, 6))
        np.testing.assert_allclose(bottleneck_scan(p, tokens), scan(p, tokens), atol=1e-12)

    def test_is_expand_scan_reduce(self, rng):
        p = make_params(rng, width=8, ratio=4)
        tokens = rng.normal(size=(10, 8))
        reduced = tokens @ np.asarray(p.reduce)[0].T
        expected = scan_reference(group_values(p), reduced) @ np.asarray(p.expand)[0].T
        np.testing.assert_allclose(bottleneck_scan(p, tokens), expected, rtol=1e-8, atol=1e-12)
        assert np.asarray(p.reduce).shape == (1, 2, 8)

    def test_width_mismatch_is_a_config_error(self, rng):
        p = make_params(rng, width=8, ratio=4)
        with pytest.raises(ConfigError):
            bottleneck_scan(p, rng.normal(size=(5, 12)))

    def test_expanded_shares_parameters(self, rng):
        p = make_params(rng, width=4, ratio=2)
        shared = p.expanded(4)
        assert shared.groups == 4
        for k in range(4):
            np.testing.assert_array_equal(np.asarray(shared.b)[k], np.asarray(p.b)[0])


# --------------------------------------------------------------------
# Cross-scan / cross-merge
# --------------------------------------------------------------------
class TestDirections:
    def test_two_by_two_orders(self):
        np.testing.assert_array_equal(direction_orders(2, 2),
                                      [[0, 1, 2, 3], [0, 2, 1, 3], [0, 1, 2, 3], [1, 0, 3, 2]])

    def test_three_by_three_diagonals(self):
        orders = direction_orders(3, 3)
        np.testing.assert_array_equal(orders[2], [0, 1, 3, 2, 4, 6, 5, 7, 8])
        np.testing.assert_array_equal(orders[3], [2, 1, 5, 0, 4, 8, 3, 7, 6])

    @pytest.mark.parametrize("h,w", [(1, 1), (1, 5), (4, 1), (3, 7), (8, 8)])
    def test_every_order_is_a_permutation(self, h, w):
        for order in direction_orders(h, w):
            np.testing.assert_array_equal(np.sort(order), np.arange(h * w))

    def test_sequences_follow_orders(self, rng):
        feature = rng.normal(size=(2, 3, 4, 5))
        seqs = cross_scan(feature)
        assert seqs.sequences.shape == (2, 4, 20, 3)
        flat = feature.reshape(2, 3, -1)
        for k in range(4):
            np.testing.assert_array_equal(seqs.sequences[:, k], flat[:, :, seqs.index_maps[k]].transpose(0, 2, 1))

    def test_merge_of_unchanged_sequences_is_identity(self, rng):
        feature = rng.normal(size=(2, 3, 5, 4))
        seqs = cross_scan(feature)
        np.testing.assert_allclose(cross_merge(seqs, seqs.sequences), feature, atol=1e-12)

    def test_merge_averages_four_directions(self, rng):
        feature = rng.normal(size=(1, 2, 3, 3))
        seqs = cross_scan(feature)
        only_first = np.zeros_like(seqs.sequences)
        only_first[:, 0] = seqs.sequences[:, 0]
        np.testing.assert_allclose(cross_merge(seqs, only_first), feature / 4, atol=1e-12)

    def test_unfold_gradient(self, rng, grad_check):
        grad_check(unfold, {"feature": rng.normal(size=(2, 3, 3, 4))}, static={"orders": direction_orders(3, 4)})

    def test_refold_gradient(self, rng, grad_check):
        grad_check(refold, {"outputs": rng.normal(size=(2, 4, 12, 3))},
                   static={"orders": direction_orders(4, 3), "height": 4, "width": 3})


class TestSS2D:
    def make(self, rng, width=8, **overrides):
        ssm = make_params(rng, groups=1, width=width, ratio=2, **overrides)
        return SS2DParams(ssm, rng.uniform(0.5, 1.5, size=width), rng.normal(size=width))

    def test_silent_scan_reduces_to_layer_norm(self, rng):
        params = self.make(rng, b=np.zeros((1, 4, 4)), d=np.zeros((1, 4, 4)))
        feature = rng.normal(size=(2, 8, 5, 6))
        np.testing.assert_allclose(ss2d(feature, params), layer_norm(feature, params.ln_gamma, params.ln_beta),
                                   atol=1e-12)

    def test_single_pixel(self, rng):
        params = self.make(rng)
        out = ss2d(rng.normal(size=(8, 1, 1)), params)
        assert out.shape == (8, 1, 1)
        assert np.all(np.isfinite(out))

    def test_matches_composed_reference(self, rng):
        params = self.make(rng)
        feature = rng.normal(size=(8, 3, 4))
        orders = direction_orders(3, 4)
        flat = feature.reshape(8, -1)
        merged = np.zeros_like(flat)
        g = group_values(params.ssm)
        reduce, expand = np.asarray(params.ssm.reduce)[0], np.asarray(params.ssm.expand)[0]
        for order in orders:
            tokens = flat[:, order].T
            y = scan_reference(g, tokens @ reduce.T) @ expand.T
            merged[:, order] += y.T
        expected = layer_norm(feature[None] + (merged / 4).reshape(1, 8, 3, 4), params.ln_gamma, params.ln_beta)[0]
        np.testing.assert_allclose(ss2d(feature, params), expected, rtol=1e-8, atol=1e-10)


# --------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------
class TestScanGradients:
    @pytest.mark.parametrize("zoh", [False, True])
    def test_plain(self, rng, grad_check, zoh):
        grad_check(selective_scan, scan_inputs(rng), static={"zoh": zoh})

    @pytest.mark.parametrize("zoh", [False, True])
    def test_selective(self, rng, grad_check, zoh):
        grad_check(selective_scan, scan_inputs(rng, selective=True), static={"zoh": zoh})

    def test_long_sequence(self, rng, grad_check):
        grad_check(selective_scan, scan_inputs(rng, bt=1, k=1, length=30), max_entries=20)
