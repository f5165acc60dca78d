# tests/test_energy_field.py
import numpy as np
import pytest

from energy_field import EnergyMap, compute_energy, energy, energy_gradient, local_maxima, select_seeds


def energy_oracle(feature):
    c, h, w = feature.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for k in range(c):
                f = feature[k]
                out[y, x] += abs(f[y, min(x + 1, w - 1)] - f[y, max(x - 1, 0)])
                out[y, x] += abs(f[min(y + 1, h - 1), x] - f[max(y - 1, 0), x])
    return out


def bump(h, w, cx, cy, sigma=1.5, peak=1.0):
    ys, xs = np.mgrid[0:h, 0:w]
    return peak * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))


def seeds_oracle(e, k_max, frac, radius):
    """Enumerate plateau representatives, filter by energy, suppress greedily."""
    h, w = e.shape
    weak = np.zeros_like(e, dtype=bool)
    strict = np.zeros_like(e, dtype=bool)
    for y in range(h):
        for x in range(w):
            nbrs = [e[y + dy, x + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                    if (dy, dx) != (0, 0) and 0 <= y + dy < h and 0 <= x + dx < w]
            weak[y, x] = all(e[y, x] >= v for v in nbrs)
            strict[y, x] = any(e[y, x] > v for v in nbrs)
    seen = np.zeros_like(weak)
    reps = []
    for y in range(h):
        for x in range(w):
            if not weak[y, x] or seen[y, x]:
                continue
            stack, plateau = [(y, x)], []
            seen[y, x] = True
            while stack:
                py, px = stack.pop()
                plateau.append((py, px))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        qy, qx = py + dy, px + dx
                        if 0 <= qy < h and 0 <= qx < w and weak[qy, qx] and not seen[qy, qx]:
                            seen[qy, qx] = True
                            stack.append((qy, qx))
            if any(strict[p] for p in plateau):
                reps.append(min(plateau))
    peak = e.max()
    cands = sorted(((e[y, x], y, x) for y, x in reps if e[y, x] >= frac * peak and e[y, x] > 0),
                   key=lambda t: (-t[0], t[1], t[2]))
    chosen = []
    for v, y, x in cands:
        if all(max(abs(x - cx), abs(y - cy)) > radius for cy, cx in chosen):
            chosen.append((y, x))
            if len(chosen) == k_max:
                break
    return chosen


# --------------------------------------------------------------------
# Energy
# --------------------------------------------------------------------
class TestComputeEnergy:
    def test_constant_feature_has_zero_energy(self):
        assert np.all(compute_energy(np.full((3, 6, 5), 2.0)).values == 0.0)

    def test_ramp_interior_is_two(self):
        ramp = np.tile(np.arange(8.0), (8, 1))[None]
        e = compute_energy(ramp).values
        np.testing.assert_array_equal(e[:, 1:-1], 2.0)
        np.testing.assert_array_equal(e[:, 0], 1.0)

    def test_matches_nested_loop_oracle(self, rng):
        for _ in range(20):
            f = rng.normal(size=(3, 8, 8))
            np.testing.assert_allclose(compute_energy(f).values, energy_oracle(f), rtol=1e-12)

    def test_per_channel_offsets_cancel(self, rng):
        f = rng.normal(size=(4, 6, 6))
        shifted = f + rng.normal(size=(4, 1, 1))
        np.testing.assert_allclose(compute_energy(shifted).values, compute_energy(f).values, atol=1e-12)

    def test_scales_with_absolute_factor(self, rng):
        f = rng.normal(size=(3, 7, 5)).astype(np.float32)
        for a in (-2.5, 0.3, 4.0):
            np.testing.assert_allclose(compute_energy(a * f).values, abs(a) * compute_energy(f).values,
                                       rtol=1e-5, atol=1e-5)

    def test_batched_kernel_matches_single(self, rng):
        f = rng.normal(size=(2, 3, 5, 5))
        batched = energy(f)
        for i in range(2):
            np.testing.assert_array_equal(batched[i], compute_energy(f[i]).values)

    def test_gradient_matches_finite_differences(self, rng, grad_check):
        # differences bounded away from zero so no step crosses a kink of |.|
        ys, xs = np.mgrid[0:5, 0:6]
        signs = np.array([1.0, -1.0, 1.0])[None, :, None, None]
        f = signs * (3.0 * xs + 5.0 * ys) + rng.uniform(0, 0.5, size=(2, 3, 5, 6))
        grad_check(energy, {"feature": f}, max_entries=60)


class TestEnergyGradient:
    def test_constant_map_has_zero_gradient(self):
        for mode in ("central", "sobel"):
            assert np.all(energy_gradient(EnergyMap(np.full((5, 5), 3.0)), mode) == 0.0)

    def test_ramp_central_gradient(self):
        g = energy_gradient(EnergyMap(np.tile(np.arange(6.0), (5, 1))), "central")
        np.testing.assert_array_equal(g[0][:, 1:-1], 1.0)
        np.testing.assert_array_equal(g[1], 0.0)

    def test_sobel_matches_convolution_oracle(self, rng):
        e = rng.normal(size=(6, 7))
        kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 8.0
        ky = kx.T
        ep = np.pad(e, 1, mode="edge")
        gx = np.zeros_like(e)
        gy = np.zeros_like(e)
        for y in range(6):
            for x in range(7):
                gx[y, x] = np.sum(ep[y:y + 3, x:x + 3] * kx)
                gy[y, x] = np.sum(ep[y:y + 3, x:x + 3] * ky)
        g = energy_gradient(EnergyMap(e), "sobel")
        np.testing.assert_allclose(g[0], gx, atol=1e-12)
        np.testing.assert_allclose(g[1], gy, atol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            energy_gradient(EnergyMap(np.zeros((3, 3))), "prewitt")


# --------------------------------------------------------------------
# Seeds
# --------------------------------------------------------------------
class TestSelectSeeds:
    def test_single_bump_single_seed(self):
        seeds = select_seeds(EnergyMap(bump(16, 16, 9, 5)))
        assert [(s.x, s.y) for s in seeds] == [(9, 5)]

    def test_equal_bumps_broken_lexicographically(self):
        e = bump(16, 20, 14, 8) + bump(16, 20, 4, 8)
        seeds = select_seeds(EnergyMap(e), nms_radius=2)
        assert [(s.x, s.y) for s in seeds] == [(4, 8), (14, 8)]

    def test_zero_map_gives_no_seeds(self):
        assert len(select_seeds(EnergyMap(np.zeros((8, 8))))) == 0

    def test_plateau_represented_by_first_pixel(self):
        e = np.zeros((6, 6))
        e[2:4, 2:4] = 1.0
        np.testing.assert_array_equal(local_maxima(e), [[2, 2]])

    def test_flat_map_has_no_maxima(self):
        assert len(local_maxima(np.full((4, 4), 2.0))) == 0

    def test_matches_brute_force(self, rng):
        for _ in range(10):
            e = np.round(rng.uniform(0, 1, size=(12, 12)), 1)
            seeds = select_seeds(EnergyMap(e), k_max=8, min_energy_frac=0.3, nms_radius=2)
            assert [(s.y, s.x) for s in seeds] == seeds_oracle(e, 8, 0.3, 2)

    def test_suppression_and_count_hold(self, rng):
        e = rng.uniform(size=(20, 20))
        seeds = list(select_seeds(EnergyMap(e), k_max=5, min_energy_frac=0.0, nms_radius=3))
        assert len(seeds) <= 5
        for i, a in enumerate(seeds):
            for b in seeds[i + 1:]:
                assert max(abs(a.x - b.x), abs(a.y - b.y)) > 3
        energies = [s.energy for s in seeds]
        assert energies == sorted(energies, reverse=True)
