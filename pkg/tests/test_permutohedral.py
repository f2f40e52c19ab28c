import numpy as np
import pytest

from twistreg.permutohedral import (
    PermutohedralLattice,
    build_lattice,
    filter_augmented,
    gaussian_transform_bruteforce,
    valid_lattice_key,
)


def double_loop_transform(queries, inputs, values, sigma):
    """Independent scalar-loop oracle for the unnormalized Gaussian transform."""
    sigma = np.broadcast_to(np.atleast_1d(sigma), (inputs.shape[1],))
    out = np.zeros((len(queries), values.shape[1]))
    for i, q in enumerate(queries):
        for k, f in enumerate(inputs):
            d2 = 0.0
            for j in range(len(q)):
                d2 += ((q[j] - f[j]) / sigma[j]) ** 2
            out[i] += np.exp(-0.5 * d2) * values[k]
    return out


def surface_cloud(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = 0.5 * (1 + 0.1 * np.sin(3 * v[:, 0]) * np.cos(2 * v[:, 1]))
    return v * r[:, None]


class TestBruteforce:
    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        F = rng.normal(size=(10, 3))
        Q = rng.normal(size=(5, 3))
        V = rng.normal(size=(10, 2))
        got = gaussian_transform_bruteforce(Q, F, V, 0.7)
        np.testing.assert_allclose(got, double_loop_transform(Q, F, V, 0.7),
                                   rtol=1e-12, atol=1e-12)

    def test_anisotropic_widths(self):
        rng = np.random.default_rng(1)
        F = rng.normal(size=(8, 4))
        Q = rng.normal(size=(6, 4))
        V = rng.normal(size=(8, 1))
        sigma = np.array([0.5, 1.0, 2.0, 0.25])
        got = gaussian_transform_bruteforce(Q, F, V, sigma)
        np.testing.assert_allclose(got, double_loop_transform(Q, F, V, sigma),
                                   rtol=1e-12, atol=1e-12)

    def test_chunking_invariant(self):
        # many queries exercise more than one chunk
        rng = np.random.default_rng(2)
        F = rng.normal(size=(2000, 3))
        Q = rng.normal(size=(4100, 3))
        V = rng.normal(size=(2000, 1))
        whole = gaussian_transform_bruteforce(Q, F, V, 0.4)
        parts = np.vstack([gaussian_transform_bruteforce(Q[:7], F, V, 0.4),
                           gaussian_transform_bruteforce(Q[7:], F, V, 0.4)])
        # rows are independent; only reduction order may differ
        np.testing.assert_allclose(whole, parts, rtol=1e-12, atol=1e-14)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            gaussian_transform_bruteforce(np.zeros((1, 3)), np.zeros((1, 3)),
                                          np.zeros((1, 1)), -1.0)


class TestLatticeStructure:
    def test_single_point_occupies_at_most_d_plus_1_sites(self):
        rng = np.random.default_rng(3)
        for d in (1, 2, 3, 5, 8):
            lat = PermutohedralLattice(d, 1.0)
            lat.splat(rng.normal(size=(1, d)), np.ones((1, 1)))
            assert lat.num_sites <= d + 2
            for key in lat.keys:
                assert valid_lattice_key(key)

    def test_barycentric_weights_sum_to_one(self):
        rng = np.random.default_rng(4)
        for d in (1, 2, 3, 6):
            lat = PermutohedralLattice(d, 1.0)
            _, bary = lat._simplex(rng.normal(size=(200, d)) * 5)
            np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-12)
            assert (bary >= -1e-13).all()

    def test_all_site_keys_stay_valid_after_blur(self):
        rng = np.random.default_rng(5)
        lat = build_lattice(rng.normal(size=(50, 3)), np.ones((50, 1)), 0.5)
        sums = lat.keys.sum(axis=1)
        np.testing.assert_array_equal(sums, 0)
        rem = lat.keys % (lat.dim + 1)
        assert (rem == rem[:, :1]).all()

    def test_rejects_high_dimensions(self):
        with pytest.raises(ValueError):
            PermutohedralLattice(13, 1.0)

    def test_rejects_non_finite_input(self):
        lat = PermutohedralLattice(3, 1.0)
        bad = np.zeros((2, 3))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            lat.splat(bad, np.ones((2, 1)))
        with pytest.raises(ValueError):
            lat.splat(np.zeros((2, 3)), np.array([[np.inf], [0.0]]))

    def test_slice_requires_blur(self):
        lat = PermutohedralLattice(3, 1.0)
        lat.splat(np.zeros((1, 3)), np.ones((1, 1)))
        with pytest.raises(RuntimeError):
            lat.slice(np.zeros((1, 3)))


class TestLatticeValues:
    def test_linearity(self):
        rng = np.random.default_rng(6)
        F = rng.uniform(0, 5, size=(120, 3))
        Q = rng.uniform(0, 5, size=(40, 3))
        Va = rng.normal(size=(120, 2))
        Vb = rng.normal(size=(120, 2))
        a, b = 1.7, -0.6
        combined = build_lattice(F, a * Va + b * Vb, 0.8).slice(Q)
        parts = a * build_lattice(F, Va, 0.8).slice(Q) + b * build_lattice(F, Vb, 0.8).slice(Q)
        np.testing.assert_allclose(combined, parts, atol=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        F = rng.uniform(0, 5, size=(300, 3))
        V = rng.normal(size=(300, 2))
        Q = rng.uniform(0, 5, size=(50, 3))
        base = build_lattice(F, V, 0.6).slice(Q)
        perm = rng.permutation(300)
        shuffled = build_lattice(F[perm], V[perm], 0.6).slice(Q)
        np.testing.assert_allclose(shuffled, base, atol=1e-9)

    def test_far_query_contributes_zero(self):
        rng = np.random.default_rng(8)
        F = rng.uniform(0, 1, size=(50, 3))
        lat = build_lattice(F, np.ones((50, 1)), 0.05)
        out = lat.slice(np.array([[100.0, 100.0, 100.0]]))
        np.testing.assert_array_equal(out, 0.0)

    def test_zero_values_produce_zero_output(self):
        rng = np.random.default_rng(9)
        F = rng.uniform(0, 1, size=(30, 3))
        lat = build_lattice(F, np.zeros((30, 4)), 0.1)
        out = lat.slice(F)
        np.testing.assert_array_equal(out, 0.0)

    def test_homogeneous_mass_bounded(self):
        rng = np.random.default_rng(10)
        n = 400
        F = rng.uniform(0, 2, size=(n, 3))
        lat = build_lattice(F, np.ones((n, 1)), 0.3)
        out = lat.slice(rng.uniform(0, 2, size=(200, 3)))[:, 0]
        assert (out >= 0).all()
        assert (out <= n).all()

    def test_augmented_equals_build_then_slice(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            d = int(rng.integers(1, 5))
            n, m = int(rng.integers(5, 60)), int(rng.integers(5, 60))
            F = rng.uniform(0, 3, size=(n, d))
            Q = rng.uniform(0, 3, size=(m, d))
            V = rng.normal(size=(n, 2))
            sigma = float(rng.uniform(0.1, 1.0))
            a = filter_augmented(Q, F, V, sigma)
            b = build_lattice(F, V, sigma).slice(Q)
            np.testing.assert_allclose(a, b, atol=1e-10)


class TestLatticeAccuracy:
    def test_surface_cloud_mass_and_targets(self):
        # dense 3-D clouds at the registration operating point: median mass
        # error within 5%, weighted-target displacement within 0.1 sigma at
        # the 95th percentile
        rng = np.random.default_rng(12)
        n = 3000
        Y = surface_cloud(n, rng)
        X = surface_cloud(n, rng) + rng.normal(scale=0.005, size=(n, 3))
        sigma = 0.05 * float(np.linalg.norm(Y.max(0) - Y.min(0)))
        V = np.c_[np.ones(n), Y]
        brute = gaussian_transform_bruteforce(X, Y, V, sigma)
        approx = build_lattice(Y, V, sigma).slice(X)
        good = brute[:, 0] >= 1e-3
        rel = np.abs(approx[good, 0] - brute[good, 0]) / brute[good, 0]
        assert np.median(rel) <= 0.05
        t_approx = approx[good, 1:] / approx[good, 0, None]
        t_brute = brute[good, 1:] / brute[good, 0, None]
        terr = np.linalg.norm(t_approx - t_brute, axis=1)
        assert np.percentile(terr, 95) <= 0.1 * sigma

    def test_anisotropic_sigma_matches_whitened_isotropic(self):
        # dividing features by per-axis widths must equal filtering the
        # pre-whitened features with sigma 1
        rng = np.random.default_rng(13)
        F = rng.uniform(0, 1, size=(200, 3))
        Q = rng.uniform(0, 1, size=(50, 3))
        V = rng.normal(size=(200, 2))
        sigma = np.array([0.05, 0.1, 0.2])
        a = build_lattice(F, V, sigma).slice(Q)
        b = build_lattice(F / sigma, V, 1.0).slice(Q / sigma)
        np.testing.assert_allclose(a, b, atol=1e-9)
