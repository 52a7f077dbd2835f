import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lsfann import instances as inst


class TestPacking:
    @given(st.integers(1, 200), st.integers(1, 5), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, d, m, seed):
        bits = np.random.default_rng(seed).random((m, d)) < 0.5
        assert np.array_equal(inst.unpack_bits(inst.pack_bits(bits), d), bits)

    @given(st.integers(1, 150), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_popcount_matches_unpacked(self, d, seed):
        bits = np.random.default_rng(seed).random((2, d)) < 0.5
        packed = inst.pack_bits(bits)
        assert inst.hamming_distance(packed[0], packed[1]) == np.count_nonzero(bits[0] != bits[1])

    def test_bit_layout(self):
        bits = np.zeros((1, 70), dtype=bool)
        bits[0, 0] = bits[0, 65] = True
        w = inst.pack_bits(bits)
        assert w.shape == (1, 2)
        assert int(w[0, 0]) == 1 and int(w[0, 1]) == 2


class TestGenHamming:
    def test_infinite_c_copies_point(self):
        h = inst.gen_hamming(1, 8, math.inf, 1, seed=5)
        assert np.array_equal(h.queries[0], h.points[0])

    @pytest.mark.parametrize("c", [1.0, 0.5, -2.0])
    def test_rejects_c_at_most_one(self, c):
        with pytest.raises(ValueError):
            inst.gen_hamming(4, 8, c, 1, seed=0)

    def test_deterministic(self):
        a = inst.gen_hamming(50, 100, 2.0, 10, seed=9)
        b = inst.gen_hamming(50, 100, 2.0, 10, seed=9)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.queries, b.queries)
        assert np.array_equal(a.planted, b.planted)

    def test_query_streams_independent_of_count(self):
        a = inst.gen_hamming(50, 100, 2.0, 3, seed=9)
        b = inst.gen_hamming(50, 100, 2.0, 10, seed=9)
        assert np.array_equal(a.queries, b.queries[:3])

    def test_planted_mean_concentrates(self):
        h = inst.gen_hamming(1024, 2048, 2.0, 200, seed=1)
        dist = inst.hamming_distance(h.queries, h.points[h.planted])
        sigma = math.sqrt(2048 * 0.25 * 0.75 / 200)
        assert abs(dist.mean() - 512) <= 3 * sigma

    def test_far_points_beyond_045d(self):
        h = inst.gen_hamming(1024, 2048, 2.0, 200, seed=2)
        s = inst.instance_stats(h)
        assert np.mean(s.min_other >= 0.45 * 2048) >= 0.99

    def test_planted_distance_is_binomial(self):
        # chi-square goodness of fit over 10^4 planted pairs at d = 64, c = 2
        h = inst.gen_hamming(64, 64, 2.0, 10_000, seed=3)
        dist = inst.hamming_distance(h.queries, h.points[h.planted])
        k = np.arange(65)
        pmf = stats.binom.pmf(k, 64, 0.25)
        # pool bins so every expected count is at least 5
        exp, obs, acc_e, acc_o = [], [], 0.0, 0
        counts = np.bincount(dist, minlength=65)
        for e, o in zip(pmf * len(dist), counts):
            acc_e += e
            acc_o += o
            if acc_e >= 5:
                exp.append(acc_e)
                obs.append(acc_o)
                acc_e, acc_o = 0.0, 0
        exp[-1] += acc_e
        obs[-1] += acc_o
        _, pval = stats.chisquare(obs, exp)
        assert pval > 0.01


class TestGenSphere:
    def test_norms(self):
        s = inst.gen_sphere(300, 16, 1.5, 2.5, 40, seed=4)
        assert np.allclose(np.linalg.norm(s.points, axis=1), 2.5, rtol=1e-9)
        assert np.allclose(np.linalg.norm(s.queries, axis=1), 2.5, rtol=1e-9)

    def test_unit_cap_radius(self):
        s = inst.gen_sphere(1, 3, math.sqrt(2), 1.0, 50, seed=5)
        assert np.all(np.linalg.norm(s.queries - s.points[0], axis=1) <= 1.0 + 1e-12)

    def test_small_cap_in_plane(self):
        s = inst.gen_sphere(1, 2, 10.0, 5.0, 50, seed=6)
        assert np.all(np.linalg.norm(s.queries - s.points[0], axis=1) <= math.sqrt(2) / 10 * 5 + 1e-12)

    def test_rejects_low_dimension(self):
        with pytest.raises(ValueError):
            inst.gen_sphere(3, 1, 2.0, 1.0, 1, seed=0)

    def test_random_pair_distances_near_sqrt2(self):
        s = inst.gen_sphere(4096, 128, 2.0, 1.0, 20, seed=7)
        dist = inst.distances(s)
        mask = np.ones_like(dist, dtype=bool)
        mask[np.arange(len(dist)), s.planted] = False
        assert 1.35 <= dist[mask].mean() <= 1.48

    @given(st.integers(2, 40), st.floats(1.05, 5.0), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_cap_constraint(self, d, c, seed):
        s = inst.gen_sphere(5, d, c, 1.0, 10, seed=seed)
        inner = np.einsum("ij,ij->i", s.queries, s.points[s.planted])
        assert np.all(inner >= 1 - 1 / c**2 - 1e-12)

    @pytest.mark.parametrize("d,min_cos", [(3, 0.0), (8, 0.3), (20, 0.4)])
    def test_cap_cosine_matches_rejection(self, d, min_cos):
        rng = np.random.default_rng(d)
        sampled = inst.sample_cap_cosine(rng, d, min_cos, 5000)
        pool = inst.uniform_sphere(rng, 600_000, d)[:, 0]
        accepted = pool[pool >= min_cos][:20000]
        assert len(accepted) > 2000
        assert stats.ks_2samp(sampled, accepted).pvalue > 0.001

    def test_cap_point_direction_is_uniform_tangent(self):
        # at fixed cosine, the tangent component of a cap point should be isotropic
        rng = np.random.default_rng(1)
        center = np.zeros(5)
        center[0] = 1.0
        pts = np.array([inst.cap_point(rng, center, 0.5) for _ in range(4000)])
        tangent = pts[:, 1:] / np.linalg.norm(pts[:, 1:], axis=1, keepdims=True)
        assert np.all(np.abs(tangent.mean(axis=0)) < 0.06)


class TestHammingToSphere:
    def test_exhaustive_d4(self):
        verts = np.array(list(itertools.product([False, True], repeat=4)))
        h = inst.HammingInstance(16, 4, 2.0, inst.pack_bits(verts), inst.pack_bits(verts[:1]),
                                 np.array([0]), 0)
        s = inst.hamming_to_sphere(h)
        assert np.allclose(np.linalg.norm(s.points, axis=1), 1.0)
        for i in range(16):
            for j in range(16):
                ham = np.count_nonzero(verts[i] != verts[j])
                euc = np.linalg.norm(s.points[i] - s.points[j])
                assert euc == pytest.approx(2 * math.sqrt(ham / 4), abs=1e-12)
        assert np.linalg.norm(s.points[0] - s.points[15]) == pytest.approx(2.0)
        assert np.linalg.norm(s.points[0] - s.points[3]) == pytest.approx(math.sqrt(2))

    def test_approximation_factor_is_square_root(self):
        h = inst.gen_hamming(10, 64, 4.0, 2, seed=1)
        assert inst.hamming_to_sphere(h).c == pytest.approx(2.0)


class TestStats:
    def test_single_point_no_noise_is_unique(self):
        h = inst.gen_hamming(1, 16, math.inf, 1, seed=0)
        assert inst.instance_stats(h).unique_fraction == 1.0

    def test_duplicate_points_are_not_unique(self):
        pts = inst.pack_bits(np.zeros((2, 16), dtype=bool))
        h = inst.HammingInstance(2, 16, 2.0, pts, pts[:1].copy(), np.array([0]), 0)
        assert inst.instance_stats(h).unique_fraction == 0.0

    def test_large_instance_unique(self):
        h = inst.gen_hamming(1024, 2048, 2.0, 200, seed=3)
        assert inst.instance_stats(h).unique_fraction >= 0.99

    def test_union_bound_oracle_agrees(self):
        # Pr[some other point within the radius] <= n * BinomCDF(radius; d, 1/2)
        d, n = 2048, 1024
        radius = inst.separation_radius(inst.gen_hamming(1, d, 2.0, 1, seed=0))
        collide = n * stats.binom.cdf(math.floor(radius), d, 0.5)
        planted_escape = stats.binom.sf(math.floor(radius), d, 0.25)
        assert collide + planted_escape < 0.01

    def test_histogram_mass_and_nonnegativity(self):
        s = inst.gen_sphere(200, 8, 1.5, 1.0, 30, seed=4)
        st_ = inst.instance_stats(s)
        assert sum(st_.planted_hist.values()) == 30
        assert np.all(st_.planted_distances >= 0) and np.all(st_.min_other >= 0)

    def test_uniqueness_non_increasing_in_n(self):
        means = []
        for n in (16, 128, 1024):
            fr = [inst.instance_stats(inst.gen_hamming(n, 32, 2.0, 30, seed=s)).unique_fraction
                  for s in range(10)]
            means.append(np.mean(fr))
        assert means[0] >= means[1] >= means[2]


class TestClustered:
    def test_planted_at_exact_radius(self):
        e = inst.gen_clustered(500, 10, 2.0, 20, seed=1, r=1.0)
        dist = np.linalg.norm(e.queries - e.points[e.planted], axis=1)
        assert np.allclose(dist, 1.0)

    def test_cluster_sizes(self):
        e = inst.gen_clustered(400, 10, 2.0, 5, seed=2, cluster_fraction=0.5, n_clusters=2)
        # two tight blobs: each of the 2 blobs holds 100 points, all within 1.0 of one another
        dist = np.linalg.norm(e.points[:, None] - e.points[None], axis=2)
        dense = (dist < 1.0).sum(axis=1) >= 100
        assert dense.sum() == 200


class TestSerialization:
    @pytest.mark.parametrize("make", [
        lambda: inst.gen_hamming(30, 70, 2.0, 5, seed=1),
        lambda: inst.gen_sphere(30, 7, 1.5, 2.0, 5, seed=1),
        lambda: inst.gen_clustered(30, 4, 2.0, 5, seed=1),
    ])
    def test_round_trip(self, tmp_path, make):
        a = make()
        path = inst.save_instance(a, tmp_path / "x.bin")
        b = inst.load_instance(path)
        assert type(a) is type(b)
        assert (a.n, a.d, a.c, a.seed) == (b.n, b.d, b.c, b.seed)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.queries, b.queries)
        assert np.array_equal(a.planted, b.planted)
        assert (tmp_path / "x.bin.json").exists()

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\0" * 100)
        with pytest.raises(ValueError):
            inst.load_instance(p)
