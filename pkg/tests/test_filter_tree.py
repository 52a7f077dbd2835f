import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsfann import bounds, caps, filter_tree as ft, instances as inst


def small_instance(n=300, d=16, c=2.0, q=30, seed=0):
    return inst.gen_sphere(n, d, c, 1.0, q, seed)


class TestSelectParams:
    def test_reference_n1024(self):
        p = ft.select_params(1024, 2.0, 1.0, 1.0, success_factor=1.0)
        assert p.K == 3
        assert p.eta == pytest.approx(caps.inv_tail(2.0 ** (-10 / 3)), abs=1e-12)
        assert p.T == math.ceil(2.0 ** (10 / 3))
        jc = caps.joint_cap(p.eta, p.eta_prime, caps.planted_alpha(2.0)).value
        assert jc == pytest.approx(1.0 / p.T, rel=1e-9)

    def test_balanced_prediction(self):
        c = math.sqrt(2)
        rho = bounds.balanced_rho("eq1", c)
        assert rho == pytest.approx(1 / 3)
        assert bounds.solve_tradeoff("tree", c, rho).rho_q == pytest.approx(1 / 3, abs=1e-9)

    def test_zero_query_limit_hamming(self):
        assert bounds.solve_tradeoff_rho_u("eq2", 2.0, 0.0).rho_u == pytest.approx(3.0, abs=1e-9)

    def test_default_success_factor_infeasible_at_desk_scale(self):
        # T * tail(eta) = ceil(n^(rho_s/K)) n^(-1/K) is about 2.56 here, far below 100
        with pytest.raises(ft.InfeasibleParameters):
            ft.select_params(2**12, math.sqrt(2), 1.0, 4 / 3)

    def test_negative_eta_prime_not_clamped(self):
        p = ft.select_params(2**12, math.sqrt(2), 1.0, 4 / 3, success_factor=2.558)
        assert p.eta_prime < 0
        jc = caps.joint_cap(p.eta, p.eta_prime, p.alpha).value
        assert jc * p.T == pytest.approx(2.558, rel=1e-9)

    def test_k_override_and_rounding(self):
        assert ft.default_depth(2**10) == 3 and ft.default_depth(2**14) == 4
        assert ft.select_params(2**14, 2.0, 1.0, 1.5, K=3, success_factor=1.0).K == 3

    def test_thresholds_scale_with_r(self):
        a = ft.select_params(1024, 2.0, 1.0, 1.0, success_factor=1.0)
        b = ft.select_params(1024, 2.0, 3.0, 1.0, success_factor=1.0)
        assert (a.eta, a.eta_prime) == (b.eta, b.eta_prime) and b.R == 3.0

    @pytest.mark.parametrize("kw", [dict(n=1), dict(c=1.0), dict(rho_s=0.9)])
    def test_rejects_bad_input(self, kw):
        args = dict(n=1024, c=2.0, R=1.0, rho_s=1.0)
        args.update(kw)
        with pytest.raises(ValueError):
            ft.select_params(**args)


class TestPasses:
    @given(st.integers(1, 40), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_matches_canonical(self, d, m, t, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((m, d))
        Z = rng.standard_normal((t, d)).astype(np.float32)
        ref = ft.canonical_scores(X, Z)
        # thresholds placed exactly on canonical values exercise the ambiguity path
        for thr in (0.3, float(ref[0, 0]), float(ref[-1, -1])):
            assert np.array_equal(ft.passes(X, Z, thr), ref >= thr)

    def test_infinite_thresholds(self):
        X = np.ones((3, 2))
        Z = np.ones((4, 2))
        assert ft.passes(X, Z, -math.inf).all()
        assert not ft.passes(X, Z, math.inf).any()

    def test_child_directions_depend_only_on_path(self):
        a = ft.child_directions(5, (1, 2), 4, 8)
        b = ft.child_directions(5, (1, 2), 4, 8)
        c = ft.child_directions(5, (2, 1), 4, 8)
        assert np.array_equal(a, b) and not np.array_equal(a, c)
        assert a.dtype == np.float32


class TestBuild:
    def test_minus_infinity_single_leaf(self):
        s = small_instance()
        tree = ft.build(s.points, ft.TreeParams(K=1, T=1, eta=-math.inf, eta_prime=-math.inf))
        assert tree.leaf_count == 1
        assert np.array_equal(np.sort(tree.bucket(0)), np.arange(s.n))

    def test_plus_infinity_empty(self):
        s = small_instance()
        tree = ft.build(s.points, ft.TreeParams(K=1, T=1, eta=math.inf, eta_prime=0.0))
        assert tree.leaf_count == 0 and tree.bucket_mass == 0

    def test_rejects_off_sphere(self):
        with pytest.raises(ValueError):
            ft.build(np.ones((4, 3)), ft.TreeParams(K=1, T=1, eta=0.0, eta_prime=0.0))

    def test_resource_cap(self):
        s = small_instance()
        p = ft.TreeParams(K=2, T=20, eta=-1.0, eta_prime=0.0, max_tree_nodes=50)
        with pytest.raises(ft.ResourceCapExceeded):
            ft.build(s.points, p)

    def test_deterministic(self):
        s = small_instance()
        p = ft.TreeParams(K=2, T=6, eta=0.5, eta_prime=0.0, seed=3)
        a, b = ft.build(s.points, p), ft.build(s.points, p)
        assert np.array_equal(a.bucket_ids, b.bucket_ids)
        for la, lb in zip(a.levels, b.levels):
            assert np.array_equal(la.dirs, lb.dirs) and np.array_equal(la.slot, lb.slot)

    @given(st.integers(1, 3), st.integers(1, 7), st.floats(-1.0, 2.0), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_bucket_soundness(self, K, T, eta, seed):
        s = inst.gen_sphere(120, 8, 2.0, 1.5, 1, seed)
        tree = ft.build(s.points, ft.TreeParams(K=K, T=T, eta=eta, eta_prime=0.0, R=1.5, seed=seed))
        ft.verify_buckets(tree)

    def test_verify_detects_tampering(self):
        s = small_instance()
        tree = ft.build(s.points, ft.TreeParams(K=2, T=5, eta=0.3, eta_prime=0.0, seed=1))
        tree.bucket_ids[0] = (tree.bucket_ids[0] + 1) % s.n
        with pytest.raises(AssertionError):
            ft.verify_buckets(tree)

    def test_occupancy_matches_survival(self):
        # per point and leaf, survival is tail(eta)^K; expected mass n T^K tail(eta)^K
        n = 1024
        p0 = ft.select_params(n, 2.0, 1.0, 1.0, success_factor=1.0)
        expect = n * (p0.T * p0.survival) ** p0.K
        mass = []
        for seed in range(20):
            s = inst.gen_sphere(n, 32, 2.0, 1.0, 1, seed)
            tree = ft.build(s.points, dataclasses.replace(p0, seed=seed))
            mass.append(tree.bucket_mass)
            assert tree.node_count <= 2 * p0.T ** p0.K
        mass = np.array(mass, dtype=float)
        assert abs(mass.mean() - expect) <= 3 * mass.std(ddof=1) / math.sqrt(len(mass))
        # mean occupancy over all T^K potential leaves is n tail(eta)^K = 1
        assert mass.mean() / p0.T ** p0.K == pytest.approx(n * p0.survival ** p0.K, rel=0.1)


class TestQuery:
    def test_stored_point_found_with_open_filters(self):
        s = small_instance()
        p = ft.TreeParams(K=2, T=5, eta=0.2, eta_prime=-math.inf, seed=2)
        tree = ft.build(s.points, p)
        member = int(tree.bucket(0)[0])
        res = tree.query(s.points[member], 1e-12)
        assert res.found and res.distance_found == 0.0

    def test_empty_tree_misses(self):
        s = small_instance()
        tree = ft.build(s.points, ft.TreeParams(K=1, T=1, eta=math.inf, eta_prime=0.0))
        res = tree.query(s.queries[0], 10.0)
        assert not res.found and res.candidates_scanned == 0

    def test_dimension_mismatch(self):
        s = small_instance()
        tree = ft.build(s.points, ft.TreeParams(K=1, T=2, eta=0.0, eta_prime=0.0))
        with pytest.raises(ValueError):
            tree.query(np.ones(3), 1.0)

    def test_path_soundness(self):
        s = small_instance(n=500, q=20)
        p = ft.TreeParams(K=3, T=6, eta=0.4, eta_prime=0.1, seed=7)
        tree = ft.build(s.points, p)
        for q in s.queries:
            trace = []
            tree.query(q, -1.0, trace=trace)   # negative radius: never stops early
            frontier = np.array([0])
            for depth, visited in enumerate(trace):
                lv = tree.levels[depth]
                if depth == 0:
                    siblings = np.arange(lv.size)
                else:
                    prev = tree.levels[depth - 1]
                    siblings = np.concatenate([np.arange(prev.child_start[v], prev.child_end[v])
                                               for v in frontier] or [np.empty(0, int)])
                scores = ft.canonical_scores(q[None], lv.dirs[siblings])[0]
                assert set(visited.tolist()) == set(siblings[scores >= p.eta_prime].tolist())
                frontier = visited

    def test_counters_consistent(self):
        s = small_instance(n=400, q=40)
        tree = ft.build(s.points, ft.TreeParams(K=2, T=8, eta=0.3, eta_prime=0.0, seed=1))
        for q in s.queries:
            r = tree.query(q, s.near_radius)
            assert r.candidates_scanned <= tree.bucket_mass
            assert r.nodes_visited <= r.inner_products
            if r.found:
                assert r.distance_found <= s.near_radius + 1e-12
                assert np.linalg.norm(s.points[r.result] - q) == pytest.approx(r.distance_found)

    def test_candidates_stop_at_first_hit(self):
        s = small_instance(n=200, q=5)
        tree = ft.build(s.points, ft.TreeParams(K=1, T=1, eta=-math.inf, eta_prime=-math.inf))
        q = s.points[17]
        order = tree.bucket(0)
        r = tree.query(q, 1e-9)
        assert r.result == 17
        assert r.candidates_scanned == int(np.nonzero(order == 17)[0][0]) + 1


class TestSerialization:
    def test_round_trip(self, tmp_path):
        s = small_instance()
        p = ft.TreeParams(K=2, T=6, eta=0.4, eta_prime=0.0, seed=4, c=2.0, n=s.n)
        tree = ft.build(s.points, p)
        path = ft.save_tree(tree, tmp_path / "t.bin")
        back = ft.load_tree(path, s.points)
        assert back.params == p
        assert np.array_equal(back.bucket_ids, tree.bucket_ids)
        for q in s.queries:
            a, b = tree.query(q, s.near_radius), back.query(q, s.near_radius)
            assert dataclasses.astuple(a) == dataclasses.astuple(b)
        ft.verify_buckets(back)

    def test_rejects_other_files(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"x" * 200)
        with pytest.raises(ValueError):
            ft.load_tree(p)


class TestExponents:
    def test_linear_work(self):
        ns = [2**10, 2**12, 2**14, 2**16]
        fit = ft.measured_exponents(ns, ns, [n**1.5 for n in ns])
        assert fit.rho_q_hat == pytest.approx(1.0, abs=1e-12)
        assert fit.rho_u_hat == pytest.approx(0.5, abs=1e-12)

    def test_square_root_work(self):
        ns = [2**10, 2**12, 2**14, 2**16]
        assert ft.measured_exponents(ns, [7 * n**0.5 for n in ns], ns).rho_q_hat == pytest.approx(0.5)

    def test_rejects_short_ladder(self):
        with pytest.raises(ValueError):
            ft.measured_exponents([10, 100], [1, 2], [1, 2])
