import numpy as np
import pytest

from locmap.errors import WeightShapeMismatch
from locmap.fusion import (
    FusionMethod,
    FusionParams,
    fuse_pair_lists,
    fuse_scores,
    normalize_scores,
    round_robin,
)

SCORE_METHODS = [
    FusionMethod.MEAN,
    FusionMethod.POWER,
    FusionMethod.MIN,
    FusionMethod.MAX,
    FusionMethod.WMP,
    FusionMethod.WMM,
    FusionMethod.GHARM,
]


class TestNormalizeScores:
    def test_min_max(self):
        out = normalize_scores([[0.0, 5.0, 10.0]])
        assert np.allclose(out[0], [0.0, 0.5, 1.0])

    def test_constant_list_maps_to_ones(self):
        out = normalize_scores([[3.0, 3.0, 3.0]])
        assert np.all(out[0] == 1.0)

    def test_affine_invariance_under_scaling(self):
        raw = [1.0, 4.0, 2.5, 0.5]
        a = normalize_scores([raw])[0]
        b = normalize_scores([[2 * x for x in raw]])[0]
        assert np.allclose(a, b, atol=1e-15)


class TestFuseScores:
    @pytest.mark.parametrize("method", SCORE_METHODS)
    def test_single_list_identity(self, method):
        s = np.array([0.1, 0.9, 0.4, 0.0, 1.0])
        params = FusionParams(method=method, rho=[1.0], alpha=[1.0])
        assert np.allclose(fuse_scores(params, [s]), s, atol=1e-12)

    def test_wmm_beta_extremes(self):
        rng = np.random.default_rng(30)
        s = [rng.uniform(0, 1, 50) for _ in range(3)]
        mx = fuse_scores(FusionParams(method=FusionMethod.WMM, beta=0.0), s)
        mn = fuse_scores(FusionParams(method=FusionMethod.WMM, beta=1.0), s)
        assert np.array_equal(mx, np.max(s, axis=0))
        assert np.array_equal(mn, np.min(s, axis=0))

    def test_gharm_hand_case(self):
        # alpha = (1/2, 1/2), gamma = 1, s = (0.8, 0.8): x_i = 0.4,
        # f(0.4) = 1/1.4, f^-1(1/1.4) = 0.4
        params = FusionParams(method=FusionMethod.GHARM, alpha=[0.5, 0.5], gamma=1.0)
        got = fuse_scores(params, [[0.8], [0.8]])
        assert abs(got[0] - 0.4) < 1e-12
        # brute-force cross-check of the f-mean composition
        f = lambda x: 1.0 / (1.0 + x)
        finv = lambda y: 1.0 / y - 1.0
        want = finv((f(0.4) + f(0.4)) / 2.0)
        assert abs(got[0] - want) < 1e-15

    def test_gharm_equal_weight_identical_inputs_is_s_over_n(self):
        for n in (2, 3, 5):
            for s in (0.0, 0.3, 1.0):
                params = FusionParams(method=FusionMethod.GHARM, gamma=1.0)
                got = fuse_scores(params, [[s]] * n)
                assert got[0] == pytest.approx(s / n, abs=1e-15)

    def test_wmp_beta_one_is_weighted_mean(self):
        rng = np.random.default_rng(31)
        s = [rng.uniform(0, 1, 40) for _ in range(3)]
        rho = [0.2, 0.5, 0.3]
        got = fuse_scores(FusionParams(method=FusionMethod.WMP, rho=rho, beta=1.0), s)
        want = sum(r * np.asarray(l) for r, l in zip(rho, s))
        assert np.allclose(got, want, atol=1e-12)

    def test_wmp_beta_zero_is_powered_product(self):
        rng = np.random.default_rng(32)
        s = [rng.uniform(0.01, 1, 40) for _ in range(3)]
        rho = [0.2, 0.5, 0.3]
        got = fuse_scores(FusionParams(method=FusionMethod.WMP, rho=rho, beta=0.0), s)
        want = np.prod([np.asarray(l) ** r for r, l in zip(rho, s)], axis=0)
        assert np.allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("method", SCORE_METHODS)
    def test_monotone_in_each_input(self, method):
        rng = np.random.default_rng(33)
        for _ in range(200):
            n = rng.integers(2, 5)
            m = 6
            s = rng.uniform(0, 1, (n, m))
            alpha = rng.uniform(0.1, 1, n)
            alpha /= alpha.sum()
            params = FusionParams(
                method=method,
                rho=rng.uniform(0, 2, n),
                alpha=alpha,
                beta=float(rng.uniform(0, 1)),
                gamma=float(rng.uniform(0.5, 2.0)),
            )
            base = fuse_scores(params, s)
            i = rng.integers(0, n)
            j = rng.integers(0, m)
            bumped = s.copy()
            bumped[i, j] = min(1.0, bumped[i, j] + rng.uniform(0, 1 - bumped[i, j] + 1e-9))
            out = fuse_scores(params, bumped)
            assert out[j] >= base[j] - 1e-12
            mask = np.arange(m) != j
            assert np.allclose(out[mask], base[mask], atol=1e-15)

    def test_output_finite_and_same_length(self):
        rng = np.random.default_rng(34)
        s = rng.uniform(0, 1, (4, 17))
        for method in SCORE_METHODS:
            out = fuse_scores(FusionParams(method=method), s)
            assert out.shape == (17,)
            assert np.all(np.isfinite(out))

    def test_weight_shape_mismatch(self):
        with pytest.raises(WeightShapeMismatch):
            fuse_scores(FusionParams(method=FusionMethod.MEAN, rho=[1.0]), [[0.5], [0.5]])
        with pytest.raises(WeightShapeMismatch):
            fuse_scores(
                FusionParams(method=FusionMethod.GHARM, alpha=[0.9, 0.5]), [[0.5], [0.5]]
            )


class TestRoundRobin:
    def test_identical_lists(self):
        lists = [["a", "b", "c"]] * 3
        assert round_robin(lists) == ["a", "b", "c"]

    def test_two_swapped_lists(self):
        assert round_robin([["A", "B"], ["B", "A"]]) == ["A", "B"]

    def test_random_permutations_property(self):
        rng = np.random.default_rng(35)
        universe = [f"img{i:02d}" for i in range(20)]
        lists = []
        for _ in range(4):
            perm = list(universe)
            rng.shuffle(perm)
            lists.append(perm)
        merged = round_robin(lists)
        assert sorted(merged) == sorted(universe)
        heads = []
        for lst in lists:
            if lst[0] not in heads:
                heads.append(lst[0])
        assert merged[: len(heads)] == heads


class TestFusePairLists:
    def test_two_descriptors_round_trip(self):
        la = [("q", "a", 0.9), ("q", "b", 0.5), ("q", "c", 0.1)]
        lb = [("q", "a", 0.2), ("q", "b", 0.8), ("q", "c", 0.0)]
        fused = fuse_pair_lists([la, lb], FusionParams(method=FusionMethod.MEAN))
        # normalized: a -> (1.0, 0.25), b -> (0.5, 1.0), c -> (0, 0)
        assert [b for _, b, _ in fused] == ["b", "a", "c"]
        scores = {b: s for _, b, s in fused}
        assert scores["a"] == pytest.approx(0.625)
        assert scores["b"] == pytest.approx(0.75)

    def test_round_robin_mode(self):
        la = [("q", "a", 3.0), ("q", "b", 2.0)]
        lb = [("q", "b", 3.0), ("q", "a", 2.0)]
        fused = fuse_pair_lists(
            [la, lb], FusionParams(method=FusionMethod.ROUND_ROBIN)
        )
        assert [b for _, b, _ in fused] == ["a", "b"]

    def test_mismatched_universes_rejected(self):
        la = [("q", "a", 1.0)]
        lb = [("q", "b", 1.0)]
        with pytest.raises(WeightShapeMismatch):
            fuse_pair_lists([la, lb], FusionParams(method=FusionMethod.MEAN))
