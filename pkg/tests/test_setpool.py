import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitset import setpool
from gaitset.errors import ConfigError
from gaitset.setpool import SpStrategy, set_pool
from gaitset.tensor import Tensor, grad_check

from oracles import median_py

ALL = list(SpStrategy)


def frames(values):
    """[[a, b], ...] -> [n, 1, 1, 2] frame set."""
    return Tensor(np.array(values, dtype=float).reshape(len(values), 1, 1, -1))


def params_for(strategy, c, seed=0, dtype=np.float64):
    return {k: Tensor(v.data.astype(dtype)) for k, v in setpool.init_params(strategy, c, np.random.default_rng(seed)).items()}


class TestExamples:
    def test_max(self):
        out = set_pool(frames([[1, 5], [4, 2], [3, 3]]), "max")
        assert out.data.reshape(-1).tolist() == [4.0, 5.0]

    def test_joint_sum_even_median(self):
        out = set_pool(frames([[2, 0], [0, 2]]), "joint_sum")
        assert out.data.reshape(-1).tolist() == [4.0, 4.0]

    def test_median_matches_sorted_definition(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 5, 6):
            x = rng.standard_normal((n, 1, 1, 3))
            got = set_pool(Tensor(x), "median").data.reshape(-1)
            want = [median_py(list(x[:, 0, 0, j])) for j in range(3)]
            np.testing.assert_allclose(got, want)

    def test_empty_set(self):
        with pytest.raises(ConfigError):
            set_pool(Tensor(np.zeros((0, 1, 2, 2))), "max")

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            SpStrategy.parse("sum")


class TestJointConv:
    def setup_method(self):
        self.x = Tensor(np.random.default_rng(1).standard_normal((5, 2, 3, 4)))

    def _combiner(self, row):
        c = 2
        w = np.zeros((c, 3 * c, 1, 1))
        for o in range(c):
            for s, coef in enumerate(row):
                w[o, s * c + o] = coef
        return Tensor(w)

    def test_all_ones_is_joint_sum(self):
        got = setpool.joint_conv_pool(self.x, self._combiner([1, 1, 1])).data
        np.testing.assert_allclose(got, set_pool(self.x, "joint_sum").data, rtol=1e-12)

    def test_projection_is_max(self):
        got = setpool.joint_conv_pool(self.x, self._combiner([1, 0, 0])).data
        np.testing.assert_allclose(got, set_pool(self.x, "max").data, rtol=1e-12)

    def test_random_vs_two_step_oracle(self):
        w = np.random.default_rng(2).standard_normal((2, 6, 1, 1))
        x = self.x.data
        stats = np.concatenate([x.max(0), x.mean(0), np.median(x, 0)], axis=0)
        want = np.einsum("oc,chw->ohw", w[:, :, 0, 0], stats)
        got = setpool.joint_conv_pool(self.x, Tensor(w)).data
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            setpool.joint_conv_pool(self.x, Tensor(np.zeros((2, 3, 1, 1))))


class TestAttention:
    def test_zero_parameters_degenerate_to_max(self):
        x = Tensor(np.random.default_rng(3).standard_normal((6, 3, 2, 2)))
        got = setpool.attention_pool(x, Tensor(np.zeros((3, 12, 1, 1)))).data
        np.testing.assert_array_equal(got, set_pool(x, "max").data)

    def test_singleton(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal((2, 8, 1, 1))
        joined = np.concatenate([v[0], v[0], v[0], v[0]], axis=0)
        a = np.einsum("oc,chw->ohw", w[:, :, 0, 0], joined)
        got = setpool.attention_pool(Tensor(v), Tensor(w)).data
        np.testing.assert_allclose(got, v[0] * a + v[0], rtol=1e-10)
        assert got.shape == (2, 3, 3)

    def test_twenty_shuffles(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((9, 2, 4, 3))
        w = Tensor(rng.standard_normal((2, 8, 1, 1)))
        base = setpool.attention_pool(Tensor(x), w).data
        for _ in range(20):
            got = setpool.attention_pool(Tensor(x[rng.permutation(9)]), w).data
            np.testing.assert_allclose(got, base, rtol=1e-6, atol=1e-12)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(1, 40),
        c=st.integers(1, 3),
        hw=st.tuples(st.integers(1, 3), st.integers(1, 3)),
        strategy=st.sampled_from(ALL),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_permutation_invariance(self, n, c, hw, strategy, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, c, *hw))
        p = params_for(strategy, c, seed)
        a = set_pool(Tensor(x), strategy, p).data
        b = set_pool(Tensor(x[rng.permutation(n)]), strategy, p).data
        if strategy in (SpStrategy.MAX, SpStrategy.MEDIAN):
            np.testing.assert_array_equal(a, b)
        else:
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("strategy", ALL)
    @pytest.mark.parametrize("n", [1, 2, 7, 30, 100])
    def test_cardinality_freedom(self, strategy, n):
        x = np.random.default_rng(n).standard_normal((n, 2, 3, 2))
        assert set_pool(Tensor(x), strategy, params_for(strategy, 2)).shape == (2, 3, 2)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 20), seed=st.integers(0, 2**31 - 1))
    def test_max_dominates_mean_on_nonnegative(self, n, seed):
        x = np.abs(np.random.default_rng(seed).standard_normal((n, 2, 2, 2)))
        assert np.all(set_pool(Tensor(x), "max").data >= set_pool(Tensor(x), "mean").data)

    @pytest.mark.parametrize("strategy", ALL)
    def test_batched_axis_matches_single(self, strategy):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4, 2, 2, 2))
        p = params_for(strategy, 2)
        batched = set_pool(Tensor(x), strategy, p, set_axis=1).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], set_pool(Tensor(x[b]), strategy, p).data, rtol=1e-12)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_joint_conv_parameters(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((5, 2, 2, 3)))
        assert grad_check(lambda w: setpool.joint_conv_pool(x, w).sum(), rng.standard_normal((2, 6, 1, 1))) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_attention_parameters(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((4, 2, 2, 2)))
        assert grad_check(lambda w: setpool.attention_pool(x, w).sum(), rng.standard_normal((2, 8, 1, 1))) < 1e-4

    @pytest.mark.parametrize("strategy", ALL)
    def test_features(self, strategy):
        rng = np.random.default_rng(9)
        p = params_for(strategy, 2, 9)
        weights = Tensor(rng.standard_normal((2, 2, 2)))
        assert grad_check(lambda t: (set_pool(t, strategy, p) * weights).sum(), rng.standard_normal((5, 2, 2, 2))) < 1e-4
