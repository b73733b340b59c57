import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitset import metric as M
from gaitset.errors import ConfigError, DataError
from gaitset.metric import Adam, BatchSpec, TrainConfig, batch_all_triplet, sample_batch, train_step
from gaitset.network import GaitSetModel, NetworkConfig
from gaitset.tensor import Tensor, grad_check

from oracles import batch_all_enumeration

LEAN = dict(channels=(2, 2, 4, 4, 8, 8), embed_dim=4, scales=2)


def strip_batch(values):
    """[[v per sample]] 1-D, single strip -> [B, 1, 1]."""
    return Tensor(np.array(values, dtype=float).reshape(-1, 1, 1))


def random_batch(rng, p, k, strips, d):
    labels = [f"id{i}" for i in range(p) for _ in range(k)]
    return rng.standard_normal((p * k, strips, d)), labels


class TestLossExamples:
    def test_separated_clusters(self):
        rep = batch_all_triplet(strip_batch([0, 0, 10, 10]), ["A", "A", "B", "B"], 0.2)
        assert rep.loss == 0.0 and rep.nonzero_fraction == 0.0

    def test_overlapping_clusters_vs_enumeration(self):
        emb = np.array([0.0, 1.0, 1.5, 2.5]).reshape(4, 1, 1)
        labels = ["A", "A", "B", "B"]
        rep = batch_all_triplet(Tensor(emb), labels, 0.2)
        total, frac, _ = batch_all_enumeration(emb, labels, 0.2)
        assert rep.terms == 8
        assert rep.loss == pytest.approx(total, abs=1e-12)
        assert rep.nonzero_fraction == pytest.approx(frac)

    def test_permutation(self):
        rng = np.random.default_rng(0)
        emb, labels = random_batch(rng, 3, 3, 4, 2)
        perm = rng.permutation(9)
        a = batch_all_triplet(Tensor(emb), labels).loss
        b = batch_all_triplet(Tensor(emb[perm]), [labels[i] for i in perm]).loss
        assert a == pytest.approx(b, rel=1e-12)

    def test_degenerate_batch(self):
        with pytest.raises(DataError):
            batch_all_triplet(strip_batch([0, 1, 2]), ["A", "B", "C"])
        with pytest.raises(DataError):
            batch_all_triplet(strip_batch([0, 1]), ["A", "A"])

    def test_label_count_mismatch(self):
        with pytest.raises(ConfigError):
            batch_all_triplet(strip_batch([0, 1]), ["A"])


class TestLossProperties:
    def test_matches_enumeration_on_random_batches(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p, k, d = rng.integers(2, 5), rng.integers(2, 5), rng.integers(1, 5)
            emb, labels = random_batch(rng, p, k, 3, d)
            rep = batch_all_triplet(Tensor(emb), labels, 0.2)
            total, frac, per_strip = batch_all_enumeration(emb, labels, 0.2)
            assert abs(rep.loss - total) <= 1e-6
            np.testing.assert_allclose(rep.per_strip, per_strip, atol=1e-6)
            assert rep.nonzero_fraction == pytest.approx(frac)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), d=st.integers(2, 4))
    def test_rotation_invariance(self, seed, d):
        rng = np.random.default_rng(seed)
        emb, labels = random_batch(rng, 2, 3, 2, d)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        a = batch_all_triplet(Tensor(emb), labels).loss
        b = batch_all_triplet(Tensor(emb @ q), labels).loss
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 3.0))
    def test_zero_iff_margin_satisfied(self, seed, scale):
        rng = np.random.default_rng(seed)
        emb, labels = random_batch(rng, 3, 2, 2, 2)
        emb = emb * scale
        rep = batch_all_triplet(Tensor(emb), labels, 0.2)
        dist = np.linalg.norm(emb[:, None] - emb[None, :], axis=-1)
        lab = np.array(labels)
        satisfied = all(
            dist[a, n, s] >= dist[a, p, s] + 0.2
            for s in range(2)
            for a in range(6)
            for p in range(6)
            for n in range(6)
            if a != p and lab[a] == lab[p] and lab[n] != lab[a]
        )
        assert (rep.loss == 0.0) == satisfied

    def test_bounds(self):
        rng = np.random.default_rng(2)
        emb, labels = random_batch(rng, 4, 4, 5, 3)
        rep = batch_all_triplet(Tensor(emb), labels)
        assert rep.loss >= 0 and 0 <= rep.nonzero_fraction <= 1
        assert rep.per_strip.shape == (5,)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        emb, labels = random_batch(rng, 2, 3, 2, 3)
        assert grad_check(lambda t: batch_all_triplet(t, labels, 0.5).total, emb) < 1e-6


def toy_dataset(rng, ids=("A", "B", "C"), seqs=2, frames=5, h=64, w=44):
    return {
        i: [(rng.random((frames, h, w)) > 0.5).astype(np.float32) for _ in range(seqs)]
        for i in ids
    }


class TestSampler:
    def test_spec_defaults_and_bounds(self):
        assert BatchSpec() == BatchSpec(8, 16, 30)
        with pytest.raises(ConfigError):
            BatchSpec(p=1, k=2, m=3)
        with pytest.raises(ConfigError):
            BatchSpec(p=2, k=1, m=3)

    def test_two_identity_toy(self):
        data = toy_dataset(np.random.default_rng(0), ids=("A", "B"))
        batch = sample_batch(data, BatchSpec(2, 2, 4), seed=1)
        assert sorted(batch.labels) == ["A", "A", "B", "B"]
        assert all(s.shape == (4, 64, 44) for s in batch.sets)

    def test_short_sequence_uses_replacement(self):
        data = toy_dataset(np.random.default_rng(1), ids=("A", "B"), frames=3)
        batch = sample_batch(data, BatchSpec(2, 2, 30), seed=0)
        assert all(len(s) == 30 for s in batch.sets)

    def test_without_replacement_when_long_enough(self):
        frames = np.arange(20, dtype=np.float32).reshape(20, 1, 1) * np.ones((1, 2, 2), np.float32)
        data = {"A": [frames], "B": [frames]}
        batch = sample_batch(data, BatchSpec(2, 2, 20), seed=3)
        for s in batch.sets:
            assert sorted(s[:, 0, 0].tolist()) == list(range(20))

    def test_determinism(self):
        data = toy_dataset(np.random.default_rng(2))
        a = sample_batch(data, BatchSpec(2, 3, 4), seed=9)
        b = sample_batch(data, BatchSpec(2, 3, 4), seed=9)
        assert a.labels == b.labels
        for x, y in zip(a.sets, b.sets):
            np.testing.assert_array_equal(x, y)

    @settings(max_examples=30, deadline=None)
    @given(p=st.integers(2, 4), k=st.integers(2, 5), seed=st.integers(0, 1000))
    def test_label_multiset(self, p, k, seed):
        data = {f"id{i}": [np.zeros((2, 4, 4), np.float32)] for i in range(5)}
        batch = sample_batch(data, BatchSpec(p, k, 3), seed=seed)
        counts = {lab: batch.labels.count(lab) for lab in set(batch.labels)}
        assert len(counts) == p and set(counts.values()) == {k}

    def test_too_few_identities(self):
        with pytest.raises(DataError):
            sample_batch(toy_dataset(np.random.default_rng(3), ids=("A",)), BatchSpec(2, 2, 2), seed=0)


class TestTrainStep:
    def _model(self, seed=0):
        return GaitSetModel.initialize(NetworkConfig(**LEAN), seed=seed)

    def test_zero_loss_leaves_parameters(self):
        model = self._model()
        opt = Adam(model.params, lr=1e-2)
        before = {k: v.data.copy() for k, v in model.params.items()}
        rng = np.random.default_rng(0)
        frames = (rng.random((3, 64, 44)) > 0.5).astype(np.float32)
        # identical sets give zero distances, so with margin 0 every hinge is 0
        batch = M.Batch([frames] * 4, ["A", "A", "B", "B"])
        rep = train_step(model, batch, opt, margin=0.0)
        assert rep.loss == 0.0
        for k, v in model.params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_positive_hinge_reaches_hpm(self):
        model = self._model(1)
        rng = np.random.default_rng(1)
        sets = [(rng.random((3, 64, 44)) > 0.5).astype(np.float32) for _ in range(4)]
        emb = model.forward(sets)
        rep = batch_all_triplet(emb, ["A", "B", "A", "B"], margin=5.0)
        assert rep.positive_terms > 0
        rep.total.backward()
        assert np.linalg.norm(model.params["hpm.main.weight"].grad) > 0

    def test_update_moves_parameters(self):
        model = self._model(2)
        opt = Adam(model.params, lr=1e-3)
        before = model.params["hpm.main.weight"].data.copy()
        batch = sample_batch(toy_dataset(np.random.default_rng(4)), BatchSpec(2, 2, 3), seed=0)
        rep = train_step(model, batch, opt, margin=5.0)
        assert rep.positive_terms > 0
        assert not np.array_equal(before, model.params["hpm.main.weight"].data)

    def test_identical_steps_are_deterministic(self):
        data = toy_dataset(np.random.default_rng(5))

        def run():
            model = self._model(3)
            M.train(model, data, TrainConfig(iterations=2, lr=1e-3, seed=4, batch=BatchSpec(2, 2, 3)))
            return [v.data.tobytes() for v in model.params.values()]

        assert run() == run()

    def test_log_and_checkpoints(self, tmp_path):
        data = toy_dataset(np.random.default_rng(6))
        model = self._model(4)
        cfg = TrainConfig(iterations=2, lr=1e-3, seed=1, batch=BatchSpec(2, 2, 3), checkpoint_every=1)
        M.train(model, data, cfg, log_path=tmp_path / "train.log", checkpoint_dir=tmp_path)
        lines = (tmp_path / "train.log").read_text().splitlines()
        assert [line.split()[0] for line in lines] == ["iteration=1", "iteration=2"]
        assert all("loss=" in l and "nonzero=" in l and "wall=" in l for l in lines)
        assert (tmp_path / "checkpoint-0000002.ckpt").exists()


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        w.grad = np.array([0.5, -4.0, 0.0])
        opt = Adam({"w": w}, lr=0.1)
        opt.step()
        np.testing.assert_allclose(w.data, [0.9, -1.9, 3.0], atol=1e-6)

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ConfigError):
            Adam({}, lr=0.0)


class TestSchedules:
    def test_presets(self):
        assert TrainConfig.preset("LT").iterations == 80_000
        ou = TrainConfig.preset("oumvlp")
        assert ou.iterations == 250_000 and ou.batch.p == 32
        assert ou.lr_at(149_999) == 1e-4 and ou.lr_at(150_000) == 1e-5

    def test_unknown(self):
        with pytest.raises(ConfigError):
            TrainConfig.preset("XL")
