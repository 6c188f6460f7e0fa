"""Recognizer tests: forward behavior, training, and gradient correctness
against central finite differences."""

import numpy as np
import pytest

from npcircuit import recognizer as rec
from npcircuit.errors import DimensionMismatch
from npcircuit.schema import VariableSchema


def blob_dataset(n=400, seed=0, sep=2.0):
    """Two attributes, each linearly separable from its own feature pair."""
    rng = np.random.default_rng(seed)
    schema = VariableSchema(2, (2, 3))
    a1 = rng.integers(0, 2, n)
    a2 = rng.integers(0, 3, n)
    x = rng.normal(0, 0.3, size=(n, 4))
    x[:, 0] += sep * a1
    x[:, 1] -= sep * a1
    x[:, 2] += sep * a2
    x[:, 3] += sep * (a2 == 1)
    x = (x - x.min()) / (x.max() - x.min())
    return schema, x, np.column_stack([a1, a2])


def zeroed(params):
    blocks = tuple(
        rec.AttributeBlock(
            w1=np.zeros_like(b.w1),
            b1=np.zeros_like(b.b1),
            w2=np.zeros_like(b.w2),
            b2=np.zeros_like(b.b2),
            input_slice=b.input_slice,
        )
        for b in params.blocks
    )
    return rec.RecognizerParams(params.schema, params.input_dim, blocks)


class TestForward:
    def test_zero_params_give_uniform(self):
        schema = VariableSchema(2, (3, 4))
        params = zeroed(rec.init_params(schema, input_dim=5, hidden_dim=8, seed=0))
        out = rec.forward(params, np.linspace(0, 1, 5))
        np.testing.assert_allclose(out[0], np.full(3, 1 / 3))
        np.testing.assert_allclose(out[1], np.full(4, 1 / 4))

    def test_probability_vectors(self):
        rng = np.random.default_rng(1)
        schema = VariableSchema(2, (3, 5))
        params = rec.init_params(schema, input_dim=6, hidden_dim=16, seed=3)
        for _ in range(20):
            out = rec.forward(params, rng.random(6))
            for vec in out:
                assert vec.sum() == pytest.approx(1.0, abs=1e-9)
                assert np.all(vec >= 0)

    def test_deterministic_across_calls(self):
        schema = VariableSchema(2, (3,))
        params = rec.init_params(schema, input_dim=4, hidden_dim=8, seed=7)
        x = np.array([0.1, 0.9, 0.4, 0.2])
        first = rec.forward(params, x)
        for _ in range(5):
            again = rec.forward(params, x)
            assert np.array_equal(first[0], again[0])

    def test_dimension_mismatch(self):
        schema = VariableSchema(2, (3,))
        params = rec.init_params(schema, input_dim=4, seed=0)
        with pytest.raises(DimensionMismatch):
            rec.forward(params, np.zeros(5))


class TestTrain:
    def test_separable_data_reaches_high_accuracy(self):
        schema, x, labels = blob_dataset()
        cfg = rec.TrainConfig(epochs=60, batch_size=64, learning_rate=0.1, seed=0, hidden_dim=32)
        params = rec.train((x, labels), schema, cfg)
        preds = rec.attribute_argmax(params, x)
        for k in range(2):
            acc = np.mean(preds[:, k] == labels[:, k])
            assert acc >= 0.99, f"attribute {k}: {acc}"

    def test_zero_epochs_rejected(self):
        schema, x, labels = blob_dataset(n=50)
        with pytest.raises(ValueError):
            rec.train((x, labels), schema, rec.TrainConfig(epochs=0))

    def test_same_seed_bit_identical(self):
        schema, x, labels = blob_dataset(n=120)
        cfg = rec.TrainConfig(epochs=5, batch_size=32, seed=11, hidden_dim=8)
        p1 = rec.train((x, labels), schema, cfg)
        p2 = rec.train((x, labels), schema, cfg)
        for b1, b2 in zip(p1.blocks, p2.blocks):
            assert np.array_equal(b1.w1, b2.w1)
            assert np.array_equal(b1.b1, b2.b1)
            assert np.array_equal(b1.w2, b2.w2)
            assert np.array_equal(b1.b2, b2.b2)

    def test_loss_mostly_non_increasing_over_epochs(self):
        # stochastic tolerance: at least 8 of 10 seeds give a non-increasing
        # epoch-level loss curve on easy data
        good = 0
        for seed in range(10):
            schema, x, labels = blob_dataset(n=300, seed=seed)
            losses = []
            for epochs in (1, 3, 6, 10):
                cfg = rec.TrainConfig(
                    epochs=epochs, batch_size=64, learning_rate=0.05, seed=seed, hidden_dim=16
                )
                params = rec.train((x, labels), schema, cfg)
                losses.append(rec.sum_cross_entropy(params, x, labels))
            if all(b <= a + 1e-6 for a, b in zip(losses, losses[1:])):
                good += 1
        assert good >= 8, f"only {good}/10 seeds were non-increasing"


class TestInputGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        schema = VariableSchema(2, (3, 4, 2))
        params = rec.init_params(schema, input_dim=6, hidden_dim=12, seed=9)
        h = 1e-5
        for _ in range(20):
            x = rng.random(6)
            labels = np.array([rng.integers(0, c) for c in schema.attribute_cardinalities])
            attacked = tuple(sorted(rng.choice([1, 2, 3], size=rng.integers(1, 4), replace=False)))
            grad = rec.input_gradient(params, x, labels, attacked)
            fd = np.zeros_like(x)
            for i in range(len(x)):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                lp, _ = rec.attack_loss_and_grad(params, xp[None], labels[None], attacked)
                lm, _ = rec.attack_loss_and_grad(params, xm[None], labels[None], attacked)
                fd[i] = (lp[0] - lm[0]) / (2 * h)
            denom = max(np.abs(fd).max(), 1e-8)
            assert np.abs(grad - fd).max() / denom < 1e-4

    def test_symmetric_duplicate_blocks(self):
        # two identical attributes reading the same slice get identical
        # gradient contributions; the total gradient equals twice one of them
        schema = VariableSchema(2, (3, 3))
        base = rec.init_params(VariableSchema(2, (3,)), input_dim=4, hidden_dim=8, seed=2)
        block = base.blocks[0]
        params = rec.RecognizerParams(schema, 4, (block, block))
        x = np.array([0.3, 0.8, 0.1, 0.5])
        labels = np.array([1, 1])
        g_both = rec.input_gradient(params, x, labels, (1, 2))
        g_one = rec.input_gradient(params, x, labels, (1,))
        np.testing.assert_allclose(g_both, g_one, atol=1e-12)

    def test_zero_second_layer_gives_zero_gradient(self):
        schema = VariableSchema(2, (3,))
        params = rec.init_params(schema, input_dim=4, hidden_dim=8, seed=0)
        b = params.blocks[0]
        frozen = rec.RecognizerParams(
            schema,
            4,
            (
                rec.AttributeBlock(
                    w1=b.w1,
                    b1=b.b1,
                    w2=np.zeros_like(b.w2),
                    b2=np.zeros_like(b.b2),
                    input_slice=b.input_slice,
                ),
            ),
        )
        g = rec.input_gradient(frozen, np.array([0.1, 0.2, 0.3, 0.4]), np.array([2]), (1,))
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_scoped_block_gradient_outside_slice_is_zero(self):
        schema = VariableSchema(2, (3, 3))
        params = rec.init_params(
            schema, input_dim=6, hidden_dim=8, seed=1, input_slices=[(0, 3), (3, 6)]
        )
        g = rec.input_gradient(params, np.full(6, 0.4), np.array([0, 1]), (1,))
        assert np.all(g[3:] == 0)
        assert np.any(g[:3] != 0)


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        schema = VariableSchema(2, (3, 4))
        params = rec.init_params(schema, input_dim=5, hidden_dim=6, seed=13)
        path = tmp_path / "r.recog"
        rec.save_params(params, path)
        loaded = rec.load_params(path)
        assert loaded.schema == params.schema
        assert loaded.input_dim == params.input_dim
        for a, b in zip(params.blocks, loaded.blocks):
            assert np.array_equal(a.w1, b.w1)
            assert np.array_equal(a.b1, b.b1)
            assert np.array_equal(a.w2, b.w2)
            assert np.array_equal(a.b2, b.b2)
            assert a.input_slice == b.input_slice
