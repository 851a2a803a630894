"""Masked cross-entropy loss, EMA exactness, condition dropout, and the
teacher overfit/fidelity smoke runs."""

import numpy as np
import pytest

from maskdist import tensor as T
from maskdist.datasets import SyntheticDataset
from maskdist.evaluation import TabularTeacher
from maskdist.model import ModelConfig, init_params, forward
from maskdist.optim import Ema
from maskdist.rng import StreamHub, make_stream
from maskdist.teacher import (
    TrainConfig,
    apply_condition_dropout,
    mdm_loss,
    train_teacher,
)

MASK = 16


class TestMdmLoss:
    def test_no_masked_positions_gives_zero(self):
        logits = T.Array(np.random.default_rng(0).normal(size=(2, 3, 16)))
        x0 = np.array([[1, 2, 3], [4, 5, 6]])
        loss = mdm_loss(logits, x0, x0, MASK)
        assert loss.item() == 0.0

    def test_uniform_logits_is_log_vocab(self):
        logits = T.Array(np.zeros((1, 4, 16)))
        x0 = np.array([[0, 5, 10, 15]])
        x_t = np.full((1, 4), MASK)
        assert mdm_loss(logits, x0, x_t, MASK).item() == pytest.approx(
            np.log(16.0), abs=1e-12)
        assert np.log(16.0) == pytest.approx(2.77259, abs=1e-5)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        x0 = np.array([[3, 7]])
        x_t = np.full((1, 2), MASK)
        losses = []
        for margin in (2.0, 10.0, 40.0):
            z = np.zeros((1, 2, 16))
            z[0, 0, 3] = margin
            z[0, 1, 7] = margin
            losses.append(mdm_loss(T.Array(z), x0, x_t, MASK).item())
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-10

    def test_unmasked_disagreement_rejected(self):
        logits = T.Array(np.zeros((1, 2, 16)))
        with pytest.raises(ValueError):
            mdm_loss(logits, np.array([[1, 2]]), np.array([[1, 3]]), MASK)

    def test_gradient_only_through_masked_rows(self):
        z = T.parameter(np.random.default_rng(1).normal(size=(1, 3, 16)))
        x0 = np.array([[2, 9, 4]])
        x_t = np.array([[2, MASK, 4]])
        with T.Tape() as tape:
            loss = mdm_loss(z, x0, x_t, MASK)
        tape.backward(loss)
        assert np.all(z.grad[0, 0] == 0.0)
        assert np.all(z.grad[0, 2] == 0.0)
        assert np.any(z.grad[0, 1] != 0.0)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(5, 3, 16))
        x0 = rng.integers(0, 16, size=(5, 3))
        x_t = x0.copy()
        x_t[rng.random((5, 3)) < 0.6] = MASK
        x_t[0, 0] = MASK  # at least one masked position
        perm = rng.permutation(5)
        a = mdm_loss(T.Array(z), x0, x_t, MASK).item()
        b = mdm_loss(T.Array(z[perm]), x0[perm], x_t[perm], MASK).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestEma:
    def test_exact_geometric_shrinkage(self):
        cfg = ModelConfig(vocab_size=4, seq_len=2, n_classes=2, d_model=8,
                          n_blocks=1, n_heads=2)
        params = init_params(cfg, make_stream(0, "model_init"))
        target = params.copy()
        ema = Ema(params, rate=0.9)
        # shift ema away from the constant params, then update k times
        for name in ema.shadow:
            ema.shadow[name] += 1.0
        gap0 = {n: ema.shadow[n] - target.arrays[n].data for n in ema.shadow}
        for _ in range(25):
            ema.update(params)
        for n, s in ema.shadow.items():
            np.testing.assert_allclose(
                s - target.arrays[n].data, 0.9**25 * gap0[n], rtol=1e-12)


class TestConditionDropout:
    def test_dropout_frequency(self):
        rng = make_stream(4, "drop")
        classes = np.zeros(10_000, dtype=np.int64)
        cond = apply_condition_dropout(classes, 0.1, rng)
        frac = (cond == -1).mean()
        assert abs(frac - 0.1) <= 0.01  # binomial 3.3 sigma


class TestTraining:
    def test_single_sequence_overfit(self):
        ds = SyntheticDataset.tabular_delta(4, 8, 1, seed=11)
        cfg = TrainConfig(iterations=2000, batch_size=16, lr=2e-3,
                          cond_dropout=0.1, seed=0, warmup_steps=50)
        model_cfg = ModelConfig(vocab_size=8, seq_len=4, n_classes=1,
                                d_model=32, n_blocks=1, n_heads=4)
        result = train_teacher(ds, cfg, model_cfg)
        tail = np.mean([h["loss"] for h in result.history[-50:]])
        assert tail < 0.05

    def test_tabular_marginal_fidelity(self):
        # the EMA smooths the final-iterate wobble of the constant-lr loop
        ds = SyntheticDataset.tabular(2, 3, 2, seed=7)
        cfg = TrainConfig(iterations=4000, batch_size=64, lr=1e-3, seed=1,
                          ema_rate=0.999)
        model_cfg = ModelConfig(vocab_size=3, seq_len=2, n_classes=2,
                                d_model=48, n_blocks=2, n_heads=4)
        result = train_teacher(ds, cfg, model_cfg)
        oracle = TabularTeacher.from_dataset(ds)
        all_mask = np.full((1, 2), 3, dtype=np.int64)
        from maskdist.model import predict_logits, softmax_temperature

        for c in range(2):
            got = softmax_temperature(predict_logits(result.ema, all_mask, c), 1.0)[0]
            true = softmax_temperature(oracle.logits_batch(all_mask, c), 1.0)[0]
            tv = 0.5 * np.abs(got - true).sum(axis=-1)
            assert tv.max() <= 0.05

    def test_histories_and_ema_returned(self):
        ds = SyntheticDataset.patterned(3, 4, 2, seed=3)
        cfg = TrainConfig(iterations=30, batch_size=8, lr=1e-3, seed=2)
        model_cfg = ModelConfig(vocab_size=4, seq_len=3, n_classes=2,
                                d_model=16, n_blocks=1, n_heads=2)
        result = train_teacher(ds, cfg, model_cfg)
        assert len(result.history) == 30
        assert set(result.history[0]) == {"iter", "loss", "masked"}
        # EMA at rate 0.9999 stays near the init after 30 iterations
        assert result.ema.state_hash() != result.params.state_hash()

    def test_determinism(self):
        ds = SyntheticDataset.patterned(3, 4, 2, seed=3)
        cfg = TrainConfig(iterations=25, batch_size=8, lr=1e-3, seed=5)
        model_cfg = ModelConfig(vocab_size=4, seq_len=3, n_classes=2,
                                d_model=16, n_blocks=1, n_heads=2)
        a = train_teacher(ds, cfg, model_cfg).params.state_hash()
        b = train_teacher(ds, cfg, model_cfg).params.state_hash()
        assert a == b

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(cond_dropout=1.5)
