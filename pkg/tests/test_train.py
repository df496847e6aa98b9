"""Optimizer, training loop, early stopping, checkpoint/resume."""

import numpy as np
import pytest

from skipnet.checkpoint import load_checkpoint, save_checkpoint
from skipnet.data import apply_normalization, fit_normalization, make_batch, make_batches
from skipnet.errors import CheckpointError, ContractError, TrainingError
from skipnet.metrics import baseline_predict, mean_average_accuracy
from skipnet.model import clone_params, config_for_schema, forward, init_model_params
from skipnet.synthgen import GenConfig, generate_dataset
from skipnet.train import (AdamState, TrainConfig, adam_step, batch_loss,
                           collect_grads, early_stop, evaluate, evaluate_loss,
                           init_adam_state, run_training, train_epoch, epoch_seed)

from conftest import random_sessions


def tiny_config(schema, seed=0, **overrides):
    dims = dict(track_fc_dim=4, interaction_fc_dim=4, sessrep_hidden=3,
                enc_fc_dim=5, enc_hidden=4, dec_final_hidden=4, seed=seed)
    dims.update(overrides)
    return config_for_schema(schema, **dims)


def params_snapshot(params):
    return {k: t.data.copy() for k, t in params.named_tensors().items()}


def assert_params_equal(a, b):
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


class TestAdamStep:
    def _setup(self, tiny_schema):
        params = init_model_params(tiny_config(tiny_schema))
        return params, init_adam_state(params), TrainConfig()

    def test_zero_gradients_leave_params(self, tiny_schema):
        params, state, cfg = self._setup(tiny_schema)
        before = params_snapshot(params)
        grads = {k: np.zeros_like(t.data) for k, t in params.named_tensors().items()}
        adam_step(params, grads, state, cfg)
        assert_params_equal(before, params_snapshot(params))
        assert state.step == 1

    def test_single_step_matches_hand_formula(self, tiny_schema):
        params, state, cfg = self._setup(tiny_schema)
        named = params.named_tensors()
        rng = np.random.default_rng(0)
        grads = {k: 0.01 * rng.standard_normal(t.data.shape) for k, t in named.items()}
        before = params_snapshot(params)
        adam_step(params, grads, state, cfg)
        for k, t in named.items():
            g = grads[k]
            m = (1 - cfg.beta1) * g
            v = (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1)
            v_hat = v / (1 - cfg.beta2)
            expected = before[k] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
            np.testing.assert_allclose(t.data, expected, atol=1e-12)

    def test_clipping_scales_exactly(self, tiny_schema):
        params, state, cfg = self._setup(tiny_schema)
        named = params.named_tensors()
        grads = {k: np.zeros_like(t.data) for k, t in named.items()}
        # a single gradient vector with norm 50 against clip 5 scales by 0.1
        key = "out_fc.weight"
        g = np.zeros_like(named[key].data)
        g.flat[0] = 50.0
        grads[key] = g
        adam_step(params, grads, state, cfg)
        scaled = g.flat[0] * (cfg.clip_norm / 50.0)
        assert scaled == 5.0
        m_expected = (1 - cfg.beta1) * scaled
        np.testing.assert_allclose(state.m[key].flat[0], m_expected, atol=1e-15)

    def test_non_finite_gradient_names_parameter(self, tiny_schema):
        params, state, cfg = self._setup(tiny_schema)
        grads = {k: np.zeros_like(t.data) for k, t in params.named_tensors().items()}
        grads["shared_fc.bias"][0] = np.nan
        with pytest.raises(TrainingError, match="shared_fc.bias"):
            adam_step(params, grads, state, cfg)

    def test_shared_fc_updated_once(self, tiny_schema):
        """The shared FC appears once in the update loop even though two paths
        feed its gradient; a double update would move it twice as far."""
        params, state, cfg = self._setup(tiny_schema)
        named = params.named_tensors()
        assert list(named).count("shared_fc.weight") == 1
        grads = {k: np.zeros_like(t.data) for k, t in named.items()}
        grads["shared_fc.weight"] += 0.01
        before = params.shared_fc.weight.data.copy()
        adam_step(params, grads, state, cfg)
        moved = before - params.shared_fc.weight.data
        # first step from zero moments: m_hat = g, v_hat = g^2
        expected = cfg.learning_rate * 0.01 / (0.01 + cfg.eps)
        np.testing.assert_allclose(moved, expected, atol=1e-12)


class TestTrainEpoch:
    def test_loss_decreases_on_fixed_micro_batch(self, tiny_schema):
        rng = np.random.default_rng(1)
        dataset = random_sessions(rng, 4, tiny_schema)
        params = init_model_params(tiny_config(tiny_schema, seed=1))
        state = init_adam_state(params)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=4)
        batches = [make_batch(dataset.sessions, dataset.tracks, tiny_schema)]
        first = None
        last = None
        for _ in range(20):
            params, state, loss = train_epoch(params, state, batches, cfg)
            first = loss if first is None else first
            last = loss
        assert last < first

    def test_identical_epochs_reproduce_parameters(self, tiny_schema):
        rng = np.random.default_rng(2)
        dataset = random_sessions(rng, 6, tiny_schema)
        cfg = TrainConfig(batch_size=3)
        batches = make_batches(dataset.sessions, dataset.tracks, tiny_schema, 3, seed=5)

        def one_epoch():
            params = init_model_params(tiny_config(tiny_schema, seed=2))
            state = init_adam_state(params)
            train_epoch(params, state, batches, cfg)
            return params_snapshot(params)

        assert_params_equal(one_epoch(), one_epoch())

    def test_batch_order_permutation_still_completes(self, tiny_schema):
        rng = np.random.default_rng(3)
        dataset = random_sessions(rng, 6, tiny_schema)
        params = init_model_params(tiny_config(tiny_schema, seed=3))
        state = init_adam_state(params)
        cfg = TrainConfig(batch_size=3)
        batches = make_batches(dataset.sessions, dataset.tracks, tiny_schema, 3, seed=1)
        train_epoch(params, state, list(reversed(batches)), cfg)

    def test_empty_batches_rejected(self, tiny_schema):
        params = init_model_params(tiny_config(tiny_schema))
        with pytest.raises(ContractError):
            train_epoch(params, init_adam_state(params), [], TrainConfig())

    def test_multi_worker_gradients_match_single_worker(self, tiny_schema):
        rng = np.random.default_rng(4)
        dataset = random_sessions(rng, 6, tiny_schema)
        batch = make_batch(dataset.sessions, dataset.tracks, tiny_schema)

        def grads_with(workers):
            params = init_model_params(tiny_config(tiny_schema, seed=4))
            cfg = TrainConfig(batch_size=6, workers=workers)
            params.zero_grad()
            from skipnet.train import _accumulate_batch_grads
            loss = _accumulate_batch_grads(params, batch, cfg.workers)
            return loss, collect_grads(params)

        loss1, g1 = grads_with(1)
        loss3, g3 = grads_with(3)
        assert abs(loss1 - loss3) < 1e-12
        for k in g1:
            np.testing.assert_allclose(g3[k], g1[k], atol=1e-12)


class TestEarlyStop:
    def test_strictly_decreasing_continues(self):
        cfg = TrainConfig(patience=3)
        assert early_stop([1.0, 0.9, 0.8, 0.7], cfg) == ("continue", 4)

    def test_plateau_stops_with_best_epoch(self):
        cfg = TrainConfig(patience=3)
        decision, best = early_stop([1.0, 0.9, 0.9, 0.9, 0.9], cfg)
        assert decision == "stop" and best == 2

    def test_exact_min_delta_is_no_improvement(self):
        cfg = TrainConfig(patience=1, min_delta=1e-4)
        decision, _ = early_stop([1.0, 1.0 - 1e-4], cfg)
        assert decision == "stop"
        decision, _ = early_stop([1.0, 1.0 - 2.01e-4], cfg)
        assert decision == "continue"

    def test_empty_history_rejected(self):
        with pytest.raises(ContractError):
            early_stop([], TrainConfig())


class TestEvaluate:
    def _trained_setup(self, tiny_schema, n=8):
        rng = np.random.default_rng(5)
        dataset = random_sessions(rng, n, tiny_schema)
        params = init_model_params(tiny_config(tiny_schema, seed=5))
        return dataset, params

    def test_reports_match_manual_metric(self, tiny_schema):
        dataset, params = self._trained_setup(tiny_schema)
        model_rep, base_rep = evaluate(params, dataset.sessions, dataset.tracks,
                                       dataset.schema, batch_size=3)
        from skipnet.model import predictions_per_session
        pairs = []
        for batch in make_batches(dataset.sessions, dataset.tracks, dataset.schema, 3):
            output = forward(params, batch)
            preds = predictions_per_session(output, batch.second_lengths)
            for sid, pred in zip(batch.session_ids, preds):
                session = next(s for s in dataset.sessions if s.session_id == sid)
                pairs.append((session.labels, pred))
        manual = mean_average_accuracy(pairs)
        assert model_rep.maa == manual.maa
        manual_base = mean_average_accuracy(
            [(s.labels, baseline_predict(s)) for s in dataset.sessions])
        assert base_rep.maa == manual_base.maa

    def test_untrained_model_near_chance_on_balanced_data(self):
        cfg = GenConfig(persistence=0.0, feature_effect=0.0, user_propensity_std=0.0,
                        base_position_logits=(0.0,) * 20, n_sessions=600, seed=6)
        dataset = generate_dataset(cfg)
        params = init_model_params(config_for_schema(dataset.schema, seed=6))
        stats = fit_normalization(dataset.sessions, dataset.tracks, dataset.schema)
        sessions, tracks = apply_normalization(dataset.sessions, dataset.tracks,
                                               stats, dataset.schema)
        model_rep, _ = evaluate(params, sessions, tracks, dataset.schema)

        rng = np.random.default_rng(7)
        coin_maas = []
        for _ in range(200):
            pairs = [(s.labels, rng.random(len(s.labels)) < 0.5)
                     for s in dataset.sessions]
            coin_maas.append(mean_average_accuracy(pairs).maa)
        lo, hi = np.min(coin_maas), np.max(coin_maas)
        assert lo - 0.05 < model_rep.maa < hi + 0.05

    def test_deterministic(self, tiny_schema):
        dataset, params = self._trained_setup(tiny_schema)
        a, _ = evaluate(params, dataset.sessions, dataset.tracks, dataset.schema)
        b, _ = evaluate(params, dataset.sessions, dataset.tracks, dataset.schema)
        assert a.serialize() == b.serialize()

    def test_unlabeled_rejected(self, tiny_schema):
        dataset, params = self._trained_setup(tiny_schema)
        dataset.sessions[0].labels = None
        with pytest.raises(ContractError):
            evaluate(params, dataset.sessions, dataset.tracks, dataset.schema)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tiny_schema, tmp_path):
        params = init_model_params(tiny_config(tiny_schema, seed=8))
        state = init_adam_state(params)
        state.m["out_fc.bias"][0] = 0.125
        state.step = 7
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        extras = {"epoch": 3, "val_losses": [0.5, 0.4]}
        save_checkpoint(p1, params, "fp123", adam_state=state, extras=extras)
        ckpt = load_checkpoint(p1)
        assert ckpt.extras == extras
        assert ckpt.adam_state.step == 7
        save_checkpoint(p2, ckpt.params, "fp123", adam_state=ckpt.adam_state,
                        extras=ckpt.extras)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_bit_exact(self, tiny_schema, tmp_path):
        params = init_model_params(tiny_config(tiny_schema, seed=9))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, "fp")
        ckpt = load_checkpoint(path)
        assert_params_equal(params_snapshot(params), params_snapshot(ckpt.params))
        assert ckpt.adam_state is None

    def test_corrupt_payload_byte_fails_checksum(self, tiny_schema, tmp_path):
        params = init_model_params(tiny_config(tiny_schema, seed=10))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, "fp")
        blob = bytearray(path.read_bytes())
        blob[-5] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tiny_schema, tmp_path):
        params = init_model_params(tiny_config(tiny_schema, seed=11))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, "fp")
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_fingerprint_mismatch(self, tiny_schema, tmp_path):
        params = init_model_params(tiny_config(tiny_schema, seed=12))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, "fp-a")
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path, expected_fingerprint="fp-b")


class TestRunTraining:
    def _data(self, tiny_schema, n=10, seed=13):
        rng = np.random.default_rng(seed)
        dataset = random_sessions(rng, n, tiny_schema)
        train = dataset.sessions[:7]
        val = dataset.sessions[7:]
        return dataset, train, val

    def test_resume_equals_uninterrupted(self, tiny_schema):
        dataset, train, val = self._data(tiny_schema)
        cfg = TrainConfig(batch_size=4, max_epochs=6, patience=10, seed=13)

        params_a = init_model_params(tiny_config(tiny_schema, seed=13))
        adam_a = init_adam_state(params_a)
        full = run_training(params_a, adam_a, train, val, dataset.tracks,
                            dataset.schema, cfg)

        params_b = init_model_params(tiny_config(tiny_schema, seed=13))
        adam_b = init_adam_state(params_b)
        cfg_half = TrainConfig(batch_size=4, max_epochs=3, patience=10, seed=13)
        part = run_training(params_b, adam_b, train, val, dataset.tracks,
                            dataset.schema, cfg_half)
        resumed = run_training(part.params, part.adam, train, val, dataset.tracks,
                               dataset.schema, cfg, start_epoch=3,
                               val_losses=part.val_losses)

        assert_params_equal(params_snapshot(full.params),
                            params_snapshot(resumed.params))
        np.testing.assert_array_equal(full.val_losses, resumed.val_losses)
        assert full.best_epoch == resumed.best_epoch
        for k in full.adam.m:
            np.testing.assert_array_equal(full.adam.m[k], resumed.adam.m[k])
            np.testing.assert_array_equal(full.adam.v[k], resumed.adam.v[k])

    def test_best_params_beat_final_on_validation(self, tiny_schema):
        dataset, train, val = self._data(tiny_schema, n=12, seed=14)
        cfg = TrainConfig(batch_size=4, max_epochs=8, patience=8, seed=14,
                          learning_rate=5e-3)
        params = init_model_params(tiny_config(tiny_schema, seed=14))
        result = run_training(params, init_adam_state(params), train, val,
                              dataset.tracks, dataset.schema, cfg)
        val_batches = make_batches(val, dataset.tracks, dataset.schema, 4)
        best_loss = evaluate_loss(result.best_params, val_batches)
        final_loss = evaluate_loss(result.params, val_batches)
        assert best_loss <= final_loss + 1e-12
        assert result.best_epoch == int(np.argmin(result.val_losses)) + 1

    def test_early_stopping_triggers(self, tiny_schema):
        dataset, train, val = self._data(tiny_schema, n=10, seed=15)
        cfg = TrainConfig(batch_size=4, max_epochs=50, patience=2, min_delta=10.0,
                          seed=15)
        params = init_model_params(tiny_config(tiny_schema, seed=15))
        result = run_training(params, init_adam_state(params), train, val,
                              dataset.tracks, dataset.schema, cfg)
        # min_delta of 10 means nothing ever counts as improvement
        assert result.stopped_epoch == 3  # 1 baseline epoch + patience 2

    def test_epoch_seed_deterministic(self):
        assert epoch_seed(5, 3) == epoch_seed(5, 3)
        assert epoch_seed(5, 3) != epoch_seed(5, 4)

    def test_overfit_descent_smoke(self, tiny_schema):
        """Small-capacity smoke version of the overfitting capacity check."""
        rng = np.random.default_rng(16)
        dataset = random_sessions(rng, 8, tiny_schema)
        params = init_model_params(tiny_config(
            tiny_schema, seed=16, track_fc_dim=8, interaction_fc_dim=8,
            sessrep_hidden=6, enc_fc_dim=10, enc_hidden=8, dec_final_hidden=8))
        state = init_adam_state(params)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=8)
        batches = [make_batch(dataset.sessions, dataset.tracks, tiny_schema)]
        losses = []
        for _ in range(150):
            params, state, loss = train_epoch(params, state, batches, cfg)
            losses.append(loss)
        assert losses[-1] < 0.25 * losses[0]