"""Optimizer, training loop, checkpointing, zero-shot evaluation."""
import json
import os

import numpy as np
import pytest

from eegalign.config import config_to_dict, default_config
from eegalign.data import generate_synthetic, make_batch, zero_shot_split
from eegalign.errors import ConfigError, ContractError, FormatError
from eegalign.model import AlignmentModel
from eegalign.tensor import Parameter, Tensor
from eegalign.trainer import (
    Adam,
    _batch_indices,
    clip_gradients,
    embed_split,
    evaluate_zero_shot,
    fit,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
    snapshot_values,
    train_step,
    validation_loss,
)
import eegalign.trainer as trainer_module


def tiny_config(epochs=1, seed=0, batch_size=8):
    cfg = default_config()
    cfg.encoder.dim = 16
    cfg.backbone.dim = 16
    cfg.backbone.layers = 1
    cfg.backbone.heads = 2
    cfg.backbone.patch = 8
    cfg.backbone.prompts = 2
    cfg.trainer.epochs = epochs
    cfg.trainer.seed = seed
    cfg.trainer.batch_size = batch_size
    return cfg


def tiny_model(epochs=1, seed=0, batch_size=8):
    cfg = tiny_config(epochs=epochs, seed=seed, batch_size=batch_size)
    return AlignmentModel(cfg, channels=4, timesteps=12, image_size=16)


def tiny_splits(seed=0, noise=0.2):
    data = generate_synthetic(seed=seed, n_classes=5, per_class=6, channels=4,
                              timesteps=12, height=16, noise=noise)
    return zero_shot_split(data, n_test_classes=1, n_val_samples=6, seed=seed)


def scalar_param(value, name="w"):
    return Parameter(name, Tensor(np.asarray(value, dtype=np.float64)))


class TestAdam:
    def test_no_gradient_means_no_change(self):
        p = scalar_param([1.0, 2.0])
        opt = Adam([p], lr=0.1)
        before = p.value.data.copy()
        opt.step()
        assert np.array_equal(p.value.data, before)

    def test_step_moves_against_gradient_sign(self):
        p = scalar_param(0.5)
        opt = Adam([p], lr=0.1)
        p.value.grad = np.asarray(3.0)
        opt.step()
        assert p.value.data < 0.5
        q = scalar_param(0.5)
        opt = Adam([q], lr=0.1)
        q.value.grad = np.asarray(-3.0)
        opt.step()
        assert q.value.data > 0.5

    def test_first_step_matches_bias_corrected_formula(self):
        p = scalar_param(1.0)
        opt = Adam([p], lr=0.01)
        g = 2.5
        p.value.grad = np.asarray(g)
        opt.step()
        expected = 1.0 - 0.01 * g / (np.sqrt(g * g) + 1e-8)
        assert p.value.data == pytest.approx(expected, abs=1e-15)

    def test_zero_learning_rate_is_inert(self):
        p = scalar_param([4.0, -1.0])
        opt = Adam([p], lr=0.0)
        p.value.grad = np.asarray([1.0, 2.0])
        opt.step()
        assert np.array_equal(p.value.data, np.asarray([4.0, -1.0]))

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ConfigError, match="learning rate"):
            Adam([scalar_param(0.0)], lr=-0.1)

    def test_frozen_parameter_rejected(self):
        frozen = Parameter("backbone.w", Tensor(np.zeros(2)), frozen=True)
        with pytest.raises(ContractError, match="frozen"):
            Adam([frozen], lr=0.1)

    def test_zero_grads_clears(self):
        p = scalar_param(1.0)
        p.value.grad = np.asarray(5.0)
        Adam([p], lr=0.1).zero_grads()
        assert p.value.grad is None


class TestClipGradients:
    def test_large_norm_scaled_down(self):
        p = scalar_param([3.0, 4.0])
        p.value.grad = np.asarray([3.0, 4.0])
        returned = clip_gradients([p], max_norm=1.0)
        assert returned == pytest.approx(5.0)
        assert np.linalg.norm(p.value.grad) == pytest.approx(1.0, abs=1e-12)

    def test_small_norm_untouched(self):
        p = scalar_param([0.3, 0.4])
        p.value.grad = np.asarray([0.3, 0.4])
        clip_gradients([p], max_norm=1.0)
        assert np.array_equal(p.value.grad, np.asarray([0.3, 0.4]))


class TestParameterDigest:
    def test_stable_for_identical_values(self):
        a = tiny_model(seed=1)
        b = tiny_model(seed=1)
        assert parameter_digest(a.parameters()) == parameter_digest(b.parameters())

    def test_changes_when_a_value_changes(self):
        model = tiny_model(seed=1)
        before = parameter_digest(model.parameters())
        model.prompts.value.data[0, 0] += 1e-9
        assert parameter_digest(model.parameters()) != before


class TestTrainStep:
    def test_zero_learning_rates_leave_parameters_unchanged(self):
        model = tiny_model()
        batch = make_batch(tiny_splits()["train"], np.arange(8))
        before = parameter_digest(model.parameters())
        opt_a = Adam(model.group("A"), lr=0.0)
        opt_b = Adam(model.group("B"), lr=0.0)
        parts = train_step(model, batch, opt_a, opt_b)
        assert np.isfinite(parts["l_total"])
        assert parameter_digest(model.parameters()) == before

    def test_frozen_digest_survives_a_real_step(self):
        model = tiny_model()
        batch = make_batch(tiny_splits()["train"], np.arange(8))
        frozen_before = parameter_digest(model.frozen_parameters())
        train_step(model, batch, Adam(model.group("A"), 0.002), Adam(model.group("B"), 0.02))
        assert parameter_digest(model.frozen_parameters()) == frozen_before

    def test_every_trainable_changes_within_twenty_steps(self):
        model = tiny_model()
        train = tiny_splits()["train"]
        before = snapshot_values(model)
        opt_a = Adam(model.group("A"), 0.002)
        opt_b = Adam(model.group("B"), 0.02)
        rng = np.random.default_rng(0)
        for _ in range(20):
            idx = rng.choice(len(train.ids), size=8, replace=False)
            train_step(model, make_batch(train, idx), opt_a, opt_b)
        for p in model.trainable_parameters():
            assert not np.array_equal(p.value.data, before[p.name]), p.name
        for p in model.frozen_parameters():
            assert np.array_equal(p.value.data, before[p.name]), p.name

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_component_name(self):
        model = tiny_model()
        model.perturb.gain.value.data[:] = np.inf
        batch = make_batch(tiny_splits()["train"], np.arange(8))
        with pytest.raises(ContractError, match="l_"):
            train_step(model, batch, Adam(model.group("A"), 0.002), Adam(model.group("B"), 0.02))

    def test_descent_on_noise_free_two_class_set(self):
        # 50 steps on a fixed noise-free batch must beat the initial loss
        data = generate_synthetic(seed=4, n_classes=2, per_class=8, channels=4,
                                  timesteps=12, height=16, noise=0.0)
        model = tiny_model(seed=4, batch_size=16)
        batch = make_batch(data, np.arange(16))
        opt_a = Adam(model.group("A"), 0.002)
        opt_b = Adam(model.group("B"), 0.02)
        first = train_step(model, batch, opt_a, opt_b)["l_total"]
        for _ in range(49):
            last = train_step(model, batch, opt_a, opt_b)["l_total"]
        assert last < first

    def test_clip_norm_flag_changes_the_update(self):
        splits = tiny_splits()
        batch = make_batch(splits["train"], np.arange(8))
        digests = []
        for clip in (None, 1e-3):
            model = tiny_model(seed=9)
            train_step(model, batch, Adam(model.group("A"), 0.002),
                       Adam(model.group("B"), 0.02), clip_norm=clip)
            digests.append(parameter_digest(model.parameters()))
        assert digests[0] != digests[1]


class TestBatchIndices:
    def test_tail_of_one_dropped(self):
        batches = _batch_indices(9, 4, rng=None)
        assert [len(b) for b in batches] == [4, 4]

    def test_exact_multiple_keeps_all(self):
        batches = _batch_indices(8, 4, rng=None)
        assert [len(b) for b in batches] == [4, 4]
        assert np.array_equal(np.concatenate(batches), np.arange(8))

    def test_small_tail_of_two_kept(self):
        batches = _batch_indices(10, 4, rng=None)
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_shuffle_covers_every_index(self):
        batches = _batch_indices(12, 5, rng=np.random.default_rng(0))
        seen = np.sort(np.concatenate(batches))
        assert np.array_equal(seen, np.arange(12))


class TestValidationLoss:
    def test_deterministic(self):
        model = tiny_model()
        val = tiny_splits()["val"]
        assert validation_loss(model, val, 8) == validation_loss(model, val, 8)

    def test_too_small_split_rejected(self):
        model = tiny_model()
        val = tiny_splits()["val"].take([0])
        with pytest.raises(ConfigError, match="fewer than 2"):
            validation_loss(model, val, 8)


class TestFit:
    def test_zero_epochs_returns_initial_state(self):
        splits = tiny_splits()
        model = tiny_model(epochs=0, seed=2)
        fresh_digest = parameter_digest(tiny_model(epochs=0, seed=2).parameters())
        ckpt, history = fit(model, splits["train"], splits["val"])
        assert ckpt.epoch == 0
        assert len(history) == 1
        restored = ckpt.build_model()
        assert parameter_digest(restored.parameters()) == fresh_digest

    def test_monotone_val_curve_selects_final_epoch(self, monkeypatch):
        splits = tiny_splits()
        losses = iter([4.0, 3.0, 2.0, 1.0])
        monkeypatch.setattr(trainer_module, "validation_loss",
                            lambda model, val, batch_size: next(losses))
        model = tiny_model(epochs=3)
        ckpt, history = fit(model, splits["train"], splits["val"])
        assert ckpt.epoch == 3
        assert ckpt.val_loss == 1.0
        assert [h["val_loss"] for h in history] == [4.0, 3.0, 2.0, 1.0]

    def test_same_seed_same_checkpoint_hash(self):
        splits = tiny_splits()
        digests = []
        for _ in range(2):
            model = tiny_model(epochs=2, seed=5)
            ckpt, _ = fit(model, splits["train"], splits["val"])
            digests.append(parameter_digest(ckpt.build_model().parameters()))
        assert digests[0] == digests[1]

    def test_history_rows_carry_loss_breakdown(self, tmp_path):
        splits = tiny_splits()
        log = tmp_path / "log.jsonl"
        model = tiny_model(epochs=2)
        _, history = fit(model, splits["train"], splits["val"], log_path=log)
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert rows == history
        assert set(rows[0]) == {"epoch", "val_loss"}
        for row in rows[1:]:
            assert set(row) == {"epoch", "l_clip", "l_soft", "l_rel", "l_total", "val_loss"}

    def test_best_checkpoint_beats_or_ties_every_epoch(self):
        splits = tiny_splits()
        model = tiny_model(epochs=3)
        ckpt, history = fit(model, splits["train"], splits["val"])
        assert ckpt.val_loss == min(h["val_loss"] for h in history)

    def test_checkpoint_records_training_classes(self):
        splits = tiny_splits()
        model = tiny_model(epochs=0)
        ckpt, _ = fit(model, splits["train"], splits["val"])
        seen = set(splits["train"].class_ids) | set(splits["val"].class_ids)
        assert ckpt.train_class_ids == sorted(int(c) for c in seen)


class TestCheckpointIO:
    def make_checkpoint(self):
        splits = tiny_splits()
        model = tiny_model(epochs=1, seed=3)
        ckpt, _ = fit(model, splits["train"], splits["val"])
        return ckpt, splits

    def test_round_trip_preserves_values(self, tmp_path):
        ckpt, _ = self.make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "run")
        again = load_checkpoint(tmp_path / "run")
        assert again.epoch == ckpt.epoch
        assert again.val_loss == ckpt.val_loss
        assert again.train_class_ids == ckpt.train_class_ids
        assert config_to_dict(again.config) == config_to_dict(ckpt.config)
        assert set(again.values) == set(ckpt.values)
        for name in ckpt.values:
            assert np.array_equal(again.values[name], ckpt.values[name]), name

    def test_reload_reproduces_validation_loss(self, tmp_path):
        ckpt, splits = self.make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "run")
        restored = load_checkpoint(tmp_path / "run").build_model()
        reloaded = validation_loss(restored, splits["val"], 8)
        assert abs(reloaded - ckpt.val_loss) < 1e-9

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError, match="manifest"):
            load_checkpoint(tmp_path / "nowhere")

    def test_bad_format_version(self, tmp_path):
        ckpt, _ = self.make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "run")
        path = tmp_path / "run" / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest["format_version"] = 99
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="format"):
            load_checkpoint(tmp_path / "run")

    def test_missing_params_file(self, tmp_path):
        ckpt, _ = self.make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "run")
        os.remove(tmp_path / "run" / "params.bin")
        with pytest.raises(FormatError, match="parameter file"):
            load_checkpoint(tmp_path / "run")

    def test_trailing_bytes_rejected(self, tmp_path):
        ckpt, _ = self.make_checkpoint()
        save_checkpoint(ckpt, tmp_path / "run")
        with open(tmp_path / "run" / "params.bin", "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(tmp_path / "run")

    def test_shape_mismatch_on_restore(self, tmp_path):
        ckpt, _ = self.make_checkpoint()
        ckpt.values["prompts"] = np.zeros((1, 1))
        with pytest.raises(FormatError, match="shape"):
            ckpt.build_model()


class TestEvaluateZeroShot:
    def test_class_overlap_rejected(self):
        splits = tiny_splits()
        model = tiny_model()
        train_classes = [int(c) for c in set(splits["train"].class_ids)]
        with pytest.raises(ContractError, match="overlap"):
            evaluate_zero_shot(model, splits["train"], ks=[1], train_class_ids=train_classes)

    def test_exhaustive_k_is_perfect(self):
        data = generate_synthetic(seed=7, n_classes=10, per_class=1, channels=4,
                                  timesteps=12, height=16, noise=0.1)
        model = tiny_model()
        report = evaluate_zero_shot(model, data, ks=[10])
        assert report.top_k[10] == 1.0
        assert report.extras["n_queries"] == 10

    def test_untrained_accuracy_near_chance(self):
        # mean over 12 fresh models on 10 queries should hover near 1/10
        data = generate_synthetic(seed=8, n_classes=10, per_class=1, channels=4,
                                  timesteps=12, height=16, noise=0.1)
        accs = []
        for seed in range(12):
            model = tiny_model(seed=seed)
            accs.append(evaluate_zero_shot(model, data, ks=[1]).top_k[1])
        assert 0.0 <= np.mean(accs) <= 0.3

    def test_embed_split_matches_forward(self):
        splits = tiny_splits()
        model = tiny_model()
        z_e, z_i = embed_split(model, splits["val"], batch_size=4)
        batch = make_batch(splits["val"], np.arange(len(splits["val"].ids)))
        ze_ref, zi_ref = model.forward(batch)
        assert np.allclose(z_e, ze_ref.data, atol=1e-12)
        assert np.allclose(z_i, zi_ref.data, atol=1e-12)
