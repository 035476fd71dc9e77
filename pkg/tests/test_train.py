import csv
import json

import numpy as np
import pytest
import torch
from scipy import stats

from sound_selector.errors import ConfigurationError, InvalidArgumentError, NonFiniteLossError
from sound_selector.nets import PitConfig, SelectorConfig, SoundSelector, load_checkpoint
from sound_selector.removal import removal_reference
from sound_selector.signal import mix_reference
from sound_selector.synth import load_dataset
from sound_selector.train import (
    TrainConfig,
    clip_gradients,
    collate,
    example_losses,
    fit,
    make_example,
    make_optimizer,
    sample_target_vector,
    train_step,
)


class TestSampleTargetVector:
    def test_single_class_support(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            o = sample_target_vector([2, 5, 9], (1.0,), rng, 10)
            assert o.sum() == 1 and np.flatnonzero(o)[0] in (2, 5, 9)

    def test_uniform_up_to_three(self):
        rng = np.random.default_rng(1)
        sizes = {int(sample_target_vector([0, 3, 4], (1, 1, 1), rng, 5).sum()) for _ in range(300)}
        assert sizes == {1, 2, 3}

    def test_chi_square_uniform_one_two(self):
        rng = np.random.default_rng(2)
        counts = np.bincount([int(sample_target_vector([0, 1, 2], (0.5, 0.5), rng, 3).sum())
                              for _ in range(10_000)], minlength=3)[1:]
        assert counts.sum() == 10_000
        assert stats.chisquare(counts).pvalue > 1e-3
        assert np.all(np.abs(counts - 5000) < 3 * np.sqrt(10_000 * 0.25))

    def test_truncated_to_active_count(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            o = sample_target_vector([4], (0.2, 0.4, 0.4), rng, 5)
            np.testing.assert_array_equal(o, [0, 0, 0, 0, 1])

    def test_no_active_classes(self):
        with pytest.raises(InvalidArgumentError):
            sample_target_vector([], (1.0,), np.random.default_rng(0), 3)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 5e-4
        assert cfg.grad_clip_norm == 5.0 and cfg.batch_size == 8 and cfg.max_epochs == 200
        assert cfg.target_count_distribution == (0.5, 0.5)

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"learning_rate": -1.0}, {"loss_kind": "l1"},
                                        {"target_count_distribution": ()}, {"dtype": "float16"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = TrainConfig(learning_rate=1e-3, target_count_distribution=(0.2, 0.8), crop_s=2.0)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"lr": 1})


@pytest.fixture(scope="module")
def items(toy_ten):
    return load_dataset(toy_ten)


class TestExamples:
    def test_reference_is_mix_of_selected_stems(self, items):
        cfg = TrainConfig()
        for k, item in enumerate(items):
            ex = make_example(item, "selector", cfg, np.random.default_rng(k), 5)
            assert set(np.flatnonzero(ex.o)) <= set(item.active_classes)
            np.testing.assert_array_equal(ex.reference, mix_reference(item.stems, ex.o))

    def test_removal_reference(self, items):
        ex = make_example(items[0], "removal-direct", TrainConfig(), np.random.default_rng(0), 5)
        np.testing.assert_array_equal(ex.reference, removal_reference(items[0].mixture, items[0].stems, ex.o))

    def test_crop_keeps_a_loud_class(self, items):
        cfg = TrainConfig(crop_s=1.0)
        for k, item in enumerate(items):
            ex = make_example(item, "selector", cfg, np.random.default_rng(k), 5)
            assert ex.mixture.shape == (8000,)
            np.testing.assert_array_equal(ex.reference, mix_reference(ex.stems, ex.o))

    def test_pit_references_padded_with_silence(self, items):
        ex = make_example(items[0], "pit", TrainConfig(), np.random.default_rng(0), 5, pit_outputs=4)
        assert ex.reference.shape == (4, items[0].mixture.shape[0])
        np.testing.assert_array_equal(ex.reference[:3], items[0].stems[sorted(items[0].active_classes)])
        assert not ex.reference[3].any()

    def test_pit_too_few_outputs(self, items):
        with pytest.raises(ConfigurationError):
            make_example(items[0], "pit", TrainConfig(), np.random.default_rng(0), 5, pit_outputs=2)

    def test_inactive_targets_use_log_mse(self, items):
        cfg = TrainConfig(inactive_target_prob=1.0)
        ex = make_example(items[0], "selector", cfg, np.random.default_rng(0), 5)
        assert not set(np.flatnonzero(ex.o)) & set(items[0].active_classes)
        assert not ex.reference.any()
        torch.manual_seed(0)
        model = SoundSelector(SelectorConfig.miniature(5)).double()
        loss = example_losses(model, collate([ex], torch.float64), "selector", cfg)
        assert torch.isfinite(loss).all()


def mini_batch(seed=0, n=2, t=400):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((n, t))
    return {"ids": [f"x{i}" for i in range(n)],
            "mixture": torch.tensor(ref + rng.standard_normal((n, t))),
            "reference": torch.tensor(ref),
            "o": torch.tensor(np.eye(4)[:n])}


def mini_model(seed=0):
    torch.manual_seed(seed)
    return SoundSelector(SelectorConfig.miniature(4)).double()


class TestTrainStep:
    def test_zero_learning_rate_is_null_update(self):
        model = mini_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        cfg = TrainConfig(learning_rate=0.0)
        train_step(model, make_optimizer(model, cfg), mini_batch(), "selector", cfg)
        for k, v in model.state_dict().items():
            assert v.numpy().tobytes() == before[k].numpy().tobytes(), k

    def test_returns_pre_update_loss(self):
        model = mini_model()
        cfg = TrainConfig(learning_rate=1e-2)
        batch = mini_batch()
        with torch.no_grad():
            expected = example_losses(model, batch, "selector", cfg).mean().item()
        assert train_step(model, make_optimizer(model, cfg), batch, "selector", cfg) == pytest.approx(expected)
        with torch.no_grad():
            assert example_losses(model, batch, "selector", cfg).mean().item() != expected

    def test_clipped_norm_equals_threshold(self):
        model = mini_model()
        (example_losses(model, mini_batch(), "selector", TrainConfig()).sum() * 1e3).backward()
        pre = clip_gradients(list(model.parameters()), 0.5)
        assert pre > 0.5
        post = torch.sqrt(sum((p.grad ** 2).sum() for p in model.parameters())).item()
        assert post == pytest.approx(0.5, abs=1e-6)

    def test_small_gradients_untouched(self):
        model = mini_model()
        example_losses(model, mini_batch(), "selector", TrainConfig()).sum().backward()
        grads = [p.grad.clone() for p in model.parameters()]
        pre = clip_gradients(list(model.parameters()), 1e9)
        assert all(torch.equal(g, p.grad) for g, p in zip(grads, model.parameters()))
        assert pre > 0

    def test_clipping_direction_invariant_to_loss_scale(self):
        directions = []
        for scale in (10.0, 1000.0):
            model = mini_model()
            (example_losses(model, mini_batch(), "selector", TrainConfig()).sum() * scale).backward()
            clip_gradients(list(model.parameters()), 0.1)
            directions.append(torch.cat([p.grad.reshape(-1) for p in model.parameters()]))
        torch.testing.assert_close(directions[0], directions[1], rtol=1e-9, atol=1e-12)

    def test_non_finite_loss_aborts_without_update(self):
        model = mini_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        batch = mini_batch(n=3)
        batch["mixture"][1, 5] = float("nan")
        cfg = TrainConfig(learning_rate=1e-2)
        with pytest.raises(NonFiniteLossError) as info:
            train_step(model, make_optimizer(model, cfg), batch, "selector", cfg)
        assert info.value.example_ids == ["x1"]
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_pit_step(self):
        torch.manual_seed(0)
        model = PitConfig.miniature(2)
        from sound_selector.nets import PitSeparator

        net = PitSeparator(model).double()
        rng = np.random.default_rng(0)
        refs = rng.standard_normal((2, 2, 300))
        batch = {"ids": ["a", "b"], "mixture": torch.tensor(refs.sum(1)), "reference": torch.tensor(refs)}
        cfg = TrainConfig(learning_rate=1e-3)
        assert np.isfinite(train_step(net, make_optimizer(net, cfg), batch, "pit", cfg))


def read_log(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestFit:
    def test_accounting(self, toy_ten, tmp_path):
        cfg = TrainConfig(max_epochs=1, steps_per_epoch=2, batch_size=2, crop_s=0.5)
        res = fit(toy_ten, "selector", cfg, SelectorConfig.miniature(5), tmp_path)
        rows = read_log(res.log_path)
        assert len(rows) == 2 and len(res.losses) == 2
        assert list(rows[0]) == ["step", "epoch", "loss_db", "dev_sdri_db", "wall_time_s"]
        assert sorted(p.name for p in tmp_path.glob("epoch*.npz")) == ["epoch000.npz"]
        ckpt = load_checkpoint(res.checkpoint)
        assert ckpt.extra["global_step"] == 2 and ckpt.extra["epoch"] == 0

    def test_dev_column_and_best(self, toy_ten, tmp_path):
        cfg = TrainConfig(max_epochs=2, steps_per_epoch=1, batch_size=2, crop_s=0.5, dev_items=2)
        res = fit(toy_ten, "selector", cfg, SelectorConfig.miniature(5), tmp_path, dev_manifest=toy_ten)
        rows = read_log(res.log_path)
        assert all(r["dev_sdri_db"] for r in rows)
        assert res.best_checkpoint is not None and res.best_checkpoint.exists()

    def test_resume_matches_uninterrupted_run(self, toy_ten, tmp_path):
        model_cfg = SelectorConfig.miniature(5)
        full_cfg = TrainConfig(max_epochs=3, steps_per_epoch=2, batch_size=2, crop_s=0.5, dtype="float64",
                               learning_rate=1e-3)
        full = fit(toy_ten, "selector", full_cfg, model_cfg, tmp_path / "full")
        part_cfg = TrainConfig(**{**full_cfg.to_dict(), "max_epochs": 1})
        fit(toy_ten, "selector", part_cfg, model_cfg, tmp_path / "part")
        resumed = fit(toy_ten, "selector", full_cfg, model_cfg, tmp_path / "part", resume=True)
        assert resumed.losses == full.losses[2:]
        assert [r["loss_db"] for r in read_log(resumed.log_path)] == [r["loss_db"] for r in read_log(full.log_path)]
        a = load_checkpoint(full.checkpoint).model.state_dict()
        b = load_checkpoint(resumed.checkpoint).model.state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_class_count_mismatch(self, toy_ten, tmp_path):
        with pytest.raises(ConfigurationError):
            fit(toy_ten, "selector", TrainConfig(max_epochs=1, steps_per_epoch=1), SelectorConfig.miniature(4),
                tmp_path)

    def test_pit_fit_stores_outputs(self, toy_ten, tmp_path):
        cfg = TrainConfig(max_epochs=1, steps_per_epoch=1, batch_size=2, crop_s=0.5)
        res = fit(toy_ten, "pit", cfg, PitConfig.miniature(3), tmp_path)
        assert load_checkpoint(res.checkpoint, expected_kind="pit").model.config.output_channels == 3

    def test_overfit_loss_trend(self, overfit_run):
        losses = np.array(overfit_run.losses)
        assert losses[-20:].mean() < losses[:20].mean() - 10.0
