"""Optimizer arithmetic, clipping, and the training loop contracts."""

import numpy as np
import pytest

from bitseg.errors import ConfigError, DimensionError, TrainingError
from bitseg.metrics import seg_metrics
from bitseg.network import ModelConfig, build_model
from bitseg.nn import Tensor
from bitseg.scenes import SceneParams, generate_scene
from bitseg.trainer import (
    Dataset,
    TrainConfig,
    clip_latent,
    evaluate,
    optimizer_step,
    train,
)


def one_param(value, group="conv_float"):
    t = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    return [("w", t, group)], t


def scene_dataset(n, size=(16, 16), seed=0):
    p = SceneParams(size=size, seed=seed)
    pairs = [generate_scene(p, i) for i in range(n)]
    return Dataset(
        images=np.stack([img for img, _ in pairs]),
        masks=np.stack([m for _, m in pairs]),
    )


def small_model(seed=0, **kw):
    base = dict(input_size=(16, 16), channels=(4, 6, 8), seed=seed)
    base.update(kw)
    return build_model(ModelConfig(**base))


def snapshot(model):
    return [t.data.copy() for _, t, _ in model.parameters()]


class TestOptimizerStep:
    def test_sgd_single_step(self):
        params, t = one_param(1.0)
        t.grad = np.array([0.5], dtype=np.float32)
        optimizer_step(params, {}, TrainConfig(optimizer="sgd", lr=0.1, momentum=0.0))
        assert t.data[0] == pytest.approx(0.95, abs=1e-7)

    def test_sgd_momentum_two_steps(self):
        params, t = one_param(1.0)
        cfg = TrainConfig(optimizer="sgd", lr=0.1, momentum=0.9)
        state = {}
        for _ in range(2):
            t.grad = np.array([1.0], dtype=np.float32)
            optimizer_step(params, state, cfg)
        assert t.data[0] == pytest.approx(1.0 - 0.1 - 0.19, abs=1e-6)

    def test_adam_first_step_magnitude(self):
        params, t = one_param(0.3)
        t.grad = np.array([0.5], dtype=np.float32)
        cfg = TrainConfig(optimizer="adam", lr=1e-3)
        optimizer_step(params, {}, cfg)
        delta = abs(0.3 - float(t.data[0]))
        assert cfg.lr * 0.999 < delta <= cfg.lr * 1.000001

    def test_adam_bias_correction_uses_global_step(self):
        params, t = one_param(0.0)
        cfg = TrainConfig(optimizer="adam", lr=0.01)
        state = {}
        for _ in range(3):
            t.grad = np.array([1.0], dtype=np.float32)
            optimizer_step(params, state, cfg)
        assert state["t"] == 3
        # constant gradient keeps m_hat/sqrt(v_hat) ~ 1, so each step moves ~lr
        assert float(t.data[0]) == pytest.approx(-3 * cfg.lr, rel=1e-3)

    def test_weight_decay_only_on_float_conv(self):
        cfg = TrainConfig(optimizer="sgd", lr=1.0, momentum=0.0, weight_decay=0.5)
        state = {}
        tensors = {}
        triples = []
        for group in ("conv_float", "latent", "bn", "act"):
            t = Tensor(np.array([0.8], dtype=np.float32), requires_grad=True)
            t.grad = np.zeros(1, dtype=np.float32)
            triples.append((group, t, group))
            tensors[group] = t
        optimizer_step(triples, state, cfg)
        assert tensors["conv_float"].data[0] == pytest.approx(0.8 - 0.5 * 0.8)
        for g in ("latent", "bn", "act"):
            assert tensors[g].data[0] == pytest.approx(0.8)

    def test_latent_clipped_after_step(self):
        params, t = one_param(0.9, group="latent")
        t.grad = np.array([-50.0], dtype=np.float32)
        optimizer_step(params, {}, TrainConfig(optimizer="sgd", lr=1.0, momentum=0.0))
        assert t.data[0] == 1.0

    def test_missing_grad_skipped(self):
        params, t = one_param(0.7)
        optimizer_step(params, {}, TrainConfig(optimizer="sgd", lr=0.1))
        assert t.data[0] == pytest.approx(0.7)


class TestClip:
    def test_examples(self):
        assert clip_latent(np.float32(1.5)) == 1.0
        assert clip_latent(np.float32(-0.3)) == np.float32(-0.3)
        np.testing.assert_array_equal(
            clip_latent(np.array([-2.0, 0.5, 2.0], dtype=np.float32)),
            np.array([-1.0, 0.5, 1.0], dtype=np.float32),
        )


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.optimizer == "adam" and cfg.epochs == 30

    def test_validation(self):
        for bad in (
            dict(epochs=0),
            dict(batch_size=0),
            dict(optimizer="lbfgs"),
            dict(lr=-0.1),
            dict(momentum=1.0),
            dict(beta2=1.0),
            dict(eps=0.0),
            dict(weight_decay=-1.0),
            dict(latent_clip=0.0),
        ):
            with pytest.raises(ConfigError):
                TrainConfig(**bad)


class TestDataset:
    def test_validation(self):
        imgs = np.zeros((2, 3, 8, 8), dtype=np.float32)
        with pytest.raises(DimensionError):
            Dataset(imgs, np.zeros((2, 8, 9), dtype=np.uint8))
        with pytest.raises(DimensionError):
            Dataset(np.zeros((0, 3, 8, 8), dtype=np.float32), np.zeros((0, 8, 8), dtype=np.uint8))

    def test_split(self):
        ds = scene_dataset(10)
        tr, ev = ds.split(3)
        assert len(tr) == 7 and len(ev) == 3
        np.testing.assert_array_equal(ev.images, ds.images[7:])
        with pytest.raises(ValueError):
            ds.split(10)

    def test_from_dir(self, tmp_path):
        from bitseg.scenes import generate_dataset

        generate_dataset(SceneParams(size=(16, 16), seed=4), 5, tmp_path)
        ds = Dataset.from_dir(tmp_path)
        assert len(ds) == 5
        assert ds.images.shape == (5, 3, 16, 16)


class TestEvaluate:
    def test_matches_global_confusion(self):
        model = small_model()
        ds = scene_dataset(7)
        got = evaluate(model, ds, batch_size=3)
        pred = model.predict(ds.images)
        want = seg_metrics(pred, ds.masks)
        assert got == want

    def test_batch_size_irrelevant(self):
        model = small_model()
        ds = scene_dataset(6)
        assert evaluate(model, ds, batch_size=2) == evaluate(model, ds, batch_size=100)


class TestTrainLoop:
    def test_zero_lr_is_fixed_point(self):
        for opt in ("sgd", "adam"):
            model = small_model()
            before = snapshot(model)
            ds = scene_dataset(4)
            train(model, ds, TrainConfig(epochs=1, lr=0.0, optimizer=opt, batch_size=2))
            for a, b in zip(before, snapshot(model)):
                np.testing.assert_array_equal(a, b)

    def test_loss_decreases_on_smoke_run(self):
        model = small_model(seed=7)
        ds = scene_dataset(8, seed=2)
        history = train(model, ds, TrainConfig(epochs=30, seed=1))
        assert len(history) == 30
        assert history[-1].loss < history[0].loss

    def test_same_seed_reproduces_history(self):
        ds = scene_dataset(6, seed=3)
        cfg = TrainConfig(epochs=3, seed=5)
        h1 = train(small_model(seed=2), ds, cfg)
        h2 = train(small_model(seed=2), ds, cfg)
        assert h1 == h2

    def test_history_and_log_lines(self):
        model = small_model()
        ds = scene_dataset(4)
        lines = []
        history = train(
            model, ds, TrainConfig(epochs=2, seed=0), log=lines.append
        )
        assert [h.epoch for h in history] == [1, 2]
        assert lines == [h.log_line() for h in history]
        first = lines[0].split(",")
        assert first[0] == "1" and len(first) == 3
        float(first[1]), float(first[2])  # parseable

    def test_eval_split_used_for_iou(self):
        model = small_model()
        ds = scene_dataset(6)
        tr, ev = ds.split(2)
        history = train(model, tr, TrainConfig(epochs=1), eval_ds=ev)
        want = evaluate(model, ev).iou_road
        assert history[-1].road_iou == want

    def test_latent_invariant_after_training(self):
        model = small_model()
        ds = scene_dataset(4)
        train(model, ds, TrainConfig(epochs=2, lr=0.05, optimizer="sgd"))
        for _, tensor, group in model.parameters():
            if group == "latent":
                assert np.abs(tensor.data).max() <= 1.0

    def test_divergence_names_epoch(self):
        model = small_model()
        stem = model.unit("stem")
        stem.weight.data = np.full_like(stem.weight.data, np.inf)
        model.invalidate_filters()
        ds = scene_dataset(2)
        with pytest.raises(TrainingError) as err:
            train(model, ds, TrainConfig(epochs=1))
        assert err.value.epoch == 1
        assert "1" in str(err.value)
