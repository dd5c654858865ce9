import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import cosine, smoothed_ce
from pointstack.backbone import BackboneConfig, StageConfig
from pointstack.data import SyntheticSpec, generate_synthetic_dataset
from pointstack.geometry import PointCloud, pairwise_distances
from pointstack.heads import HeadConfig
from pointstack.model import ModelConfig, build_model
from pointstack.tensor import Parameter, Tape, Tensor, mul, sum_
from pointstack.training import (
    SGD,
    StaleGradientWarning,
    TrainConfig,
    TrainState,
    augment_rotate,
    augment_translate,
    cosine_lr,
    grad_check,
    make_batches,
    predict,
    sgd_step,
    smoothed_cross_entropy,
    train_epoch,
)


def tiny_model(seed=0, task="classification", classes=2):
    bb = BackboneConfig(embed_dim=8, stages=[StageConfig(16, 8, 4), StageConfig(8, 16, 4)], pre_blocks=0,
                        post_blocks=1, single_queries=4, d_model=8, d_global=16, heads=2)
    head = HeadConfig(num_classes=classes, hidden=[8], dropout=0.0) if task == "classification" else \
        HeadConfig(hidden=[8], dropout=0.0, num_parts=2 * classes, num_objects=classes)
    return build_model(ModelConfig(task, bb, head, "float32"), seed)


def tiny_dataset(task="classification", per_class=4, seed=0):
    spec = SyntheticSpec(classes=["sphere", "box"], task=task, samples_per_class=per_class, n_points=32)
    return generate_synthetic_dataset(spec, np.random.default_rng(seed))


class TestSmoothedCrossEntropy:
    def test_uniform_logits(self):
        loss = smoothed_cross_entropy(Tensor([[0.0, 0.0]], dtype=np.float64), [0], 0.0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_smoothing_with_equal_logits(self):
        loss = smoothed_cross_entropy(Tensor([[0.0, 0.0]], dtype=np.float64), [0], 0.1)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_logits_softplus(self):
        loss = smoothed_cross_entropy(Tensor([[10.0, -10.0]], dtype=np.float64), [0], 0.0)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert loss.item() == pytest.approx(2.061e-9, rel=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-20, 20)), st.floats(0, 0.9))
    def test_matches_oracle_and_entropy_bound(self, z, eps):
        t = np.array([0, 4, 2, 1])
        loss = smoothed_cross_entropy(Tensor(z), t, eps).item()
        assert loss == pytest.approx(smoothed_ce(z, t, eps), rel=1e-9, abs=1e-12)
        q = np.full(5, eps / 5)
        q[0] += 1 - eps
        entropy = -(q[q > 0] * np.log(q[q > 0])).sum()
        assert loss >= entropy - 1e-9

    def test_target_range(self):
        with pytest.raises(ValueError):
            smoothed_cross_entropy(Tensor(np.zeros((1, 3))), [3], 0.1)
        with pytest.raises(ValueError):
            smoothed_cross_entropy(Tensor(np.zeros((1, 3))), [0], 1.0)

    def test_gradient(self):
        z = Tensor(np.random.default_rng(0).normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
        res = grad_check(lambda: smoothed_cross_entropy(z, [0, 1, 2, 3, 0], 0.1), [z])
        assert res.passed(1e-6)


class TestCosineSchedule:
    cfg = TrainConfig(epochs=200)

    def test_endpoints_exact(self):
        assert cosine_lr(0, self.cfg) == 0.01
        assert cosine_lr(200, self.cfg) == 0.0001

    def test_midpoint(self):
        assert cosine_lr(100, self.cfg) == pytest.approx(0.00505, abs=1e-15)

    def test_matches_formula_and_monotone(self):
        lrs = [cosine_lr(t, self.cfg) for t in range(201)]
        for t, lr in enumerate(lrs):
            assert lr == pytest.approx(cosine(t, 200, 0.01, 0.0001), rel=1e-12)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_clamps_past_end(self):
        assert cosine_lr(250, self.cfg) == 0.0001

    def test_config_invariants(self):
        for bad in (dict(label_smoothing=1.0), dict(lr_min=0.1), dict(epochs=0)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestSGD:
    def _param(self, value=1.0, grad=0.5):
        p = Parameter(np.array([value]), dtype=np.float64)
        p.grad[:] = grad
        return p

    def test_plain_step(self):
        p = self._param()
        sgd_step([p], 0.1, 0.0, 0.0, [np.zeros(1)])
        assert p.data[0] == 1.0 - 0.1 * 0.5

    def test_zero_grad_no_decay_no_change(self):
        p = self._param(grad=0.0)
        sgd_step([p], 0.1, 0.9, 0.0, [np.zeros(1)])
        assert p.data[0] == 1.0

    def test_momentum_recurrence(self):
        p = self._param(value=0.0, grad=1.0)
        v = [np.zeros(1)]
        sgd_step([p], 0.1, 0.9, 0.0, v)
        sgd_step([p], 0.1, 0.9, 0.0, v)
        assert p.data[0] == pytest.approx(-0.1 * 1.0 * (1 + 1.9), abs=1e-15)

    def test_weight_decay_in_velocity(self):
        p = self._param(value=2.0, grad=0.0)
        sgd_step([p], 0.1, 0.0, 0.5, [np.zeros(1)])
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_stale_gradient_warning(self):
        p = Parameter(np.ones(2), dtype=np.float64)
        opt = SGD([p])
        with Tape() as tape:
            loss = sum_(mul(p, p))
        tape.backward(loss)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            opt.step(0.1)
        with pytest.warns(StaleGradientWarning):
            opt.step(0.1)


class TestAugmentation:
    cloud = PointCloud(np.random.default_rng(0).normal(size=(30, 3)), np.arange(30) % 2, 1)

    def test_zero_range_identity(self):
        out = augment_translate(self.cloud, np.random.default_rng(0), 0.0)
        np.testing.assert_array_equal(out.points, self.cloud.points)

    def test_translation_preserves_centered_coordinates(self):
        out = augment_translate(self.cloud, np.random.default_rng(1), 0.2)
        shift = out.points - self.cloud.points
        assert np.all(np.abs(shift) <= 0.2)
        np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-15)
        np.testing.assert_allclose(out.points - out.points.mean(0), self.cloud.points - self.cloud.points.mean(0),
                                   atol=1e-12)

    def test_rotation_is_z_isometry(self):
        out = augment_rotate(self.cloud, np.random.default_rng(2))
        np.testing.assert_allclose(pairwise_distances(out.points), pairwise_distances(self.cloud.points), atol=1e-6)
        np.testing.assert_array_equal(out.points[:, 2], self.cloud.points[:, 2])
        np.testing.assert_array_equal(out.point_labels, self.cloud.point_labels)
        assert out.class_label == 1 and len(out) == 30


class TestEpochLoop:
    def test_batches_cover_dataset_and_pad_singletons(self):
        rng = np.random.default_rng(0)
        batches = make_batches(17, 8, rng)
        assert [len(b) for b in batches] == [8, 8, 2]
        assert set(np.concatenate(batches[:2]).tolist() + [batches[2][0]]) == set(range(17))

    def test_single_sample_loss_decreases(self):
        ds = tiny_dataset(per_class=1).subset([0])
        model = tiny_model()
        cfg = TrainConfig(epochs=5, batch_size=4, translate=False, lr_max=0.05)
        ds_labels = ds.labels()

        def loss():
            logits = predict(model, ds.samples)
            return float(smoothed_cross_entropy(Tensor(logits), ds_labels, 0.1).item())

        before = loss()
        train_epoch(model, ds, cfg, TrainState())
        assert loss() < before

    def test_fixed_seed_same_trajectory(self):
        ds = tiny_dataset()
        cfg = TrainConfig(epochs=3, batch_size=4, seed=7)
        runs = []
        for _ in range(2):
            model, state = tiny_model(), TrainState()
            runs.append([train_epoch(model, ds, cfg, state)[1]["loss"] for _ in range(3)])
        assert runs[0] == runs[1]

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_epoch(tiny_model(), tiny_dataset().subset([]), TrainConfig(), TrainState())

    def test_resume_continues_schedule(self):
        ds = tiny_dataset()
        cfg = TrainConfig(epochs=4, batch_size=4)
        state = TrainState()
        model = tiny_model()
        train_epoch(model, ds, cfg, state)
        _, m = train_epoch(model, ds, cfg, state)
        assert m["lr"] == cosine_lr(1, cfg) and state.epoch == 2

    def test_segmentation_epoch(self):
        ds = tiny_dataset(task="segmentation")
        _, m = train_epoch(tiny_model(task="segmentation"), ds, TrainConfig(epochs=2, batch_size=4), TrainState())
        assert 0 <= m["train_acc"] <= 1 and np.isfinite(m["loss"])

    def test_thousand_steps_stay_finite(self):
        ds = tiny_dataset(per_class=1)
        model = tiny_model()
        cfg = TrainConfig(epochs=1000, batch_size=2, lr_max=0.05)
        state = TrainState()
        for _ in range(1000):
            train_epoch(model, ds, cfg, state)
        assert state.step == 1000
        for p in model.parameters():
            assert np.all(np.isfinite(p.data))


class TestGradCheckHarness:
    def test_linear_layer_tight(self):
        from pointstack.tensor import linear
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        w = Parameter(rng.normal(size=(4, 2)), dtype=np.float64)
        b = Parameter(rng.normal(size=(1, 2)), dtype=np.float64)
        g = rng.normal(size=(3, 2))
        assert grad_check(lambda: sum_(mul(linear(x, w, b), g)), [x, w, b]).max_rel_error <= 1e-6

    def test_max_tie_flagged_as_kink(self):
        from pointstack.pooling import max_pool
        f = Tensor(np.array([[1.0, 2.0], [1.0, 0.0]]), requires_grad=True, dtype=np.float64)
        res = grad_check(lambda: sum_(max_pool(f)), [f])
        assert res.excluded_kinks == 2  # both tied entries of column 0
        assert res.passed(1e-10)

    def test_requires_float64_and_scalar(self):
        x32 = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            grad_check(lambda: sum_(x32), [x32])
        x = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
        with pytest.raises(ValueError):
            grad_check(lambda: mul(x, 2.0), [x])
