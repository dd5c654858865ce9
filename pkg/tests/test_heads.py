import numpy as np
import pytest

from pointstack.backbone import BackboneConfig, StageConfig
from pointstack.heads import ClassificationHead, HeadConfig, interpolation_weights, propagate, segmentation_head_config
from pointstack.metrics import instance_miou, masked_part_prediction
from pointstack.model import ModelConfig, build_model
from pointstack.tensor import ShapeError, Tensor, precision


def small_backbone(**kw):
    return BackboneConfig(embed_dim=8, stages=[StageConfig(64, 8, 6), StageConfig(16, 16, 6)], pre_blocks=0,
                          post_blocks=1, single_queries=4, d_model=8, d_global=16, heads=2, **kw)


class TestHeadConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            HeadConfig(num_classes=1)
        with pytest.raises(ValueError):
            HeadConfig(hidden=[])

    def test_segmentation_defaults(self):
        cfg = segmentation_head_config()
        assert cfg.hidden == [1024, 512, 256] and cfg.dropout == 0.4
        assert cfg.num_parts == 50 and cfg.num_objects == 16


class TestClassify:
    def test_logit_shape(self):
        with precision(np.float64):
            head = ClassificationHead(4096, HeadConfig(), np.random.default_rng(0))
        head.eval()
        assert head(Tensor(np.random.default_rng(0).normal(size=(3, 4096)))).shape == (3, 15)

    def test_zero_final_layer_gives_uniform(self):
        with precision(np.float64):
            head = ClassificationHead(8, HeadConfig(num_classes=4, hidden=[6]), np.random.default_rng(0))
        head.eval()
        head.out.weight.data[:] = 0
        head.out.bias.data[:] = 0
        np.testing.assert_array_equal(head(Tensor(np.ones((2, 8)))).data, 0.0)

    def test_width_mismatch(self):
        head = ClassificationHead(8, HeadConfig(num_classes=4, hidden=[6]), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            head(Tensor(np.ones((2, 9), dtype=np.float32)))

    def test_permuted_points_same_logits(self):
        cfg = ModelConfig("classification", small_backbone(), HeadConfig(num_classes=3, hidden=[8]), "float32")
        model = build_model(cfg, 0)
        model.eval()
        rng = np.random.default_rng(1)
        xyz = rng.normal(size=(2, 80, 3)).astype(np.float32)
        perm = rng.permutation(80)
        np.testing.assert_allclose(model(xyz).data, model(xyz[:, perm]).data, atol=1e-5)

    @pytest.mark.parametrize("b", [1, 2, 5])
    def test_any_batch_size_in_eval(self, b):
        cfg = ModelConfig("classification", small_backbone(), HeadConfig(num_classes=3, hidden=[8]), "float32")
        model = build_model(cfg, 0)
        model.eval()
        assert model(np.random.default_rng(b).normal(size=(b, 64, 3))).shape == (b, 3)


class TestInterpolation:
    def test_coincident_point_takes_anchor_feature(self):
        anchors = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
        feats = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]]))
        out = propagate(feats, anchors, anchors[:, 1:2])
        np.testing.assert_array_equal(out.data, [[[3.0, 4.0]]])

    def test_midpoint_averages(self):
        anchors = np.array([[[-1.0, 0, 0], [1, 0, 0], [1000, 0, 0]]])
        feats = Tensor(np.array([[[2.0], [4.0], [100.0]]]))
        out = propagate(feats, anchors, np.zeros((1, 1, 3)))
        # inverse-distance oracle: weights 1, 1, 1/1000 (up to eps)
        w = np.array([1.0, 1.0, 1 / 1000])
        expected = (w @ np.array([2.0, 4.0, 100.0])) / w.sum()
        np.testing.assert_allclose(out.data.ravel(), [expected], rtol=1e-7)
        assert abs(out.data.item() - 3.0) < 0.06

    def test_weights_normalized(self):
        rng = np.random.default_rng(0)
        idx, w = interpolation_weights(rng.normal(size=(2, 10, 3)), rng.normal(size=(2, 30, 3)))
        assert idx.shape == w.shape == (2, 30, 3)
        np.testing.assert_allclose(w.sum(-1), 1.0)


class TestSegment:
    def test_full_part_count_shape(self):
        cfg = ModelConfig("segmentation", small_backbone(), segmentation_head_config(hidden=[16, 8]), "float32")
        model = build_model(cfg, 0)
        model.eval()
        xyz = np.random.default_rng(0).normal(size=(1, 2048, 3))
        logits = model(xyz, np.eye(16)[[3]])
        assert logits.shape == (1, 2048, 50)

    def test_one_hot_length_checked(self):
        cfg = ModelConfig("segmentation", small_backbone(), segmentation_head_config(hidden=[8]), "float32")
        model = build_model(cfg, 0)
        model.eval()
        with pytest.raises(ShapeError):
            model(np.random.default_rng(0).normal(size=(1, 64, 3)), np.eye(15)[[3]])

    def test_perturbation_effect_is_local(self):
        """Moving one point changes logits near it far more than logits of a distant cluster.

        The affine normalization divides by one spread per sample, so every
        point is weakly coupled to every other; the far cluster is therefore
        compared by magnitude rather than required to be bit-identical.
        """
        cfg = ModelConfig("segmentation", small_backbone(), HeadConfig(hidden=[8], num_parts=4, num_objects=2),
                          "float64")
        model = build_model(cfg, 0)
        model.eval()
        rng = np.random.default_rng(3)
        xyz = rng.uniform(-1, 1, size=(1, 64, 3))
        xyz[0, :32, 0] -= 10  # two well separated clusters
        xyz[0, 32:, 0] += 10
        oh = np.eye(2)[[0]]
        moved = xyz.copy()
        moved[0, 0] += 1e-3
        a, b = model.backbone(xyz).per_level[0], model.backbone(moved).per_level[0]
        far = a.anchors[0, :, 0] > 0
        df = np.abs(a.features.data - b.features.data)[0].max(axis=-1)
        assert df[far].max() * 20 < df[~far].max()
        delta = np.abs(model(xyz, oh).data - model(moved, oh).data)[0].max(axis=-1)
        assert delta[32:].max() * 3 < delta[:32].max()


class TestMaskedEvaluation:
    def test_masking_never_hurts(self):
        rng = np.random.default_rng(0)
        parts_of_class = {0: [0, 1], 1: [2, 3]}
        for _ in range(50):
            objs = rng.integers(0, 2, 6)
            targets = [rng.choice(parts_of_class[o], 20) for o in objs]
            logits = [rng.normal(size=(20, 4)) for _ in objs]
            unmasked = [np.argmax(lg, -1) for lg in logits]
            masked = [masked_part_prediction(lg, parts_of_class[o]) for lg, o in zip(logits, objs)]
            assert instance_miou(masked, targets, objs, parts_of_class) >= instance_miou(unmasked, targets, objs,
                                                                                          parts_of_class)
