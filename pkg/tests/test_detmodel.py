"""Neck fusion, decoupled heads, and whole-model contracts."""

import pytest
import torch

from transrad.backbone import BackboneConfig, FeaturePyramid
from transrad.detmodel import (
    Detector,
    Heads,
    ModelConfig,
    Neck,
    NeckConfig,
    anchor_centers,
    flatten_predictions,
)
from transrad.errors import ConfigError


def pyramid(batch=1, base=32, channels=(64, 128, 256), requires_grad=False):
    maps = [torch.randn(batch, c, base // (2 ** i), base // (2 ** i),
                        requires_grad=requires_grad)
            for i, c in enumerate(channels)]
    return FeaturePyramid(maps)


def tiny_model():
    torch.manual_seed(0)
    cfg = ModelConfig(
        backbone=BackboneConfig(stage_dims=[4, 8, 16, 32], stage_blocks=[1, 1, 1, 1],
                                stage_heads=[1, 1, 2, 4], input_channels=4),
        neck=NeckConfig(out_channels=[8, 16, 32]),
        num_classes=2, reg_max=8, head_width=8)
    return Detector(cfg)


class TestNeck:
    def test_shape_contract(self):
        torch.manual_seed(1)
        neck = Neck([64, 128, 256]).eval()
        with torch.no_grad():
            fused = neck(pyramid())
        assert [tuple(m.shape) for m in fused.maps] == [
            (1, 64, 32, 32), (1, 128, 16, 16), (1, 256, 8, 8)]

    def test_zero_lateral_weights_ignore_fine_features(self):
        torch.manual_seed(2)
        neck = Neck([64, 128, 256]).eval()
        with torch.no_grad():
            # silence the P3 columns of the finest C2f entry convolution
            neck.c2f_p3.cv1.conv.weight[:, :64].zero_()
        pyr_a = pyramid()
        pyr_b = FeaturePyramid([torch.randn_like(pyr_a.maps[0]),
                                pyr_a.maps[1], pyr_a.maps[2]])
        with torch.no_grad():
            n3_a = neck(pyr_a).maps[0]
            n3_b = neck(pyr_b).maps[0]
        assert torch.equal(n3_a, n3_b)

    def test_gradient_reaches_deepest_level(self):
        torch.manual_seed(3)
        neck = Neck([64, 128, 256]).eval()
        pyr = pyramid(requires_grad=True)
        neck(pyr).maps[0].sum().backward()
        assert pyr.maps[2].grad is not None
        assert pyr.maps[2].grad.abs().sum() > 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            NeckConfig(out_channels=[64, 128])
        with pytest.raises(ConfigError):
            NeckConfig(c2f_depth=0)

    def test_channel_mismatch_rejected(self):
        neck = Neck([64, 128, 256])
        with pytest.raises(ConfigError, match="channels"):
            neck(pyramid(channels=(32, 64, 128)))


class TestHeads:
    def test_output_shapes(self):
        torch.manual_seed(4)
        heads = Heads([64, 128, 256], num_classes=6, reg_max=16).eval()
        with torch.no_grad():
            preds = heads(pyramid(base=64))
        assert [tuple(t.shape) for t in preds.obj] == [
            (1, 1, 64, 64), (1, 1, 32, 32), (1, 1, 16, 16)]
        assert preds.cls[2].shape == (1, 6, 16, 16)
        assert preds.box[2].shape == (1, 64, 16, 16)
        assert preds.dopl[2].shape == (1, 2, 16, 16)

    def test_zero_final_weights_leave_bias(self):
        torch.manual_seed(5)
        heads = Heads([64, 128, 256], num_classes=2).eval()
        with torch.no_grad():
            for stack in heads.obj.stacks:
                stack[-1].weight.zero_()
        with torch.no_grad():
            preds = heads(pyramid())
        for level in preds.obj:
            assert torch.allclose(level, torch.full_like(level, -2.0))

    def test_heads_are_decoupled(self):
        torch.manual_seed(6)
        heads = Heads([64, 128, 256], num_classes=4).eval()
        pyr = pyramid()
        with torch.no_grad():
            before = heads(pyr)
            for stack in heads.cls.stacks:
                stack[0].conv.weight.add_(1.0)
            after = heads(pyr)
        for b, a in zip(before.box, after.box):
            assert torch.equal(b, a)
        for b, a in zip(before.cls, after.cls):
            assert not torch.equal(b, a)

    def test_checkpoint_naming(self):
        model = tiny_model()
        names = set(model.state_dict())
        assert "head.obj.p3.0.conv.weight" in names
        assert "head.dopl.p5.2.bias" in names
        assert "neck.c2f_p4.cv1.conv.weight" in names
        assert "backbone.stage3.block0.attn.out_proj.weight" in names


class TestDetector:
    def test_whole_model_forward(self):
        model = tiny_model().eval()
        with torch.no_grad():
            preds = model(torch.randn(2, 4, 64, 64))
        assert preds.grid_shapes == [(8, 8), (4, 4), (2, 2)]
        assert preds.num_classes == 2 and preds.reg_max == 8
        flat = flatten_predictions(preds)
        n = 64 + 16 + 4
        assert flat["obj"].shape == (2, n)
        assert flat["cls"].shape == (2, n, 2)
        assert flat["box"].shape == (2, n, 32)
        assert flat["dopl"].shape == (2, n, 2)

    def test_forward_is_deterministic(self):
        model = tiny_model().eval()
        x = torch.randn(1, 4, 64, 64)
        with torch.no_grad():
            a = flatten_predictions(model(x))
            b = flatten_predictions(model(x))
        for key in a:
            assert torch.equal(a[key], b[key])


class TestAnchors:
    def test_centers_and_strides(self):
        centers, strides = anchor_centers([(2, 2), (1, 1)], (8, 16))
        assert centers.shape == (5, 2)
        assert torch.allclose(centers[0], torch.tensor([4.0, 4.0]))
        assert torch.allclose(centers[1], torch.tensor([4.0, 12.0]))  # row-major
        assert torch.allclose(centers[2], torch.tensor([12.0, 4.0]))
        assert torch.allclose(centers[4], torch.tensor([8.0, 8.0]))
        assert strides.tolist() == [8.0, 8.0, 8.0, 8.0, 16.0]

    def test_flatten_order_is_level_major_row_major(self):
        torch.manual_seed(7)
        from transrad.detmodel import RawPredictions
        obj = [torch.arange(4.0).reshape(1, 1, 2, 2), torch.tensor([[[[9.0]]]])]
        preds = RawPredictions(obj=obj, cls=[torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 1, 1)],
                               box=[torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 1, 1)],
                               dopl=[torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 1, 1)],
                               strides=(8, 16), reg_max=1, num_classes=1)
        flat = flatten_predictions(preds)
        assert flat["obj"][0].tolist() == [0.0, 1.0, 2.0, 3.0, 9.0]
