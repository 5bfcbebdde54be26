import math

import numpy as np
import pytest
import torch

from camduo.model import (
    CamBackbone,
    align_to_medium,
    build_pyramid,
    classification_loss,
    msinf_aggregate,
    normalize_cams,
)

from conftest import central_difference, relative_error


def reference_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent half-pixel-center bilinear resampler (numpy)."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = (i + 0.5) * in_h / out_h - 0.5
            x = (j + 0.5) * in_w / out_w - 0.5
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            wy, wx = y - y0, x - x0
            ys = [min(max(y0, 0), in_h - 1), min(max(y0 + 1, 0), in_h - 1)]
            xs = [min(max(x0, 0), in_w - 1), min(max(x0 + 1, 0), in_w - 1)]
            out[i, j] = (
                src[ys[0], xs[0]] * (1 - wy) * (1 - wx)
                + src[ys[0], xs[1]] * (1 - wy) * wx
                + src[ys[1], xs[0]] * wy * (1 - wx)
                + src[ys[1], xs[1]] * wy * wx
            )
    return out


class TestForward:
    def test_zero_head_gives_flat_scores_and_zero_cams(self):
        net = CamBackbone(n_classes=3, embed_dim=16, width=8)
        with torch.no_grad():
            net.cam_head.weight.zero_()
            net.cam_head.bias.zero_()
        img = torch.rand(2, 3, 32, 32)
        _, raw, scores = net(img)
        assert torch.all(raw == 0)
        assert torch.allclose(scores, torch.full_like(scores, 0.5))
        labels = torch.ones(2, 3)
        assert torch.all(normalize_cams(raw, labels) == 0)

    def test_default_embed_dim_is_256(self):
        net = CamBackbone()
        x, _, _ = net(torch.rand(1, 3, 32, 32))
        assert x.shape[1] == 256

    def test_normalized_cam_max_is_one(self):
        net = CamBackbone(n_classes=4, embed_dim=32, width=8)
        img = torch.rand(1, 3, 32, 32)
        _, raw, _ = net(img)
        labels = torch.ones(1, 4)
        cams = normalize_cams(raw, labels)
        rect = torch.relu(raw)
        for k in range(4):
            if rect[0, k].max() > 0:
                assert cams[0, k].max().item() == pytest.approx(1.0, abs=1e-6)
            assert 0.0 <= cams[0, k].min() and cams[0, k].max() <= 1.0

    def test_absent_class_channels_zeroed(self):
        raw = torch.rand(1, 3, 4, 4)
        labels = torch.tensor([[1, 0, 1]])
        cams = normalize_cams(raw, labels)
        assert torch.all(cams[0, 1] == 0)

    def test_stride_mismatch_raises(self):
        net = CamBackbone(n_classes=2, embed_dim=8, width=8)
        with pytest.raises(ValueError, match="stride"):
            net(torch.rand(1, 3, 30, 30))

    def test_forward_deterministic(self):
        net = CamBackbone(n_classes=2, embed_dim=8, width=8)
        img = torch.rand(1, 3, 32, 32)
        out1 = net(img)
        out2 = net(img)
        for a, b in zip(out1, out2):
            assert torch.equal(a, b)

    def test_scores_invariant_to_spatial_permutation(self):
        # GAP is a spatial mean, so shuffling CAM pixels leaves scores alone.
        raw = torch.randn(1, 3, 4, 4)
        perm = torch.randperm(16)
        shuffled = raw.view(1, 3, 16)[:, :, perm].view(1, 3, 4, 4)
        s1 = torch.sigmoid(raw.mean(dim=(-2, -1)))
        s2 = torch.sigmoid(shuffled.mean(dim=(-2, -1)))
        assert torch.allclose(s1, s2, atol=1e-6)


class TestPyramid:
    def test_scale_sizes(self):
        pyr = build_pyramid(torch.rand(1, 3, 64, 64))
        assert pyr["s"].shape[-2:] == (32, 32)
        assert pyr["m"].shape[-2:] == (64, 64)
        assert pyr["l"].shape[-2:] == (128, 128)

    def test_constant_image_stays_constant(self):
        pyr = build_pyramid(torch.full((1, 3, 32, 32), 0.37))
        for t in pyr.values():
            assert torch.allclose(t, torch.full_like(t, 0.37), atol=1e-6)

    def test_downscale_preserves_linear_ramp(self):
        h = 16
        ramp = torch.arange(h, dtype=torch.float32)[None, None, :, None].expand(1, 1, h, h)
        ramp = ramp.repeat(1, 3, 1, 1).contiguous()
        small = build_pyramid(ramp)["s"][0, 0]
        # Output pixel i samples source position 2i + 0.5; ramp is linear so
        # interpolation is exact in the interior.
        expected = torch.tensor([2 * i + 0.5 for i in range(h // 2)])
        for i in range(h // 2):
            assert torch.allclose(small[i], torch.full((h // 2,), expected[i]), atol=1e-6)

    def test_odd_size_rejected(self):
        with pytest.raises(ValueError, match="even"):
            build_pyramid(torch.rand(1, 3, 33, 33))

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            build_pyramid(torch.rand(1, 3, 8, 8))


class TestAlign:
    def test_identical_content_aligns_identically(self):
        base = torch.rand(1, 2, 8, 8)
        stacks = {
            "s": torch.nn.functional.interpolate(base, size=(4, 4), mode="bilinear",
                                                 align_corners=False),
            "m": base,
            "l": torch.nn.functional.interpolate(base, size=(16, 16), mode="bilinear",
                                                 align_corners=False),
        }
        aligned = align_to_medium(stacks)
        assert torch.equal(aligned["m"], base)
        assert aligned["s"].shape == base.shape
        assert aligned["l"].shape == base.shape

    def test_constant_map_exact(self):
        stacks = {
            "s": torch.ones(1, 1, 4, 4),
            "m": torch.rand(1, 1, 8, 8),
            "l": torch.rand(1, 1, 16, 16),
        }
        assert torch.all(align_to_medium(stacks)["s"] == 1.0)

    def test_checkerboard_matches_reference_resampler(self, rng):
        board = np.indices((4, 4)).sum(axis=0) % 2
        src = torch.tensor(board, dtype=torch.float32)[None, None]
        stacks = {"s": src, "m": torch.rand(1, 1, 8, 8), "l": torch.rand(1, 1, 16, 16)}
        aligned = align_to_medium(stacks)["s"][0, 0].numpy()
        expected = reference_bilinear(board.astype(float), 8, 8)
        np.testing.assert_allclose(aligned, expected, atol=1e-6)

    def test_missing_scale_rejected(self):
        with pytest.raises(ValueError, match="scales"):
            align_to_medium({"s": torch.rand(1, 1, 4, 4), "m": torch.rand(1, 1, 8, 8)})


class TestMsinf:
    def test_identical_stacks_idempotent(self):
        cams = normalize_cams(torch.rand(2, 4, 4), torch.ones(2))
        out = msinf_aggregate([cams, cams.clone(), cams.clone()], torch.ones(2))
        assert torch.allclose(out, cams, atol=1e-6)

    def test_scaling_removed_by_renormalization(self):
        x = normalize_cams(torch.rand(2, 4, 4), torch.ones(2))
        zero = torch.zeros_like(x)
        out = msinf_aggregate([zero, zero, 3.0 * x], torch.ones(2))
        assert torch.allclose(out, x, atol=1e-4)

    def test_matches_mean_then_renormalize_oracle(self):
        stacks = [torch.rand(3, 5, 5) for _ in range(3)]
        labels = torch.tensor([1, 0, 1])
        out = msinf_aggregate(stacks, labels)
        mean = (stacks[0] + stacks[1] + stacks[2]) / 3.0
        for k in range(3):
            if labels[k] == 0:
                assert torch.all(out[k] == 0)
            else:
                expect = mean[k] / (mean[k].max() + 0)
                expect = mean[k].clamp_min(0) / mean[k].clamp_min(0).max().clamp_min(1e-5)
                assert torch.allclose(out[k], expect, atol=1e-7)

    def test_max_mode(self):
        stacks = [torch.rand(2, 3, 3) for _ in range(3)]
        out = msinf_aggregate(stacks, torch.ones(2), mode="max")
        agg = torch.stack(stacks).amax(dim=0)
        for k in range(2):
            assert torch.allclose(out[k], agg[k] / agg[k].max().clamp_min(1e-5), atol=1e-7)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="aggregation"):
            msinf_aggregate([torch.rand(1, 2, 2)] * 3, torch.ones(1), mode="median")


class TestClassificationLoss:
    def test_perfect_scores_near_zero(self):
        labels = torch.tensor([[1.0, 0.0, 1.0]])
        scores = labels.clone()
        assert classification_loss(scores, labels).item() <= 1e-6

    def test_half_scores_give_ln2(self):
        scores = torch.full((2, 4), 0.5)
        labels = torch.randint(0, 2, (2, 4)).float()
        assert classification_loss(scores, labels).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_scalar_oracle(self, rng):
        scores = torch.tensor(rng.uniform(0.01, 0.99, size=(3, 5)))
        labels = torch.tensor(rng.integers(0, 2, size=(3, 5))).double()
        expected = 0.0
        for i in range(3):
            for j in range(5):
                p, t = scores[i, j].item(), labels[i, j].item()
                expected += -(t * math.log(p) + (1 - t) * math.log(1 - p))
        expected /= 15
        assert classification_loss(scores, labels).item() == pytest.approx(expected, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        # Gradient of the BCE loss w.r.t. the CAM-head weights, in float64.
        torch.manual_seed(3)
        net = CamBackbone(n_classes=2, embed_dim=8, width=8).double()
        img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        labels = torch.tensor([[1.0, 0.0]], dtype=torch.float64)

        def loss_for(weight):
            with torch.no_grad():
                net.cam_head.weight.copy_(weight)
            _, _, scores = net(img)
            return classification_loss(scores, labels)

        w0 = net.cam_head.weight.detach().clone()
        _, _, scores = net(img)
        loss = classification_loss(scores, labels)
        analytic = torch.autograd.grad(loss, net.cam_head.weight)[0]
        numeric = central_difference(loss_for, w0, step=1e-4)
        with torch.no_grad():
            net.cam_head.weight.copy_(w0)
        assert relative_error(analytic, numeric) < 1e-4
