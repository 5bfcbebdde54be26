import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from camduo.mam import MamConfig, cosine_distance, mam_loss, target_cams, variant_loss
from camduo.model import SCALE_NAMES

from conftest import central_difference, relative_error


def random_stacks(gen, n=2, h=4, w=4, rectified=True):
    cams = {s: torch.rand(n, h, w, generator=gen) for s in SCALE_NAMES}
    if not rectified:
        cams = {s: c - 0.5 for s, c in cams.items()}
    return cams


class TestCosineDistance:
    def test_identical_cams_give_one(self):
        g = torch.Generator().manual_seed(0)
        cams = random_stacks(g)
        same = {s: cams["m"].clone() for s in SCALE_NAMES}
        xi, degen = cosine_distance(same, {s: cams["m"].clone() for s in SCALE_NAMES},
                                    torch.ones(2))
        assert degen == 0
        assert torch.allclose(xi, torch.ones_like(xi), atol=1e-6)

    def test_disjoint_support_gives_two(self):
        a = torch.zeros(1, 2, 2)
        b = torch.zeros(1, 2, 2)
        a[0, 0, 0] = 1.0
        b[0, 1, 1] = 1.0
        xi, _ = cosine_distance({s: a for s in SCALE_NAMES}, {s: b for s in SCALE_NAMES},
                                torch.ones(1))
        assert torch.allclose(xi, torch.full_like(xi, 2.0), atol=1e-6)

    def test_matches_dot_norm_oracle(self, rng):
        main = {s: torch.tensor(rng.uniform(0, 1, (2, 3, 3)), dtype=torch.float64)
                for s in SCALE_NAMES}
        supp = {s: torch.tensor(rng.uniform(0, 1, (2, 3, 3)), dtype=torch.float64)
                for s in SCALE_NAMES}
        labels = torch.tensor([1, 1])
        xi, _ = cosine_distance(main, supp, labels)
        for k in range(2):
            for i, si in enumerate(SCALE_NAMES):
                for j, sj in enumerate(SCALE_NAMES):
                    a = main[si][k].reshape(-1).numpy()
                    b = supp[sj][k].reshape(-1).numpy()
                    expect = 2 - float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
                    assert xi[k, i, j].item() == pytest.approx(expect, abs=1e-9)

    def test_absent_class_rows_zero(self):
        g = torch.Generator().manual_seed(1)
        cams = random_stacks(g)
        xi, _ = cosine_distance(cams, cams, torch.tensor([1, 0]))
        assert torch.all(xi[1] == 0)

    def test_zero_norm_guard(self):
        zeros = {s: torch.zeros(1, 2, 2) for s in SCALE_NAMES}
        g = torch.Generator().manual_seed(2)
        cams = random_stacks(g, n=1)
        xi, degen = cosine_distance(cams, zeros, torch.ones(1))
        assert degen == 9
        assert torch.all(xi == 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_range_property_on_rectified_stacks(self, seed):
        g = torch.Generator().manual_seed(seed)
        main = {s: torch.rand(2, 3, 3, generator=g) + 1e-3 for s in SCALE_NAMES}
        supp = {s: torch.rand(2, 3, 3, generator=g) + 1e-3 for s in SCALE_NAMES}
        xi, _ = cosine_distance(main, supp, torch.ones(2))
        assert torch.all(xi >= 1.0 - 1e-9)
        assert torch.all(xi <= 2.0 + 1e-9)

    def test_scale_invariance(self):
        g = torch.Generator().manual_seed(3)
        main, supp = random_stacks(g), random_stacks(g)
        labels = torch.ones(2)
        xi1, _ = cosine_distance(main, supp, labels)
        xi2, _ = cosine_distance({s: 4.2 * c for s, c in main.items()},
                                 {s: 0.3 * c for s, c in supp.items()}, labels)
        assert torch.allclose(xi1, xi2, atol=1e-5)


class TestTargetCams:
    def test_uniform_xi_gives_scale_mean(self):
        g = torch.Generator().manual_seed(4)
        supp = random_stacks(g)
        xi = torch.ones(2, 3, 3)
        targets = target_cams(xi, supp)
        mean = (supp["s"] + supp["m"] + supp["l"]) / 3.0
        for s in SCALE_NAMES:
            assert torch.allclose(targets[s], mean, atol=1e-6)

    def test_zero_support_gives_zero_targets(self):
        zeros = {s: torch.zeros(1, 2, 2) for s in SCALE_NAMES}
        g = torch.Generator().manual_seed(5)
        main = random_stacks(g, n=1)
        xi, _ = cosine_distance(main, zeros, torch.ones(1))
        targets = target_cams(xi, zeros)
        for s in SCALE_NAMES:
            assert torch.all(targets[s] == 0)

    def test_matches_weighted_sum_oracle(self, rng):
        supp = {s: torch.tensor(rng.uniform(0, 1, (2, 2, 2))) for s in SCALE_NAMES}
        xi = torch.tensor(rng.uniform(1, 2, (2, 3, 3)))
        targets = target_cams(xi, supp)
        for i, si in enumerate(SCALE_NAMES):
            expect = sum(
                xi[:, i, j][:, None, None] * supp[sj] for j, sj in enumerate(SCALE_NAMES)
            ) / 3.0
            assert torch.allclose(targets[si], expect, atol=1e-9)

    def test_linear_in_support(self, rng):
        supp = {s: torch.tensor(rng.uniform(0, 1, (1, 2, 2))) for s in SCALE_NAMES}
        xi = torch.tensor(rng.uniform(1, 2, (1, 3, 3)))
        doubled = target_cams(xi, {s: 2.0 * c for s, c in supp.items()})
        single = target_cams(xi, supp)
        for s in SCALE_NAMES:
            assert torch.allclose(doubled[s], 2.0 * single[s], atol=1e-9)


class TestMamLoss:
    def test_zero_when_equal(self):
        g = torch.Generator().manual_seed(6)
        cams = random_stacks(g)
        targets = {s: cams[s].clone() for s in SCALE_NAMES}
        assert mam_loss(targets, cams, torch.ones(2)).item() == 0.0

    def test_constant_gap_gives_constant_loss(self):
        c = 0.42
        cams = {s: torch.full((1, 3, 3), c) for s in SCALE_NAMES}
        targets = {s: torch.zeros(1, 3, 3) for s in SCALE_NAMES}
        assert mam_loss(targets, cams, torch.ones(1)).item() == pytest.approx(c, abs=1e-7)

    def test_matches_elementwise_oracle(self, rng):
        cams = {s: torch.tensor(rng.uniform(0, 1, (2, 3, 3))) for s in SCALE_NAMES}
        targets = {s: torch.tensor(rng.uniform(0, 1, (2, 3, 3))) for s in SCALE_NAMES}
        labels = torch.tensor([1, 1])
        loss = mam_loss(targets, cams, labels)
        expect = sum(
            float((targets[s][k] - cams[s][k]).abs().sum())
            for s in SCALE_NAMES for k in range(2)
        ) / (9 * 2 * 3)
        assert loss.item() == pytest.approx(expect, abs=1e-9)

    def test_no_present_classes_is_zero(self):
        g = torch.Generator().manual_seed(7)
        cams = random_stacks(g)
        assert mam_loss(cams, cams, torch.zeros(2)).item() == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        # Keep every element gap above the L1 kink neighborhood.
        base = torch.tensor(rng.uniform(0, 1, (2, 3, 3)), dtype=torch.float64)
        targets = {s: base + 0.1 * (i + 1) for i, s in enumerate(SCALE_NAMES)}
        labels = torch.tensor([1, 1])

        def loss_for(flat):
            cams = {s: flat[i] for i, s in enumerate(SCALE_NAMES)}
            return mam_loss(targets, cams, labels)

        x0 = torch.stack([base.clone() for _ in SCALE_NAMES])
        x = x0.clone().requires_grad_(True)
        analytic = torch.autograd.grad(loss_for(x), x)[0]
        numeric = central_difference(loss_for, x0, step=1e-5)
        assert relative_error(analytic, numeric) < 1e-4


class TestVariants:
    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            MamConfig(mode="XYZ")

    def test_mmm_identical_cams_zero_loss(self):
        g = torch.Generator().manual_seed(8)
        base = torch.rand(2, 3, 3, generator=g)
        cams = {s: base.clone() for s in SCALE_NAMES}
        loss = variant_loss(cams, {s: base.clone() for s in SCALE_NAMES},
                            torch.ones(2), MamConfig(mode="MMM"))
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_mam_with_identical_networks_equals_mmm_when_xi_is_one(self):
        g = torch.Generator().manual_seed(9)
        base = torch.rand(2, 3, 3, generator=g)
        cams = {s: base.clone() for s in SCALE_NAMES}
        supp = {s: base.clone() for s in SCALE_NAMES}
        # With identical CAMs all cosine distances are 1, so MAM == MMM.
        mam = variant_loss(cams, supp, torch.ones(2), MamConfig(mode="MAM"))
        mmm = variant_loss(cams, supp, torch.ones(2), MamConfig(mode="MMM"))
        assert mam.item() == pytest.approx(mmm.item(), abs=1e-7)

    def test_smm_relation_to_mmm(self, rng):
        cams = {s: torch.tensor(rng.uniform(0, 1, (2, 3, 3))) for s in SCALE_NAMES}
        supp = {s: torch.tensor(rng.uniform(0, 1, (2, 3, 3))) for s in SCALE_NAMES}
        labels = torch.tensor([1, 1])
        smm = variant_loss(cams, supp, labels, MamConfig(mode="SMM"))
        # Oracle: with per-pair normalization, MMM's m-scale row contributes
        # exactly one third of the SMM loss value to the MMM mean.
        xi = torch.ones(2, 3, 3)
        targets = target_cams(xi, supp)
        m_row = sum(
            float((targets["m"][k] - cams["m"][k]).abs().sum()) for k in range(2)
        ) / (9 * 2 * 3)
        assert m_row == pytest.approx(smm.item() / 3.0, abs=1e-9)

    def test_monotone_in_scale_agreement(self):
        # Interpolating main CAMs toward a common map across scales should
        # shrink the attentive loss when teacher equals student.
        g = torch.Generator().manual_seed(10)
        common = torch.rand(1, 4, 4, generator=g)
        noise = {s: torch.rand(1, 4, 4, generator=g) for s in SCALE_NAMES}
        labels = torch.ones(1)
        losses = []
        for t in (0.0, 0.5, 1.0):
            cams = {s: (1 - t) * noise[s] + t * common for s in SCALE_NAMES}
            losses.append(variant_loss(cams, cams, labels, MamConfig(mode="MAM")).item())
        assert losses[0] > losses[1] > losses[2] - 1e-9
        assert losses[2] == pytest.approx(0.0, abs=1e-6)
