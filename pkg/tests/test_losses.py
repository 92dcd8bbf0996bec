import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dualocc.geometry import ContractError
from dualocc.losses import (assign_labels, batched_point_losses, chamfer, compute_losses, focal_class_loss,
                            location_loss, lovasz_softmax_flat, total_loss, volume_loss)
from dualocc.point_branch import PointPredictions

from .gradcheck import relative_fd_error


def jaccard_loss_of_set(errset, fg):
    """Jaccard loss of a mispredicted voxel set for one class, by counting."""
    if not errset:
        return 0.0
    gt = set(np.flatnonzero(fg))
    return len(errset) / len(gt | errset)


def lovasz_extension_integral(errors, fg):
    """Lovasz extension as the integral over thresholds of the set function on level sets."""
    levels = np.unique(np.concatenate([[0.0], errors]))
    total = 0.0
    for lo, hi in zip(levels[:-1], levels[1:]):
        total += (hi - lo) * jaccard_loss_of_set({i for i in range(len(errors)) if errors[i] >= hi}, fg)
    return total


def lovasz_oracle(probs, labels, classes="present"):
    vals = []
    for c in range(probs.shape[1]):
        fg = (labels == c).astype(float)
        if classes == "present" and fg.sum() == 0:
            continue
        vals.append(lovasz_extension_integral(np.abs(fg - probs[:, c]), fg))
    return float(np.mean(vals)) if vals else 0.0


def brute_chamfer(a, b):
    d_ab = [min(((p - q) ** 2).sum() for q in b) for p in a]
    d_ba = [min(((p - q) ** 2).sum() for q in a) for p in b]
    return float(np.mean(d_ab) + np.mean(d_ba))


class TestLovasz:
    def test_exhaustive_binary_masks(self):
        rng = np.random.default_rng(0)
        for n in range(1, 7):
            for labels in itertools.product((0, 1), repeat=n):
                labels = np.array(labels)
                p1 = rng.random(n)
                probs = np.stack([1 - p1, p1], axis=1)
                got = lovasz_softmax_flat(torch.from_numpy(probs), torch.from_numpy(labels)).item()
                assert abs(got - lovasz_oracle(probs, labels)) <= 1e-9

    def test_all_classes_mode(self):
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(3), size=5)
        labels = np.array([0, 0, 1, 1, 0])
        got = lovasz_softmax_flat(torch.from_numpy(probs), torch.from_numpy(labels), classes="all").item()
        assert abs(got - lovasz_oracle(probs, labels, "all")) <= 1e-9

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            probs = torch.from_numpy(rng.dirichlet(np.ones(4), size=10))
            labels = torch.from_numpy(rng.integers(0, 4, 10))
            assert 0.0 <= lovasz_softmax_flat(probs, labels).item() <= 1.0

    def test_fd_gradient(self):
        torch.manual_seed(0)
        logits = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 1, 2, 1, 0, 2])
        assert relative_fd_error(lambda: lovasz_softmax_flat(logits.softmax(-1), labels), logits, k=8) <= 1e-4


class TestVolumeLoss:
    def test_perfect_prediction(self):
        labels = torch.tensor([[[0, 3], [6, 1]]])
        logits = F.one_hot(labels, 7).double() * 50.0
        assert volume_loss(logits, labels).item() <= 1e-6

    def test_uniform_single_voxel_ce(self):
        logits = torch.zeros(1, 1, 1, 7, dtype=torch.float64)
        labels = torch.tensor([[[4]]])
        ce = volume_loss(logits, labels) - lovasz_softmax_flat(logits.view(1, 7).softmax(-1), labels.view(1))
        assert math.isclose(ce.item(), math.log(7), rel_tol=0, abs_tol=1e-12)

    def test_components(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(2, 3, 3, 2, 7, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 7, (2, 3, 3, 2), generator=g)
        flat = logits.view(-1, 7)
        expected = F.cross_entropy(flat, labels.view(-1)).item() + lovasz_oracle(
            flat.softmax(-1).numpy(), labels.view(-1).numpy())
        assert abs(volume_loss(logits, labels).item() - expected) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            volume_loss(torch.zeros(2, 2, 2, 7), torch.zeros(2, 2, 3, dtype=torch.long))

    def test_fd_gradient(self):
        g = torch.Generator().manual_seed(4)
        logits = torch.randn(2, 2, 2, 4, generator=g, dtype=torch.float64, requires_grad=True)
        labels = torch.randint(0, 4, (2, 2, 2), generator=g)
        assert relative_fd_error(lambda: volume_loss(logits, labels), logits, k=8) <= 1e-4


class TestChamfer:
    def test_identical(self):
        a = torch.randn(7, 3)
        assert chamfer(a, a).item() == 0.0

    def test_singletons(self):
        assert chamfer(torch.tensor([[0.0, 0, 0]]), torch.tensor([[1.0, 0, 0]])).item() == 2.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = rng.normal(size=(int(rng.integers(1, 33)), 3))
            b = rng.normal(size=(int(rng.integers(1, 33)), 3))
            got = chamfer(torch.from_numpy(a), torch.from_numpy(b)).item()
            assert abs(got - brute_chamfer(a, b)) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31 - 1))
    def test_symmetric_nonnegative(self, n, m, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(n, 3, generator=g, dtype=torch.float64)
        b = torch.randn(m, 3, generator=g, dtype=torch.float64)
        assert chamfer(a, b).item() >= 0
        torch.testing.assert_close(chamfer(a, b), chamfer(b, a))

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            chamfer(torch.zeros(0, 3), torch.zeros(2, 3))

    def test_fd_gradient(self):
        g = torch.Generator().manual_seed(6)
        a = torch.randn(5, 3, generator=g, dtype=torch.float64, requires_grad=True)
        b = torch.randn(7, 3, generator=g, dtype=torch.float64)
        assert relative_fd_error(lambda: chamfer(a, b), a, k=8) <= 1e-4


class TestLocationLoss:
    def test_single_stage(self):
        a, b = torch.randn(4, 3), torch.randn(6, 3)
        torch.testing.assert_close(location_loss([a], b), chamfer(a, b))

    def test_all_stages_exact(self):
        b = torch.randn(6, 3)
        assert location_loss([b, b.flip(0)], b).item() == 0.0

    def test_two_stage_sum(self):
        rng = np.random.default_rng(7)
        s1, s2, gt = rng.normal(size=(3, 3)), rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        got = location_loss([torch.from_numpy(s1), torch.from_numpy(s2)], torch.from_numpy(gt)).item()
        assert abs(got - brute_chamfer(s1, gt) - brute_chamfer(s2, gt)) <= 1e-9

    def test_init_included_when_given(self):
        a, b, init = torch.randn(4, 3), torch.randn(6, 3), torch.randn(2, 3)
        torch.testing.assert_close(location_loss([a], b, init), chamfer(a, b) + chamfer(init, b))


class TestAssignLabels:
    def test_coinciding_point(self):
        gt = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2, 0]])
        assert assign_labels(gt[[2, 0]], gt, torch.tensor([4, 5, 6])).tolist() == [6, 4]

    def test_single_gt(self):
        assert assign_labels(torch.randn(5, 3), torch.zeros(1, 3), torch.tensor([3])).tolist() == [3] * 5

    def test_tie_goes_to_lower_index(self):
        gt = torch.tensor([[2.0, 0, 0], [0.0, 0, 0]], dtype=torch.float64)
        mid = torch.tensor([[1.0, 0, 0]], dtype=torch.float64)
        d = ((mid - gt) ** 2).sum(-1)
        assert d[0] == d[1]  # the tie is exact
        assert assign_labels(mid, gt, torch.tensor([2, 5])).tolist() == [2]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 2.0, 8.0]))
    def test_scale_equivariant(self, seed, s):
        g = torch.Generator().manual_seed(seed)
        gt = torch.randn(9, 3, generator=g, dtype=torch.float64)
        p = torch.randn(5, 3, generator=g, dtype=torch.float64)
        lab = torch.randint(1, 7, (9,), generator=g)
        assert torch.equal(assign_labels(p, gt, lab), assign_labels(p * s, gt * s, lab))

    def test_empty_gt(self):
        with pytest.raises(ContractError):
            assign_labels(torch.zeros(2, 3), torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))


class TestFocal:
    def test_gamma0_is_cross_entropy(self):
        g = torch.Generator().manual_seed(8)
        scores = torch.randn(20, 6, generator=g, dtype=torch.float64)
        labels = torch.randint(1, 7, (20,), generator=g)
        got = focal_class_loss(scores, labels, gamma=0.0, weight=1.0)
        assert abs(got.item() - F.cross_entropy(scores, labels - 1).item()) <= 1e-12

    def test_confident_correct(self):
        scores = torch.full((3, 4), -50.0, dtype=torch.float64)
        labels = torch.tensor([1, 3, 4])
        scores[torch.arange(3), labels - 1] = 50.0
        assert focal_class_loss(scores, labels).item() <= 1e-12

    def test_formula_oracle(self):
        scores = np.array([[0.2, -1.0, 0.5, 2.0], [1.0, 1.0, 1.0, 1.0], [-0.3, 0.8, 0.1, -2.0]])
        labels = np.array([4, 2, 1])
        vals = []
        for s, y in zip(scores, labels):
            p = np.exp(s[y - 1]) / np.exp(s).sum()
            vals.append(-0.25 * (1 - p) ** 2 * np.log(p))
        got = focal_class_loss(torch.from_numpy(scores), torch.from_numpy(labels), 2.0, 0.25).item()
        assert abs(got - np.mean(vals)) <= 1e-12

    def test_bad_labels(self):
        with pytest.raises(ContractError):
            focal_class_loss(torch.zeros(2, 3), torch.tensor([0, 1]))

    def test_fd_gradient(self):
        g = torch.Generator().manual_seed(9)
        scores = torch.randn(5, 4, generator=g, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([1, 2, 3, 4, 2])
        assert relative_fd_error(lambda: focal_class_loss(scores, labels), scores, k=8) <= 1e-4


class TestTotal:
    def test_alpha_zero(self):
        assert total_loss(1.3, 2.0, 5.0, alpha=0.0).total.item() == 1.3

    def test_arithmetic(self):
        assert math.isclose(total_loss(1.0, 2.0, 3.0, alpha=0.1).total.item(), 1.5, abs_tol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 1))
    def test_breakdown_invariant(self, v, l, c, a):
        b = total_loss(v, l, c, alpha=a)
        assert abs(b.total.item() - (v + a * (l + c))) <= 1e-9
        assert set(b.as_floats()) == {"l_vol", "l_loc", "l_cls", "total"}


class TestBatchedPointLosses:
    def test_matches_per_sample_loop(self):
        g = torch.Generator().manual_seed(10)
        gt_pts = [torch.randn(n, 3, generator=g, dtype=torch.float64) for n in (5, 9)]
        gt_lab = [torch.randint(1, 7, (len(p),), generator=g) for p in gt_pts]
        stages = [torch.randn(2, m, 3, generator=g, dtype=torch.float64) for m in (3, 6)]
        scores = [torch.randn(2, m, 6, generator=g, dtype=torch.float64) for m in (3, 6)]
        init = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
        l_loc, l_cls = batched_point_losses(stages, scores, gt_pts, gt_lab, init_points=init)
        for b in range(2):
            loc = location_loss([s[b] for s in stages], gt_pts[b], init[b])
            cls = sum(focal_class_loss(sc[b], assign_labels(s[b], gt_pts[b], gt_lab[b])) for s, sc in zip(stages, scores))
            torch.testing.assert_close(l_loc[b], loc)
            torch.testing.assert_close(l_cls[b], cls)

    def test_empty_gt_rejected(self):
        with pytest.raises(ContractError):
            batched_point_losses([torch.zeros(1, 2, 3)], [torch.zeros(1, 2, 6)], [torch.zeros(0, 3)],
                                 [torch.zeros(0, dtype=torch.long)])


class TestComputeLosses:
    def make(self, seed=11):
        g = torch.Generator().manual_seed(seed)
        o_f = torch.randn(2, 2, 2, 2, 7, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 7, (2, 2, 2, 2), generator=g)
        pts = [torch.randn(4, 2, 3, generator=g, dtype=torch.float64)[0] for _ in range(2)]
        lab = [torch.randint(1, 7, (2,), generator=g) for _ in range(2)]
        preds = PointPredictions([torch.randn(2, 3, 3, generator=g, dtype=torch.float64)],
                                 [torch.randn(2, 3, 6, generator=g, dtype=torch.float64)],
                                 torch.zeros(2, 1, 4, dtype=torch.float64),
                                 torch.randn(2, 3, 3, generator=g, dtype=torch.float64))
        return o_f, labels, preds, pts, lab

    def test_combines_components(self):
        o_f, labels, preds, pts, lab = self.make()
        out = compute_losses(o_f, labels, preds, pts, lab, alpha=0.1)
        l_loc = np.mean([chamfer(preds.points[0][b], pts[b]).item() for b in range(2)])
        l_cls = np.mean([focal_class_loss(preds.class_scores[0][b],
                                          assign_labels(preds.points[0][b], pts[b], lab[b])).item() for b in range(2)])
        assert abs(out.l_vol.item() - volume_loss(o_f, labels).item()) <= 1e-12
        assert abs(out.l_loc.item() - l_loc) <= 1e-9
        assert abs(out.l_cls.item() - l_cls) <= 1e-9
        assert abs(out.total.item() - (out.l_vol.item() + 0.1 * (l_loc + l_cls))) <= 1e-9

    def test_supervise_init_adds_term(self):
        o_f, labels, preds, pts, lab = self.make()
        base = compute_losses(o_f, labels, preds, pts, lab)
        with_init = compute_losses(o_f, labels, preds, pts, lab, supervise_init=True)
        extra = np.mean([chamfer(preds.init_points[b], pts[b]).item() for b in range(2)])
        assert abs(with_init.l_loc.item() - base.l_loc.item() - extra) <= 1e-9

    def test_without_points(self):
        o_f, labels, _, pts, lab = self.make()
        out = compute_losses(o_f, labels, None, pts, lab)
        assert out.l_loc.item() == 0.0 and out.total.item() == out.l_vol.item()
