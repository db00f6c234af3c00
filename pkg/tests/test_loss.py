import math

import numpy as np
import pytest

from zsdet.errors import ConfigError, InvalidTargetError, NumericFailureError
from zsdet.loss import (
    batch_loss,
    classification_loss,
    clustering_loss,
    loss_gradients,
    max_margin_loss,
    regression_loss,
)
from zsdet.model import RegionSample, encode_boxes
from zsdet.train import TrainConfig

from conftest import make_model, make_space, make_table, random_unit_columns

LOG2 = math.log(2.0)


def softplus_ref(x: float) -> float:
    """Independent reference: log(1+e^x) via mpmath-free stable formula."""
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def brute_force_mm(o, y, ids):
    terms = [softplus_ref(o[c - 1] - o[y - 1]) for c in ids if c != y]
    return sum(terms) / len(terms)


def brute_force_mc(o, y, space):
    z = space.members(space.meta_of(y))
    outside = [c for c in range(1, space.bg_id + 1) if c not in z]
    total = sum(softplus_ref(o[c - 1] - o[j - 1]) for c in outside for j in z)
    return total / (len(outside) * len(z))


class TestMaxMargin:
    def test_uniform_scores_give_log2(self):
        space = make_space(3, 1)
        o = np.full(space.bg_id, 0.7)
        assert max_margin_loss(o, 1, space) == pytest.approx(LOG2, abs=1e-12)
        assert max_margin_loss(o, 1, space, "seen_only") == pytest.approx(LOG2, abs=1e-12)

    def test_dominant_target_vanishes(self):
        space = make_space(3, 1)
        o = np.zeros(space.bg_id)
        o[0] = 40.0
        assert max_margin_loss(o, 1, space) < 1e-17

    def test_two_class_frozen_value(self):
        # scores (1, 0, 0) over two classes plus bg; two identical terms averaged
        space = make_space(2, 0) if False else make_space(1, 1)
        o = np.array([1.0, 0.0, 0.0])
        expected = softplus_ref(-1.0)
        assert max_margin_loss(o, 1, space) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.313262, abs=1e-6)

    def test_unseen_target_rejected(self):
        space = make_space(2, 1)
        with pytest.raises(InvalidTargetError):
            max_margin_loss(np.zeros(space.bg_id), 3, space)

    def test_seen_only_reads_only_seen_and_bg(self, rng):
        space = make_space(4, 3)
        o = rng.standard_normal(space.bg_id)
        base = max_margin_loss(o, 2, space, "seen_only")
        perturbed = o.copy()
        perturbed[space.S : space.C] = rng.standard_normal(space.U) * 100
        assert max_margin_loss(perturbed, 2, space, "seen_only") == base

    def test_matches_brute_force(self, rng):
        for _ in range(25):
            space = make_space(int(rng.integers(2, 6)), int(rng.integers(1, 4)))
            o = rng.standard_normal(space.bg_id) * 3
            y = int(rng.integers(1, space.S + 1))
            full_ids = list(range(1, space.bg_id + 1))
            seen_ids = list(space.seen_ids) + [space.bg_id]
            assert max_margin_loss(o, y, space) == pytest.approx(
                brute_force_mm(o, y, full_ids), abs=1e-12
            )
            assert max_margin_loss(o, y, space, "seen_only") == pytest.approx(
                brute_force_mm(o, y, seen_ids), abs=1e-12
            )

    def test_monotone_in_target_score(self, rng):
        space = make_space(3, 2)
        o = rng.standard_normal(space.bg_id)
        losses = []
        for bump in (0.0, 0.5, 1.0, 2.0):
            oo = o.copy()
            oo[0] += bump
            losses.append(max_margin_loss(oo, 1, space))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_bg_target_allowed(self):
        space = make_space(2, 1)
        o = np.zeros(space.bg_id)
        assert max_margin_loss(o, space.bg_id, space) == pytest.approx(LOG2, abs=1e-12)


class TestClusteringLoss:
    def test_single_meta_reduces_to_bg_ranking(self):
        # one meta holding all three classes: outside = {bg}
        space = make_space(2, 1, meta_of={"c1": "m", "c2": "m", "c3": "m"})
        o = np.array([1.0, 2.0, 3.0, 0.5])
        expected = sum(softplus_ref(o[3] - o[j]) for j in range(3)) / 3.0
        assert clustering_loss(o, 1, space) == pytest.approx(expected, abs=1e-12)

    def test_uniform_scores_give_log2(self):
        space = make_space(3, 1)
        o = np.full(space.bg_id, -1.3)
        assert clustering_loss(o, 1, space) == pytest.approx(LOG2, abs=1e-12)

    def test_two_meta_frozen_value(self):
        # z={1,2}, outside={3, bg}; all four pairs are softplus(-1)
        space = make_space(2, 1, meta_of={"c1": "m1", "c2": "m1", "c3": "m2"})
        o = np.array([1.0, 1.0, 0.0, 0.0])
        assert clustering_loss(o, 1, space) == pytest.approx(
            softplus_ref(-1.0), abs=1e-12
        )
        assert clustering_loss(o, 1, space) == pytest.approx(
            brute_force_mc(o, 1, space), abs=1e-12
        )

    def test_matches_pair_enumeration_oracle(self, rng):
        for _ in range(25):
            n_seen = int(rng.integers(2, 6))
            n_unseen = int(rng.integers(1, 4))
            space = make_space(n_seen, n_unseen, n_meta=int(rng.integers(1, 4)))
            o = rng.standard_normal(space.bg_id) * 2
            y = int(rng.integers(1, n_seen + 1))
            assert clustering_loss(o, y, space) == pytest.approx(
                brute_force_mc(o, y, space), abs=1e-12
            )

    def test_bg_target_pushes_bg_above_classes(self):
        space = make_space(2, 1)
        o = np.array([0.0, 0.0, 0.0, 0.0])
        # bg meta is the singleton {bg}: outside = all classes
        expected = brute_force_mc(o, space.bg_id, space)
        assert clustering_loss(o, space.bg_id, space) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(LOG2, abs=1e-12)


class TestClassificationLoss:
    def test_lambda_one_is_margin(self, rng):
        space = make_space(3, 2)
        o = rng.standard_normal(space.bg_id)
        b = classification_loss(o, 2, space, lam=1.0)
        assert b.l_cls == b.l_mm
        assert b.total == b.l_cls

    def test_lambda_zero_is_clustering(self, rng):
        space = make_space(3, 2)
        o = rng.standard_normal(space.bg_id)
        b = classification_loss(o, 2, space, lam=0.0)
        assert b.l_cls == b.l_mc

    def test_weighted_sum_hand_check(self, rng):
        space = make_space(3, 2)
        o = rng.standard_normal(space.bg_id)
        b = classification_loss(o, 1, space, lam=0.8)
        assert b.l_cls == pytest.approx(0.8 * b.l_mm + 0.2 * b.l_mc, abs=1e-15)
        assert b.l_cls == pytest.approx(
            0.8 * brute_force_mm(o, 1, list(range(1, space.bg_id + 1)))
            + 0.2 * brute_force_mc(o, 1, space),
            abs=1e-12,
        )

    def test_affine_in_lambda(self, rng):
        space = make_space(4, 1)
        o = rng.standard_normal(space.bg_id)
        vals = [classification_loss(o, 1, space, lam).l_cls for lam in (0.0, 0.5, 1.0)]
        assert vals[1] == pytest.approx(0.5 * (vals[0] + vals[2]), abs=1e-12)

    def test_lambda_out_of_range(self):
        space = make_space(2, 1)
        with pytest.raises(ConfigError):
            classification_loss(np.zeros(space.bg_id), 1, space, lam=1.5)

    def test_breakdown_identity(self, rng):
        space = make_space(3, 2)
        for lam in (0.0, 0.3, 0.8, 1.0):
            o = rng.standard_normal(space.bg_id)
            b = classification_loss(o, 3, space, lam=lam)
            assert b.l_cls == pytest.approx(
                b.lam * b.l_mm + (1 - b.lam) * b.l_mc, abs=1e-12
            )

    def test_seen_only_drops_clustering(self, rng):
        space = make_space(3, 2)
        o = rng.standard_normal(space.bg_id)
        b = classification_loss(o, 1, space, lam=0.3, mode="seen_only")
        assert b.l_mc == 0.0
        assert b.lam == 1.0
        assert b.l_cls == b.l_mm == max_margin_loss(o, 1, space, "seen_only")


class TestLabelPermutationInvariance:
    def test_margin_invariant_under_nontarget_swap(self, rng):
        space = make_space(4, 2)
        o = rng.standard_normal(space.bg_id)
        swapped = o.copy()
        swapped[[1, 2]] = swapped[[2, 1]]  # swap classes 2 and 3, target is 1
        assert max_margin_loss(o, 1, space) == pytest.approx(
            max_margin_loss(swapped, 1, space), abs=1e-15
        )

    def test_clustering_invariant_under_same_meta_swap(self, rng):
        space = make_space(4, 2, meta_of={
            "c1": "m1", "c2": "m1", "c3": "m1", "c4": "m2", "c5": "m2", "c6": "m2",
        })
        o = rng.standard_normal(space.bg_id)
        swapped = o.copy()
        swapped[[1, 2]] = swapped[[2, 1]]  # c2 and c3 share the target's meta
        assert clustering_loss(o, 1, space) == pytest.approx(
            clustering_loss(swapped, 1, space), abs=1e-15
        )


class TestRegressionLoss:
    def setup_method(self):
        self.space = make_space(2, 1)
        self.proposal = np.array([0.0, 0.0, 10.0, 10.0])
        self.gt = np.array([1.0, 2.0, 11.0, 13.0])
        self.target = encode_boxes(self.gt, self.proposal)

    def full_pred(self, slice_vals):
        pred = np.zeros(4 * self.space.S)
        pred[:4] = slice_vals
        return pred

    def test_exact_prediction_is_zero(self):
        assert regression_loss(self.full_pred(self.target), self.proposal, self.gt, 1, self.space) == 0.0

    def test_quadratic_zone(self):
        off = self.target.copy()
        off[0] += 0.5
        assert regression_loss(self.full_pred(off), self.proposal, self.gt, 1, self.space) == pytest.approx(0.125, abs=1e-12)

    def test_linear_zone(self):
        off = self.target.copy()
        off[2] += 2.0
        assert regression_loss(self.full_pred(off), self.proposal, self.gt, 1, self.space) == pytest.approx(1.5, abs=1e-12)

    def test_background_and_unseen_contribute_zero(self):
        pred = np.ones(4 * self.space.S)
        assert regression_loss(pred, self.proposal, self.gt, self.space.bg_id, self.space) == 0.0
        assert regression_loss(pred, self.proposal, self.gt, 3, self.space) == 0.0

    def test_other_class_slice_ignored(self):
        pred = np.zeros(4 * self.space.S)
        pred[:4] = self.target
        pred[4:] = 100.0  # class 2's slice should not matter for y=1
        assert regression_loss(pred, self.proposal, self.gt, 1, self.space) == 0.0


def random_batch(rng, space, d_f, size=4):
    targets = list(space.seen_ids) + [space.bg_id]
    batch = []
    for i in range(size):
        y = int(targets[rng.integers(len(targets))])
        x1, y1 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(10, 40, 2)
        gt_box = None
        if space.is_seen(y):
            gx1, gy1 = rng.uniform(0, 50, 2)
            gw, gh = rng.uniform(10, 40, 2)
            gt_box = np.array([gx1, gy1, gx1 + gw, gy1 + gh])
        batch.append(
            RegionSample(
                feature=rng.standard_normal(d_f),
                box=np.array([x1, y1, x1 + w, y1 + h]),
                label=y,
                image_id=f"i{i}",
                gt_box=gt_box,
            )
        )
    return batch


def fd_gradient(model, batch, space, lam, mode, param, h=1e-5):
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = batch_loss(model, batch, space, lam, mode)
        flat[idx] = orig - h
        down = batch_loss(model, batch, space, lam, mode)
        flat[idx] = orig
        gflat[idx] = (up - down) / (2 * h)
    return grad


def max_rel_err(a, n):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)
    err = np.abs(a - n) / scale
    err[np.maximum(np.abs(a), np.abs(n)) < 1e-7] = 0.0
    return float(err.max())


class TestLossGradients:
    def test_zero_features_give_zero_w1_gradient(self, rng):
        space = make_space(3, 1)
        table = make_table(random_unit_columns(rng, 4, 4))
        model = make_model(table, space, d_f=4)
        batch = random_batch(rng, space, 4)
        for s in batch:
            s.feature = np.zeros(4)
        _, grads = loss_gradients(model, batch, space, 0.5, "full")
        np.testing.assert_array_equal(grads.dw1, np.zeros_like(grads.dw1))

    @pytest.mark.parametrize("mode", ["full", "seen_only"])
    @pytest.mark.parametrize("lam", [0.0, 0.6, 1.0])
    def test_finite_difference_small_instance(self, rng, mode, lam):
        space = make_space(5, 2, n_meta=3)
        table = make_table(random_unit_columns(rng, 8, 7))
        model = make_model(table, space, d_f=8, seed=1)
        model.w1 = rng.standard_normal((8, 8)) * 0.5
        model.box_w = rng.standard_normal(model.box_w.shape) * 0.1
        model.box_b = rng.standard_normal(model.box_b.shape) * 0.1
        batch = random_batch(rng, space, 8)
        breakdown, grads = loss_gradients(model, batch, space, lam, mode)
        assert batch_loss(model, batch, space, lam, mode) == pytest.approx(
            breakdown.total, abs=1e-15
        )
        for analytic, param in [
            (grads.dw1, model.w1),
            (grads.dbox, model.box_w),
            (grads.dbox_b, model.box_b),
        ]:
            numeric = fd_gradient(model, batch, space, lam, mode, param)
            assert max_rel_err(analytic, numeric) < 1e-4

    def test_lambda_one_equals_pure_margin_path(self, rng):
        space = make_space(4, 2)
        table = make_table(random_unit_columns(rng, 6, 6))
        model = make_model(table, space, d_f=6, seed=2)
        batch = random_batch(rng, space, 6)
        _, grads = loss_gradients(model, batch, space, 1.0, "full")
        # independent pure-margin gradient: sigma weights from the definition
        dw1 = np.zeros_like(model.w1)
        for s in batch:
            o = (s.feature @ model.w1) @ model.w2
            g = np.zeros(space.bg_id)
            cols = [c - 1 for c in range(1, space.bg_id + 1) if c != s.label]
            diffs = o[cols] - o[s.label - 1]
            sig = 1.0 / (1.0 + np.exp(-diffs))
            for c, w in zip(cols, sig / len(cols)):
                g[c] += w
            g[s.label - 1] -= sig.sum() / len(cols)
            dw1 += np.outer(s.feature, model.w2 @ g)
        dw1 /= len(batch)
        np.testing.assert_allclose(grads.dw1, dw1, atol=1e-12)

    def test_seen_only_gradient_ignores_unseen_scores(self, rng):
        space = make_space(4, 2)
        table = make_table(random_unit_columns(rng, 6, 6))
        model = make_model(table, space, d_f=6, seed=5)
        batch = random_batch(rng, space, 6)
        b1, g1 = loss_gradients(model, batch, space, 0.6, "seen_only")
        # perturbing unseen embedding columns must not change loss or grads
        w2 = model.w2.copy()
        w2[:, space.S : space.C] += rng.standard_normal((6, space.U))
        model2 = make_model(table, space, d_f=6, seed=5)
        model2.w2 = w2
        model2.w1 = model.w1.copy()
        b2, g2 = loss_gradients(model2, batch, space, 0.6, "seen_only")
        assert b1.l_cls == pytest.approx(b2.l_cls, abs=1e-15)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_non_finite_reports_sample_index(self, rng):
        space = make_space(3, 1)
        table = make_table(random_unit_columns(rng, 4, 4))
        model = make_model(table, space, d_f=4)
        batch = random_batch(rng, space, 4, size=3)
        batch[1].feature = np.array([np.inf, 0.0, 0.0, 0.0])
        with pytest.raises(NumericFailureError) as exc:
            loss_gradients(model, batch, space, 0.5, "full")
        assert exc.value.sample_index == 1

    def test_empty_batch_rejected(self, rng):
        space = make_space(3, 1)
        table = make_table(random_unit_columns(rng, 4, 4))
        model = make_model(table, space, d_f=4)
        with pytest.raises(ConfigError):
            loss_gradients(model, [], space, 0.5, "full")

    def test_unseen_label_in_batch_rejected(self, rng):
        space = make_space(3, 1)
        table = make_table(random_unit_columns(rng, 4, 4))
        model = make_model(table, space, d_f=4)
        batch = random_batch(rng, space, 4, size=2)
        batch[0].label = space.S + 1
        with pytest.raises(InvalidTargetError):
            loss_gradients(model, batch, space, 0.5, "full")
