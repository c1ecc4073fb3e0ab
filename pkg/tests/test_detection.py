"""Backbone, box head, detection loss, NMS, and GT matching tests."""

import numpy as np
import pytest

from docstruct.autograd import Tensor
from docstruct.detection import (
    Backbone,
    BoxHead,
    DetectionOutput,
    assign_cells,
    decode_boxes,
    detect,
    detection_loss,
    match_to_gt,
    nms,
)
from docstruct.errors import ContractError
from docstruct.geometry import AABox, iou
from docstruct.optim import ParamRegistry, adadelta_step

from helpers import check_grads


def _make_model(seed=0, in_channels=1):
    rng = np.random.default_rng(seed)
    reg = ParamRegistry()
    backbone = Backbone(reg, rng, in_channels=in_channels)
    head = BoxHead(reg, rng, backbone.out_channels)
    return reg, backbone, head


class TestBackbone:
    def test_zero_image_finite(self):
        _, backbone, head = _make_model()
        fmap = backbone.forward(Tensor(np.zeros((1, 32, 48))))
        out = head.forward(fmap)
        assert np.all(np.isfinite(fmap.tensor.data))
        assert np.all(np.isfinite(out.data))

    def test_stride_and_shape_invariant(self):
        _, backbone, _ = _make_model()
        for h, w in [(32, 48), (33, 47), (36, 50)]:
            fmap = backbone.forward(Tensor(np.zeros((1, h, w))))
            assert fmap.stride == 4
            assert fmap.height == -(-h // 4)  # ceil
            assert fmap.width == -(-w // 4)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(1, 32, 32))
        _, backbone, _ = _make_model(seed=2)
        a = backbone.forward(Tensor(img)).tensor.data
        b = backbone.forward(Tensor(img)).tensor.data
        assert np.array_equal(a, b)

    def test_too_small_image_rejected(self):
        _, backbone, _ = _make_model()
        with pytest.raises(ContractError):
            backbone.forward(Tensor(np.zeros((1, 2, 40))))

    def test_gradient_reaches_first_conv(self):
        reg, backbone, head = _make_model(seed=3)
        rng = np.random.default_rng(4)
        img = Tensor(rng.normal(size=(1, 24, 24)))
        out = head.forward(backbone.forward(img))
        (out * out).sum().backward()
        assert np.linalg.norm(reg["backbone.conv0.w"].grad) > 0


def _head_tensor(h, w, strong_cells, offsets=(2.0, 1.0, 2.0, 1.0)):
    """Objectness -10 everywhere except +10 at the given cells."""
    data = np.zeros((5, h, w))
    data[0] = -10.0
    for (r, c, logit) in strong_cells:
        data[0, r, c] = logit
    data[1:5] = np.asarray(offsets)[:, None, None]
    return Tensor(data)


class TestDetect:
    def test_all_low_logits_empty(self):
        out = detect(_head_tensor(4, 6, []), stride=4)
        assert out.boxes == [] and out.scores == []

    def test_single_strong_cell(self):
        out = detect(_head_tensor(4, 6, [(2, 3, 10.0)]), stride=4)
        assert len(out.boxes) == 1
        # center of cell (2,3) at stride 4 is (14, 10)
        assert out.boxes[0].as_tuple() == (14 - 8, 10 - 4, 14 + 8, 10 + 4)
        assert out.scores[0] > 0.99

    def test_suppression_matches_enumeration_oracle(self):
        # two adjacent strong cells decode to heavily overlapping boxes
        head = _head_tensor(4, 6, [(2, 3, 10.0), (2, 4, 8.0)])
        boxes, scores = decode_boxes(head.data, 4)
        cand = [i for i in range(len(scores)) if scores[i] > 0.5]
        cand_boxes = [AABox(*boxes[i]) for i in cand]
        cand_scores = [float(scores[i]) for i in cand]
        assert iou(cand_boxes[0], cand_boxes[1]) > 0.3

        # oracle: exhaustively keep a box iff no higher-scoring kept box overlaps
        order = sorted(range(len(cand)), key=lambda i: -cand_scores[i])
        oracle_keep = []
        for i in order:
            if all(iou(cand_boxes[i], cand_boxes[j]) <= 0.3 for j in oracle_keep):
                oracle_keep.append(i)

        out = detect(head, stride=4)
        assert len(out.boxes) == len(oracle_keep) == 1
        assert out.scores[0] > 0.99  # the higher-score cell survived

    def test_output_sorted_by_score(self):
        head = _head_tensor(6, 6, [(1, 1, 4.0), (4, 4, 9.0)])
        out = detect(head, stride=4)
        assert len(out.boxes) == 2
        assert out.scores[0] >= out.scores[1]
        assert out.scores[0] > 0.99


class TestDetectionLoss:
    def test_perfect_predictions_only_entropy_left(self):
        h, w, stride = 8, 8, 4.0
        gt = [AABox(4, 4, 20, 20)]
        labels, offsets = assign_cells((h, w), stride, gt)
        data = np.zeros((5, h, w))
        data[0] = np.where(labels >= 0, 50.0, -50.0)  # saturated logits
        data[1:5] = offsets
        loss = detection_loss(Tensor(data), gt, stride)
        # regression is exactly zero; classification entropy ~ 0 at saturation
        assert loss.item() < 1e-12

    def test_no_gt_pure_negative_loss(self):
        head = Tensor(np.zeros((5, 4, 4)))
        loss = detection_loss(head, [], 4.0)
        assert loss.item() == pytest.approx(np.log(2.0))  # softplus(0) per cell

    def test_gradients(self):
        rng = np.random.default_rng(5)
        head = Tensor(rng.normal(size=(5, 4, 5)), requires_grad=True)
        gt = [AABox(2, 2, 14, 10)]
        check_grads(lambda: detection_loss(head, gt, 4.0), [head])

    def test_loss_decreases_over_optimizer_steps(self):
        reg, backbone, head = _make_model(seed=6)
        rng = np.random.default_rng(7)
        img = Tensor(rng.uniform(size=(1, 32, 48)))
        gt = [AABox(8, 8, 28, 16), AABox(4, 20, 40, 28)]
        losses = []
        for _ in range(50):
            reg.zero_grads()
            loss = detection_loss(head.forward(backbone.forward(img)), gt, 4.0)
            loss.backward()
            adadelta_step(reg, lr=0.03)  # conservative step keeps descent strict
            losses.append(loss.item())
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.6 * losses[0]


class TestMatchToGT:
    def test_identity_assignment(self):
        gt = [AABox(0, 0, 10, 10), AABox(20, 0, 30, 10)]
        pred = DetectionOutput(list(gt), [0.9, 0.8])
        assert match_to_gt(pred, gt) == [(0, 0), (1, 1)]

    def test_empty_predictions(self):
        assert match_to_gt(DetectionOutput(), [AABox(0, 0, 1, 1)]) == []

    def test_higher_iou_wins_exhaustive(self):
        gt = [AABox(0, 0, 10, 10)]
        pred = DetectionOutput(
            [AABox(0, 0, 10, 9), AABox(0, 0, 10, 6)], [0.9, 0.8]
        )
        # exhaustive check over both candidate pairs
        ious = [iou(b, gt[0]) for b in pred.boxes]
        best = int(np.argmax(ious))
        assert match_to_gt(pred, gt) == [(best, 0)]

    def test_threshold_filters(self):
        gt = [AABox(0, 0, 10, 10)]
        pred = DetectionOutput([AABox(8, 8, 18, 18)], [0.9])
        assert match_to_gt(pred, gt, iou_threshold=0.5) == []

    def test_invalid_threshold(self):
        with pytest.raises(ContractError):
            match_to_gt(DetectionOutput(), [], iou_threshold=1.5)


class TestNMS:
    def test_keeps_non_overlapping(self):
        boxes = [AABox(0, 0, 10, 10), AABox(20, 20, 30, 30)]
        assert nms(boxes, [0.9, 0.8], 0.3) == [0, 1]
