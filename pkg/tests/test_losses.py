import math
from types import SimpleNamespace

import numpy as np
import pytest

from gradcases import CASES
from toydetr.autodiff import Parameter, Value
from toydetr.errors import ContractError, ValidationError
from toydetr.geometry import BBox, giou
from toydetr.losses import (
    LossWeights,
    composite_loss,
    focal_loss,
    giou_focal_loss,
    quality_targets,
    target_transform,
    varifocal_loss,
)
from toydetr.matching import Assignment

LN2 = math.log(2)


def test_focal_examples():
    assert focal_loss(1 - 1e-12, True).item() < 1e-20
    assert focal_loss(0.5, True, 2.0).item() == pytest.approx(0.25 * LN2, abs=1e-15)
    assert focal_loss(0.5, False, 2.0).item() == pytest.approx(0.25 * LN2, abs=1e-15)


def test_giou_focal_examples():
    expected = 0.0225 * -(0.75 * math.log(0.6) + 0.25 * math.log(0.4))
    assert giou_focal_loss(0.6, 0.75).item() == pytest.approx(expected, abs=1e-15)
    assert giou_focal_loss(0.6, 0.75).item() == pytest.approx(0.013775, abs=1e-6)
    assert giou_focal_loss(0.3, 0.3).item() == 0.0


def test_giou_focal_reduces_to_focal():
    p = np.linspace(1e-6, 1 - 1e-6, 1000)
    for gamma in (0.0, 1.0, 2.0, 3.5):
        np.testing.assert_allclose(giou_focal_loss(p, np.ones_like(p), gamma).data,
                                   focal_loss(p, True, gamma).data, rtol=0, atol=1e-12)


def test_varifocal_examples():
    assert varifocal_loss(0.6, 0.75).item() == pytest.approx(0.75 * 0.61220, abs=1e-5)
    assert varifocal_loss(0.5, 1.0).item() == pytest.approx(LN2, abs=1e-15)
    assert varifocal_loss(0.9, 1e-9).item() < 1e-8


@pytest.mark.parametrize("t", [0.0, -0.1, 1.5, float("nan")])
def test_targets_out_of_range(t):
    with pytest.raises(ValidationError):
        giou_focal_loss(0.5, t)
    with pytest.raises(ValidationError):
        varifocal_loss(0.5, t)


def test_target_transform_examples():
    assert target_transform("norm_giou_pow", 1.0, 3.0) == 1.0
    assert target_transform("iou_pow", 0.81, 0.5) == pytest.approx(0.9, abs=1e-15)
    g = giou(BBox.from_corners(0, 0, 1, 1), BBox.from_corners(2, 0, 3, 1))
    assert target_transform("norm_giou_pow", g, 1.0) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ValidationError):
        target_transform("iou_pow", 0.5, 0.0)
    with pytest.raises(ValidationError):
        target_transform("bogus", 0.5, 1.0)


def test_loss_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(lambda_giou=-1.0)
    with pytest.raises(ValidationError):
        LossWeights(gamma=float("inf"))


def test_losses_nonnegative_and_finite(rng):
    p = np.concatenate([rng.random(500), [0.0, 1.0]])
    t = np.clip(rng.random(502), 1e-6, 1.0)
    for v in (focal_loss(p, True), focal_loss(p, False), giou_focal_loss(p, t), varifocal_loss(p, t)):
        assert np.all(np.isfinite(v.data)) and np.all(v.data >= 0)


def test_giou_focal_decreases_toward_target():
    for t in (0.3, 0.6, 0.9, 1.0):
        p = np.linspace(0.01, t - 0.01, 200)
        vals = giou_focal_loss(p, np.full_like(p, t)).data
        assert np.all(np.diff(vals) < 0)


def test_giou_focal_continuous():
    grid = np.linspace(0.05, 0.95, 50)
    P, T = np.meshgrid(grid, grid)
    a = giou_focal_loss(P, T).data
    b = giou_focal_loss(P + 1e-9, T).data
    assert np.max(np.abs(a - b)) < 1e-7


@pytest.mark.parametrize("case", ["focal", "giou_focal", "varifocal"])
def test_loss_gradients(case):
    assert max(CASES[case](seed) for seed in range(20)) < 1e-4


def _scene(boxes, cats):
    return SimpleNamespace(boxes=np.asarray(boxes, dtype=float).reshape(-1, 4), categories=np.asarray(cats))


def _pred(probs, boxes):
    return SimpleNamespace(probs=probs, boxes=boxes)


def test_composite_perfect_prediction():
    gt = _scene([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.1]], [1, 0])
    probs = np.full((4, 3), 1e-12)
    probs[0, 1] = probs[2, 0] = 1 - 1e-12
    boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1], [0.7, 0.6, 0.3, 0.1], [0.1, 0.1, 0.1, 0.1]])
    a = Assignment([(0, 0), (1, 2)])
    for kind in ("focal", "giou_focal", "varifocal"):
        assert composite_loss(_pred(probs, boxes), gt, a, cls_kind=kind).item() < 1e-9


def test_composite_no_ground_truth(rng):
    probs = rng.random((5, 3))
    loss = composite_loss(_pred(probs, rng.random((5, 4))), _scene(np.zeros((0, 4)), []), Assignment())
    expected = 2.0 * focal_loss(probs, False).data.sum()
    assert loss.item() == pytest.approx(expected, rel=1e-14)


def test_composite_hand_sum():
    w = LossWeights()
    pb = np.array([0.52, 0.48, 0.3, 0.25])
    gb = np.array([0.5, 0.5, 0.2, 0.2])
    probs = np.array([[0.2, 0.7], [0.1, 0.4]])
    gt = _scene([gb], [1])
    a = Assignment([(0, 0)])
    g = giou(BBox(*pb), BBox(*gb))
    l1 = np.abs(pb - gb).sum()

    def neg(p):
        return -(p ** 2) * math.log(1 - p)

    negs = neg(0.2) + neg(0.1) + neg(0.4)
    t = (g + 1) / 2
    cls = {
        "focal": -(0.3 ** 2) * math.log(0.7),
        "giou_focal": -abs(t - 0.7) ** 2 * (t * math.log(0.7) + (1 - t) * math.log(0.3)),
        "varifocal": -t * (t * math.log(0.7) + (1 - t) * math.log(0.3)),
    }
    base = 2.0 * (1 - g) + 5.0 * l1 + 2.0 * negs
    for kind, c in cls.items():
        got = composite_loss(_pred(probs, np.vstack([pb, [0.1, 0.1, 0.1, 0.1]])), gt, a, w, cls_kind=kind).item()
        assert abs(got - (base + w.lambda_cls * c)) < 1e-10, kind


def test_composite_contract_errors(rng):
    gt = _scene([[0.5, 0.5, 0.2, 0.2]], [0])
    pred = _pred(rng.random((3, 2)), rng.random((3, 4)))
    with pytest.raises(ContractError):
        composite_loss(pred, gt, Assignment([(0, 5)]))
    with pytest.raises(ContractError):
        composite_loss(pred, gt, Assignment([(1, 0)]))
    with pytest.raises(ValidationError):
        composite_loss(pred, gt, Assignment([(0, 0)]), cls_kind="nope")


def test_quality_target_is_detached():
    gt = _scene([[0.5, 0.5, 0.2, 0.2]], [0])
    boxes = Parameter(np.array([[0.52, 0.5, 0.25, 0.2], [0.1, 0.1, 0.1, 0.1]]), "b")
    probs = Value(np.full((2, 1), 0.5))
    a = Assignment([(0, 0)])
    t = quality_targets(boxes, gt, a)
    full = composite_loss(_pred(probs, boxes), gt, a, cls_kind="giou_focal")
    fixed = composite_loss(_pred(probs, boxes), gt, a, cls_kind="giou_focal", targets=t)
    assert full.item() == fixed.item()
    full.backward()
    g_full = boxes.grad.copy()
    boxes.grad = None
    fixed.backward()
    np.testing.assert_array_equal(g_full, boxes.grad)


@pytest.mark.parametrize("kind", ["focal", "giou_focal", "varifocal"])
def test_composite_gradients(kind):
    assert max(CASES[f"composite/{kind}"](seed) for seed in range(20)) < 1e-4
