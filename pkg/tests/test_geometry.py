import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toydetr.autodiff import Parameter, grad_rel_error, numeric_grad
from toydetr.errors import ShapeError, ValidationError
from toydetr.geometry import (
    BBox,
    cxcywh_to_xyxy,
    diff_iou_giou,
    diff_l1,
    giou,
    iou,
    l1_box,
    pairwise_iou_giou,
    pairwise_l1,
    xyxy_to_cxcywh,
)

coord = st.floats(0.0, 1.0, allow_nan=False)
size = st.floats(0.01, 1.0, allow_nan=False)
boxes = st.builds(BBox, coord, coord, size, size)


def corners(*xyxy):
    return BBox.from_corners(*xyxy)


def test_iou_examples():
    a = BBox(0.5, 0.5, 0.2, 0.3)
    assert iou(a, a) == 1.0
    assert iou(corners(0, 0, 1, 1), corners(2, 0, 3, 1)) == 0.0
    assert iou(corners(0, 0, 2, 2), corners(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_giou_examples():
    a = BBox(0.5, 0.5, 0.2, 0.3)
    assert giou(a, a) == 1.0
    assert giou(corners(0, 0, 1, 1), corners(2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-15)
    assert giou(corners(0, 0, 2, 2), corners(1, 1, 3, 3)) == pytest.approx(-5 / 63, abs=1e-15)


def test_l1_examples(rng):
    a = BBox(0.5, 0.5, 0.2, 0.2)
    assert l1_box(a, a) == 0.0
    assert l1_box(a, BBox(0.6, 0.5, 0.2, 0.2)) == pytest.approx(0.1, abs=1e-15)
    for _ in range(1000):
        p, q = BBox(*rng.random(4)), BBox(*rng.random(4))
        assert l1_box(p, q) == l1_box(q, p)


def test_degenerate_boxes_flagged():
    z = BBox(0.5, 0.5, 0.0, 0.0)
    value, flag = iou(z, z, return_flag=True)
    assert value == 0.0 and flag
    _, flag = iou(z, BBox(0.5, 0.5, 0.2, 0.2), return_flag=True)
    assert not flag
    assert giou(z, BBox(0.2, 0.2, 0.0, 0.0)) < 0


def test_invalid_boxes():
    with pytest.raises(ValidationError):
        BBox(0.5, 0.5, -0.1, 0.1)
    with pytest.raises(ValidationError):
        BBox.from_corners(0.5, 0.0, 0.4, 1.0)


def test_corner_round_trip(rng):
    b = rng.random((1000, 4))
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-12)
    for row in b[:100]:
        box = BBox(*row)
        back = BBox.from_corners(*box.corners())
        np.testing.assert_allclose(back.as_array(), row, atol=1e-12)


@settings(max_examples=300)
@given(boxes, boxes)
def test_giou_bounded_by_iou_and_symmetric(a, b):
    i, g = iou(a, b), giou(a, b)
    assert -1.0 < g <= i + 1e-15 and 0.0 <= i <= 1.0
    assert iou(b, a) == pytest.approx(i, abs=1e-15)
    assert giou(b, a) == pytest.approx(g, abs=1e-15)
    assert 0.0 < (g + 1) / 2 <= 1.0


@settings(max_examples=200)
@given(boxes, boxes, st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_translation_invariance(a, b, dx, dy):
    sa = BBox(a.cx + dx, a.cy + dy, a.w, a.h)
    sb = BBox(b.cx + dx, b.cy + dy, b.w, b.h)
    assert iou(sa, sb) == pytest.approx(iou(a, b), abs=1e-12)
    assert giou(sa, sb) == pytest.approx(giou(a, b), abs=1e-12)


def test_giou_equals_iou_when_enclosure_is_union():
    a = corners(0, 0, 2, 1)
    b = corners(1, 0, 3, 1)
    assert giou(a, b) == pytest.approx(iou(a, b), abs=1e-15)
    c = corners(1, 1, 3, 3)
    assert giou(corners(0, 0, 2, 2), c) < iou(corners(0, 0, 2, 2), c)


def test_pairwise_matches_scalar(rng):
    a = rng.uniform(0.05, 0.95, (7, 4))
    b = rng.uniform(0.05, 0.95, (5, 4))
    im, gm = pairwise_iou_giou(a, b)
    l1 = pairwise_l1(a, b)
    for i in range(7):
        for j in range(5):
            assert im[i, j] == pytest.approx(iou(BBox(*a[i]), BBox(*b[j])), abs=1e-12)
            assert gm[i, j] == pytest.approx(giou(BBox(*a[i]), BBox(*b[j])), abs=1e-12)
            assert l1[i, j] == pytest.approx(l1_box(BBox(*a[i]), BBox(*b[j])), abs=1e-12)


def test_differentiable_forward_matches(rng):
    a = rng.uniform(0.05, 0.95, (50, 4))
    b = rng.uniform(0.05, 0.95, (50, 4))
    i_v, g_v = diff_iou_giou(a, b)
    for k in range(50):
        assert abs(i_v.data[k] - iou(BBox(*a[k]), BBox(*b[k]))) < 1e-12
        assert abs(g_v.data[k] - giou(BBox(*a[k]), BBox(*b[k]))) < 1e-12
    np.testing.assert_allclose(diff_l1(a, b).data, np.abs(a - b).sum(1), atol=1e-15)


def test_differentiable_shape_check():
    with pytest.raises(ShapeError):
        diff_iou_giou(np.zeros((3, 4)), np.zeros((2, 4)))


def _away_from_kinks(a, b, eps=1e-3):
    ca, cb = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    edges = np.concatenate([ca[:, [0, 2]][:, :, None] - cb[:, [0, 2]][:, None, :],
                            ca[:, [1, 3]][:, :, None] - cb[:, [1, 3]][:, None, :]], axis=1)
    return np.all(np.abs(edges) > eps)


def test_differentiable_gradients():
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.2, 0.8, (3, 4))
        a[:, 2:] = rng.uniform(0.1, 0.5, (3, 2))
        b = a + rng.normal(0, 0.08, (3, 4))
        b[:, 2:] = np.abs(b[:, 2:]) + 0.05
        if not _away_from_kinks(a, b):
            continue
        p = Parameter(a, "p")
        w = rng.normal(size=(3,))
        f = lambda: (diff_iou_giou(p, b)[1] * w).sum() + (diff_iou_giou(p, b)[0] * w).sum() + diff_l1(p, b).sum()
        p.grad = None
        f().backward()
        assert grad_rel_error(p.grad, numeric_grad(f, p, 1e-6)) < 1e-4
        checked += 1
    assert checked >= 50
