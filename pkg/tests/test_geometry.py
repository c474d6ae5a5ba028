import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multipath import geometry as G
from multipath.geometry import Box


def raster_iou(a, b):
    """IoU of integer-aligned boxes by counting unit pixels."""
    size = int(max(a[2], a[3], b[2], b[3])) + 1
    ma = np.zeros((size, size), bool)
    mb = np.zeros((size, size), bool)
    ma[int(a[1]):int(a[3]), int(a[0]):int(a[2])] = True
    mb[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = True
    return 100.0 * (ma & mb).sum() / (ma | mb).sum()


def test_iou_examples():
    b = Box(0, 0, 10, 10)
    assert G.iou(b, b) == 100.0
    assert G.iou(b, Box(20, 20, 30, 30)) == 0.0
    assert G.iou(b, Box(5, 0, 15, 10)) == pytest.approx(100.0 / 3.0, abs=1e-12)
    assert raster_iou(b, Box(5, 0, 15, 10)) == pytest.approx(100.0 / 3.0)


def test_iou_matches_rasterized_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        xy = rng.integers(0, 30, (2, 2))
        wh = rng.integers(1, 20, (2, 2))
        a = Box(*xy[0], *(xy[0] + wh[0]))
        b = Box(*xy[1], *(xy[1] + wh[1]))
        assert G.iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-9)


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(1)
    a = np.sort(rng.uniform(0, 50, (6, 2, 2)), axis=1).transpose(0, 2, 1).reshape(6, 4)[:, [0, 2, 1, 3]]
    a = np.c_[np.minimum(a[:, 0], a[:, 2] - 1), np.minimum(a[:, 1], a[:, 3] - 1), a[:, 2], a[:, 3]]
    m = G.iou_matrix(a, a[::-1])
    for i in range(6):
        for j in range(6):
            assert m[i, j] == pytest.approx(G.iou(Box(*a[i]), Box(*a[5 - j])))


boxes = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40), st.floats(0.5, 40)).map(
    lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200)
@given(boxes, boxes, st.floats(-20, 20), st.floats(-20, 20), st.floats(0.25, 4))
def test_iou_symmetry_and_invariance(a, b, dx, dy, s):
    v = G.iou(a, b)
    assert 0.0 <= v <= 100.0
    assert G.iou(b, a) == pytest.approx(v, abs=1e-9)
    shift = lambda r: Box(r.x1 + dx, r.y1 + dy, r.x2 + dx, r.y2 + dy)  # noqa: E731
    scale = lambda r: Box(r.x1 * s, r.y1 * s, r.x2 * s, r.y2 * s)  # noqa: E731
    assert G.iou(shift(a), shift(b)) == pytest.approx(v, abs=1e-9)
    assert G.iou(scale(a), scale(b)) == pytest.approx(v, abs=1e-9)


def test_foveal_expand_examples():
    b = Box(10, 10, 20, 20)
    assert G.foveal_expand(b, 1.0) == b
    assert G.foveal_expand(b, 2.0) == Box(5, 5, 25, 25)
    assert G.foveal_expand(Box(0, 0, 4, 8), 4.0) == Box(-6, -12, 10, 20)
    with pytest.raises(ValueError):
        G.foveal_expand(b, 0.5)


@given(boxes, st.sampled_from([1.0, 1.5, 2.0, 4.0]))
def test_foveal_expand_keeps_center_and_aspect(b, f):
    e = G.foveal_expand(b, f)
    assert e.center == pytest.approx(b.center, abs=1e-9)
    assert e.width == pytest.approx(f * b.width)
    assert e.height == pytest.approx(f * b.height)
    assert e.width / e.height == pytest.approx(b.width / b.height)


def test_encode_decode_examples():
    b = Box(3, 4, 13, 20)
    assert tuple(G.encode_bbox(b, b)) == (0.0, 0.0, 0.0, 0.0)
    assert G.decode_bbox(b, (0, 0, 0, 0)) == b


def test_encode_decode_roundtrip_1000_pairs():
    rng = np.random.default_rng(2)
    xy = rng.uniform(-100, 100, (1000, 2, 2))
    wh = rng.uniform(0.5, 80, (1000, 2, 2))
    p = np.c_[xy[:, 0], xy[:, 0] + wh[:, 0]]
    g = np.c_[xy[:, 1], xy[:, 1] + wh[:, 1]]
    t = G.encode_array(p, g)
    assert np.all(np.isfinite(t))
    assert np.max(np.abs(G.decode_array(p, t) - g)) < 1e-9


def test_encode_convention():
    p, g = Box(0, 0, 10, 20), Box(5, 0, 25, 10)
    t = G.encode_bbox(p, g)
    assert t.tx == pytest.approx((15 - 5) / 10)
    assert t.ty == pytest.approx((5 - 10) / 20)
    assert t.tw == pytest.approx(np.log(2.0))
    assert t.th == pytest.approx(np.log(0.5))


def test_hflip():
    assert G.hflip_box(Box(0, 0, 10, 10), 100) == Box(90, 0, 100, 10)
    b = Box(3, 4, 17, 9)
    assert G.hflip_box(G.hflip_box(b, 64), 64) == b
    assert G.hflip_box(Box(40, 1, 60, 5), 100) == Box(40, 1, 60, 5)


def test_clip():
    assert G.clip_box(Box(1, 2, 5, 6), 16, 16) == Box(1, 2, 5, 6)
    assert G.clip_box(Box(-6, -12, 10, 20), 16, 16) == Box(0, 0, 10, 16)
    with pytest.raises(G.DegenerateBoxError):
        G.clip_box(Box(20, 20, 30, 30), 16, 16)


def test_clip_array_flags_degenerate_rows():
    clipped, ok = G.clip_array(np.array([[-5, -5, 5, 5], [20, 1, 30, 4.0]]), 16, 16)
    assert ok.tolist() == [True, False]
    np.testing.assert_array_equal(clipped[0], [0, 0, 5, 5])


def test_box_validation():
    assert Box(0, 0, 2, 3).area == 6
    with pytest.raises(G.DegenerateBoxError):
        G.validate(Box(0, 0, 0, 3))
