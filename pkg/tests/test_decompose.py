import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vctransfer.decompose import GRAY, bbox_mask, coverage, default_block_sizes, dilate, random_block_mask, split_frame
from vctransfer.errors import InvalidRangeError, ShapeMismatchError


def _mask(h, w, pts):
    m = np.zeros((h, w), dtype=np.uint8)
    for y, x in pts:
        m[y, x] = 1
    return m


def test_bbox_two_pixels():
    m = _mask(6, 6, [(1, 1), (3, 4)])
    expect = np.zeros((6, 6), dtype=np.uint8)
    expect[1:4, 1:5] = 1
    assert np.array_equal(bbox_mask(m), expect)
    assert not bbox_mask(np.zeros((4, 4))).any()


def test_dilate_single_pixel_and_border():
    m = _mask(7, 7, [(3, 3)])
    d = dilate(m, 2)
    expect = np.zeros((7, 7), dtype=np.uint8)
    expect[1:6, 1:6] = 1
    assert np.array_equal(d, expect)
    corner = dilate(_mask(5, 5, [(0, 0)]), 1)
    assert corner.sum() == 4 and corner[:2, :2].all()
    assert np.array_equal(dilate(m, 0), m)
    with pytest.raises(InvalidRangeError):
        dilate(m, -1)


masks = st.integers(0, 2**30).map(lambda s: (np.random.default_rng(s).random((12, 14)) < 0.08).astype(np.uint8))


@settings(max_examples=60, deadline=None)
@given(m=masks, r1=st.integers(0, 3), r2=st.integers(0, 3))
def test_mask_algebra(m, r1, r2):
    bb = bbox_mask(m)
    assert np.array_equal(bbox_mask(bb), bb)
    assert np.all(bb >= m)
    d = dilate(m, r1)
    assert np.all(d >= m)
    assert np.array_equal(dilate(dilate(m, r1), r2), dilate(m, r1 + r2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**30), mode=st.sampled_from(["pretrain", "finetune"]))
def test_split_frame_retained_sets_are_disjoint(seed, mode):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(12, 14, 3)).astype(np.uint8)  # integer pixels never equal 127.5
    m = (rng.random((12, 14)) < 0.1).astype(np.uint8)
    dec = split_frame(img, m, mode)
    fg_kept = np.any(dec.foreground != GRAY, axis=-1)
    bg_kept = np.any(dec.background != GRAY, axis=-1)
    assert not np.any(fg_kept & bg_kept)
    assert np.array_equal(fg_kept, m.astype(bool))
    hole = bbox_mask(m) if mode == "finetune" else dilate(m, 2)
    assert np.array_equal(bg_kept, ~hole.astype(bool))


def test_split_frame_zero_dilation_reassembles():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.float32)
    m = (rng.random((8, 8)) < 0.3).astype(np.uint8)
    dec = split_frame(img, m, "pretrain", dilation_radius=0)
    rebuilt = np.where(m[..., None] == 1, dec.foreground, dec.background)
    assert np.array_equal(rebuilt, img)


def test_split_frame_edge_cases():
    img = np.full((4, 4, 3), 9.0)
    empty = split_frame(img, np.zeros((4, 4)), "finetune")
    assert np.all(empty.foreground == GRAY) and np.array_equal(empty.background, img)
    full = split_frame(img, np.ones((4, 4)), "finetune")
    assert np.array_equal(full.foreground, img) and np.all(full.background == GRAY)
    with pytest.raises(ShapeMismatchError):
        split_frame(img, np.zeros((3, 4)))
    with pytest.raises(InvalidRangeError):
        split_frame(img, np.zeros((4, 4)), "bogus")


def test_block_mask_zero_coverage():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    r = random_block_mask(img, coverage=0.0, rng=np.random.default_rng(0))
    assert r.covered == 0 and not r.mask.any()
    assert np.all(r.foreground == GRAY) and np.array_equal(r.background, img.astype(np.float32))


def _check_block_mask(img, r, margin):
    h, w = img.shape[:2]
    count = np.zeros((h, w), dtype=int)
    for y, x, s in r.blocks:
        count[y:y + s, x:x + s] += 1
    assert count.max() <= 1
    assert np.array_equal(count.astype(np.uint8), r.mask)
    assert r.covered == int(r.mask.sum())
    fg_kept = np.any(r.foreground != GRAY, axis=-1)
    hole = np.all(r.background == GRAY, axis=-1)
    assert np.all(r.mask[fg_kept] == 1)
    assert np.all(hole[r.mask == 1])
    if margin > 0 and r.blocks:
        assert fg_kept.sum() < r.mask.sum() < hole.sum()
    for y, x, s in r.blocks:
        inner = s - margin
        np.testing.assert_array_equal(r.foreground[y:y + inner, x:x + inner], img[y:y + inner, x:x + inner])


def test_block_mask_properties_100_seeds():
    rng0 = np.random.default_rng(42)
    img = rng0.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    lo, hi = default_block_sizes(32, 32)
    caps = 0
    for seed in range(100):
        r = random_block_mask(img, 0.5, rng=np.random.default_rng(seed))
        _check_block_mask(img, r, 1)
        caps += r.cap_hit
        if not r.cap_hit:
            assert coverage(r.mask) >= 0.5
        assert coverage(r.mask) <= 0.55 + hi * hi / (32 * 32)
    assert caps < 5


def test_block_mask_without_margin_is_exact():
    img = np.random.default_rng(1).integers(0, 256, size=(24, 24, 3)).astype(np.uint8)
    r = random_block_mask(img, 0.4, 3, 6, boundary_margin=0, rng=np.random.default_rng(1))
    _check_block_mask(img, r, 0)
    fg_kept = np.any(r.foreground != GRAY, axis=-1)
    assert np.array_equal(fg_kept, r.mask.astype(bool))


def test_block_mask_cap_is_reported():
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    r = random_block_mask(img, 1.0, 5, 5, max_iter=3, rng=np.random.default_rng(0))
    assert r.cap_hit and r.iterations == 3


@pytest.mark.parametrize("kw", [dict(coverage=1.5), dict(min_block=0), dict(min_block=5, max_block=4),
                                dict(max_block=40), dict(boundary_margin=-1)])
def test_block_mask_invalid(kw):
    with pytest.raises(InvalidRangeError):
        random_block_mask(np.zeros((32, 32, 3)), **kw)


def test_block_mask_does_not_mutate_input():
    img = np.random.default_rng(2).integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    before = img.copy()
    random_block_mask(img, 0.5, rng=np.random.default_rng(0))
    assert np.array_equal(img, before)
