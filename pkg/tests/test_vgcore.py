import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _docs import random_doc
from vexel.vgcore import (
    BOTH,
    COLOR,
    SHAPE,
    CubicPath,
    PathElement,
    Rect,
    Round,
    VectorDocument,
    apply_params,
    flatten_params,
    make_element,
    paint_order,
    rect_path,
    select_intersecting,
)


def one_element_doc():
    el = make_element([[0, 0], [4, 0], [4, 4]], [0.1, 0.2, 0.3, 1.0], 0)
    return VectorDocument([Round([el], 10)], 8, 8)


@pytest.mark.parametrize("group,length", [(SHAPE, 6), (COLOR, 4), (BOTH, 10)])
def test_flatten_lengths(group, length):
    assert len(flatten_params(one_element_doc(), group)) == length


def test_unknown_mask_id_is_named():
    with pytest.raises(KeyError, match="7"):
        flatten_params(one_element_doc(), BOTH, {7})


def test_apply_clamps_colour():
    doc = one_element_doc()
    p = flatten_params(doc, COLOR)
    v = p.values.copy()
    v[0], v[1] = 1.3, -0.2
    out = apply_params(doc, p.with_values(v))
    assert out.element(0).fill[0] == 1.0 and out.element(0).fill[1] == 0.0


def test_apply_rejects_foreign_layout():
    doc = one_element_doc()
    other = VectorDocument([Round([make_element([[0, 0], [1, 0], [1, 1]], [0, 0, 0, 1], 5)], 1)], 8, 8)
    with pytest.raises(ValueError):
        apply_params(doc, flatten_params(other))


def test_path_invariants():
    with pytest.raises(ValueError):
        CubicPath(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        CubicPath(np.zeros((0, 2)))
    p = CubicPath(np.zeros((6, 2)))
    with pytest.raises(ValueError):
        p.points[0, 0] = 1.0


def test_duplicate_ids_rejected():
    el = make_element([[0, 0], [1, 0], [1, 1]], [0, 0, 0, 1], 3)
    with pytest.raises(ValueError):
        VectorDocument([Round([el], 1), Round([el], 1)], 4, 4)


def test_select_intersecting():
    el = PathElement(rect_path(10, 10, 20, 20), np.array([0, 0, 0, 1.0]), 0)
    doc = VectorDocument([Round([el], 1)], 64, 64)
    assert select_intersecting(doc, Rect(15, 15, 15, 15)) == {0}
    assert select_intersecting(doc, Rect(0, 0, 64, 64)) == {0}
    assert select_intersecting(doc, Rect(30, 30, 5, 5)) == frozenset()


def test_paint_order():
    doc = random_doc(np.random.default_rng(0), 8, n_rounds=2)
    order = paint_order(doc)
    assert len(order) == 8 and order == [e.id for r in doc.rounds for e in r.elements]
    assert paint_order(VectorDocument([], 4, 4)) == []


seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=60, deadline=None)
@given(seeds, st.sampled_from([SHAPE, COLOR, BOTH]), st.integers(1, 7))
def test_flatten_apply_roundtrip(seed, group, n):
    rng = np.random.default_rng(seed)
    doc = random_doc(rng, n, n_rounds=min(n, 2))
    mask = set(rng.choice(doc.ids(), size=int(rng.integers(0, n + 1)), replace=False).tolist())
    p = flatten_params(doc, group, mask)
    out = apply_params(doc, p)
    for a, b in zip(doc.elements(), out.elements()):
        assert a.id == b.id
        assert np.array_equal(a.path.points, b.path.points)
        assert np.array_equal(a.fill, b.fill)
    assert [len(r.elements) for r in out.rounds] == [len(r.elements) for r in doc.rounds]


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_apply_keeps_structure_and_bounds(seed):
    rng = np.random.default_rng(seed)
    doc = random_doc(rng, 5)
    p = flatten_params(doc, BOTH)
    out = apply_params(doc, p.with_values(p.values + rng.normal(0, 2, len(p))))
    assert paint_order(out) == paint_order(doc)
    for a, b in zip(doc.elements(), out.elements()):
        assert a.path.points.shape == b.path.points.shape
        assert np.all((b.fill >= 0) & (b.fill <= 1))


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_shape_group_leaves_colour_bits(seed):
    rng = np.random.default_rng(seed)
    doc = random_doc(rng, 4)
    p = flatten_params(doc, SHAPE)
    out = apply_params(doc, p.with_values(p.values + 1.5))
    assert all(np.array_equal(a.fill, b.fill) for a, b in zip(doc.elements(), out.elements()))
    assert np.all(p.shape_indices() == np.arange(len(p))) and len(p.color_indices()) == 0
