import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facekit.detail import (KeyExpressionDetails, activation_masks, blend_displacements,
                            load_key_expressions, rig_base, rig_detailed, weight_masks)
from facekit.errors import ValidationError
from facekit.mesh import Mesh, RasterMap
from facekit.morphable import BlendshapeSet
from facekit.raster import rasterize_uv
from facekit.raycast import point_to_mesh_distance
from facekit.registration import apply_displacement
from facekit.synth import FaceGenerator

from conftest import grid_patch


def const_maps(values, res=8):
    return [RasterMap(np.full((res, res), float(v))) for v in values]


def test_bundled_key_expressions():
    names, shapes, K = load_key_expressions()
    assert len(names) == 19 and len(shapes) == 51 and K.shape == (19, 51)
    assert (K >= 0).all() and (K <= 1).all() and (K.sum(1) > 0).all()
    assert len(set(names)) == 19


def test_key_expression_details_validation():
    with pytest.raises(ValidationError):
        KeyExpressionDetails(const_maps([0, 1]), np.full((1, 3), 2.0))
    with pytest.raises(ValidationError):
        KeyExpressionDetails(const_maps([0, 1, 2]), np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        KeyExpressionDetails(const_maps([0]) + const_maps([1], res=4), np.zeros((1, 3)))
    assert KeyExpressionDetails(const_maps(range(20))).key_weights.shape == (19, 51)


# --- activation masks ------------------------------------------------------------

def test_activation_masks_zero_and_uniform():
    base = grid_patch(9)
    quarter = Mesh(base.vertices, base.faces, base.uv * 0.5)        # chart covers a corner
    shapes = BlendshapeSet([quarter, quarter,
                            quarter.replace(vertices=quarter.vertices + [0, 0, 2.0])])
    A = activation_masks(shapes, 32)
    assert len(A) == 2
    assert not A[0].data.any()
    chart = rasterize_uv(quarter, 32).covered
    assert np.all(A[1].data[chart] == 1.0) and np.all(A[1].data[~chart] == 0.0)


def test_activation_mask_support_matches_bump_footprint():
    base = grid_patch(17)
    delta = np.zeros(base.n_vertices)
    moved = np.flatnonzero((np.abs(base.uv - [0.5, 0.5]) <= 0.13).all(1))
    delta[moved] = np.random.default_rng(0).uniform(1, 3, moved.size)
    shapes = BlendshapeSet([base, base.replace(vertices=base.vertices + np.c_[0 * delta, 0 * delta, delta])])
    A = activation_masks(shapes, 64)[0].data[:, :, 0]
    r = rasterize_uv(base, 64)
    # footprint oracle: pixels inside triangles touching a moved vertex, minus exact zeros
    # at the footprint's boundary vertices
    touched = np.isin(base.faces, moved).any(1)
    footprint = touched[r.face_id]
    assert not A[~footprint].any()
    interior = footprint & (r.bary.min(axis=2) > 1e-9)
    assert (A[interior] > 0).all()


# --- weight masks ----------------------------------------------------------------

def test_weight_masks_zero_alpha():
    A = const_maps([0.3, 0.9, 1.0])
    K = np.random.default_rng(0).random((4, 3))
    M = weight_masks(A, K, np.zeros(3))
    assert np.all(M[0].data == 1.0) and all(not m.data.any() for m in M[1:])


def test_weight_masks_two_blendshape_toy():
    A = const_maps([1.0, 1.0])
    K = np.eye(2)                               # key i uses only blendshape i
    M = weight_masks(A, K, K[0])
    assert np.all(M[1].data == 1.0) and np.all(M[2].data == 0.0) and np.all(M[0].data == 0.0)
    M = weight_masks(A, K, [0.25, 0.5])
    assert np.allclose(M[1].data, 0.25) and np.allclose(M[2].data, 0.5)
    assert np.allclose(M[0].data, 0.25)


def test_weight_masks_clamp_and_no_cap():
    A = const_maps([1.0, 1.0])
    M = weight_masks(A, np.ones((2, 2)), [1.0, 1.0])     # each M_i = 2
    assert np.all(M[1].data == 2.0) and np.all(M[0].data == 0.0)


def test_weight_masks_dimension_mismatch():
    with pytest.raises(ValidationError):
        weight_masks(const_maps([1, 1]), np.ones((2, 3)), [0, 0])
    with pytest.raises(ValidationError):
        weight_masks(const_maps([1, 1]), np.ones((2, 2)), [0, 1.5])


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_weight_masks_homogeneous_and_bounded(seed, c):
    rng = np.random.default_rng(seed)
    A = [RasterMap(rng.random((6, 6))) for _ in range(5)]
    K = rng.random((3, 5))
    a = rng.random(5)
    M1 = weight_masks(A, K, a)
    Mc = weight_masks(A, K, c * a)
    for m1, mc in zip(M1[1:], Mc[1:]):
        assert np.allclose(mc.data, c * m1.data, rtol=1e-12, atol=1e-15)
    assert all((m.data >= 0).all() for m in M1) and (M1[0].data <= 1).all()


# --- blending --------------------------------------------------------------------

def test_blend_examples():
    rng = np.random.default_rng(0)
    maps = [RasterMap(rng.normal(size=(8, 8))) for _ in range(4)]
    det = KeyExpressionDetails(maps, rng.random((3, 2)))
    ones, zeros = RasterMap(np.ones((8, 8))), RasterMap(np.zeros((8, 8)))
    assert np.array_equal(blend_displacements(det, [ones, zeros, zeros, zeros]).data, maps[0].data)
    assert np.array_equal(blend_displacements(det, [zeros, zeros, ones, zeros]).data, maps[2].data)
    det2 = KeyExpressionDetails(const_maps([0.0, 2.0]), np.zeros((1, 1)))
    half = RasterMap(np.full((8, 8), 0.5))
    assert np.allclose(blend_displacements(det2, [half, half]).data, 1.0)


def test_blend_invalid_propagates_only_with_weight():
    a = np.zeros((4, 4))
    b = np.ones((4, 4))
    b[0, 0] = np.nan
    det = KeyExpressionDetails([RasterMap(a), RasterMap(b)], np.zeros((1, 1)))
    m1 = np.zeros((4, 4))
    m1[0, 0] = 0.5
    out = blend_displacements(det, [RasterMap(1 - m1), RasterMap(m1)])
    assert np.isnan(out.data[0, 0, 0]) and out.valid_mask.sum() == 15
    out = blend_displacements(det, [RasterMap(np.ones((4, 4))), RasterMap(np.zeros((4, 4)))])
    assert out.valid_mask.all()


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_blend_is_linear_in_masks(seed, a, b):
    rng = np.random.default_rng(seed)
    det = KeyExpressionDetails([RasterMap(rng.normal(size=(6, 6))) for _ in range(4)],
                               rng.random((3, 2)))
    m1 = [rng.random((6, 6)) for _ in range(4)]
    m2 = [rng.random((6, 6)) for _ in range(4)]
    lhs = blend_displacements(det, [RasterMap(a * x + b * y) for x, y in zip(m1, m2)]).data
    rhs = (a * blend_displacements(det, [RasterMap(x) for x in m1]).data
           + b * blend_displacements(det, [RasterMap(y) for y in m2]).data)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


# --- rigging -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def rig():
    gen = FaceGenerator(0, 52)
    shapes = BlendshapeSet([gen.mesh(0, k, 41) for k in range(52)])
    K = np.zeros((19, 51))
    K[np.arange(19), np.arange(19)] = 1.0      # key i <-> blendshape i
    maps = [gen.detail_map(k, 256, wrinkles_only=k > 0) for k in range(20)]
    det = KeyExpressionDetails(maps, K)
    return gen, shapes, det, activation_masks(shapes, 256)


def test_rig_base_linear_blend(rig):
    _, shapes, _, _ = rig
    a = np.zeros(51)
    a[[2, 7]] = [0.3, 0.6]
    v = rig_base(shapes, a).vertices
    ref = shapes[0].vertices + 0.3 * (shapes[3].vertices - shapes[0].vertices) \
        + 0.6 * (shapes[8].vertices - shapes[0].vertices)
    assert np.allclose(v, ref)


def test_rig_zero_alpha_is_neutral_detail_exactly(rig):
    _, shapes, det, act = rig
    out = rig_detailed(shapes, det, np.zeros(51), 2, act)
    ref = apply_displacement(shapes.neutral, det.maps[0], 2)
    assert np.array_equal(out.vertices, ref.vertices)
    assert out.n_vertices == ref.n_vertices == (4 * 40 + 1) ** 2


@pytest.mark.parametrize("k", [1, 5])
def test_rig_key_expression_matches_generator(rig, k):
    gen, shapes, det, act = rig
    out = rig_detailed(shapes, det, det.key_weights[k - 1], 2, act)
    dense = gen.detailed_mesh(0, k, 201)
    assert point_to_mesh_distance(out.vertices, dense).mean() < 0.3
