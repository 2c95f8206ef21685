import dataclasses
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphface.model import (DimensionError, GraphConstructionError, MorphableModel, assemble_geometry,
                             assemble_reflectance, build_upsampling, init_model, load_model,
                             model_from_bytes, model_to_bytes, orthogonality_residual,
                             orthogonalize_identity, save_model)


def dense_U(graph):
    return np.kron(graph.weights.toarray(), np.eye(3))


def random_model(graph, template, dims, seed=0):
    rng = np.random.default_rng(seed)
    G, N = graph.node_count, template.vertex_count
    m_i, m_e, m_r = dims
    return MorphableModel(rng.normal(size=(3 * G, m_i)), rng.normal(size=(3 * G, m_e)),
                          rng.normal(size=(3 * N, m_r)))


# --- build_upsampling -------------------------------------------------------

def test_all_vertices_as_nodes_gives_identity(small):
    tpl = dataclasses.replace(small.template, graph_node_ids=np.arange(small.template.vertex_count))
    g = build_upsampling(tpl, k=1)
    assert np.array_equal(g.weights.toarray(), np.eye(tpl.vertex_count))


def test_constant_graph_deformation_is_reproduced(small):
    d = np.tile([1.0, 2.0, 3.0], small.graph.node_count)
    assert np.allclose(small.graph.upsample(d), [1.0, 2.0, 3.0], atol=1e-12)
    assert np.allclose(dense_U(small.graph) @ d, d[:3].tolist() * small.template.vertex_count)


def test_equidistant_vertex_gets_equal_weights():
    # vertex 2 is one edge-length from both nodes
    mesh = SimpleNamespace(positions=np.array([[0.0, 0, 0], [2, 0, 0], [1, 1, 0]]),
                           triangles=np.array([[0, 1, 2]]), graph_node_ids=np.array([0, 1]))
    g = build_upsampling(mesh, k=2)
    assert np.allclose(g.weights.toarray()[2], [0.5, 0.5])


def test_partition_of_unity_and_bounded_support(desk_rig):
    W = desk_rig.graph.weights
    assert np.allclose(np.asarray(W.sum(axis=1)).ravel(), 1.0)
    assert W.min() >= 0
    assert np.diff(W.indptr).max() <= 4


def test_vertex_outside_radius_is_named(small):
    with pytest.raises(GraphConstructionError, match="vertex"):
        build_upsampling(small.template, radius=1e-3)


def test_k_must_be_positive(small):
    with pytest.raises(GraphConstructionError):
        build_upsampling(small.template, k=0)


# --- assembly -----------------------------------------------------------------

def test_zero_coefficients_give_mean(small):
    m = random_model(small.graph, small.template, (3, 2, 3))
    V = assemble_geometry(small.template, small.graph, m, np.zeros(3), np.zeros(2))
    assert np.array_equal(V, small.template.positions)
    assert np.array_equal(assemble_reflectance(small.template, m, np.zeros(3)), small.template.reflectance)


def test_constant_column_matches_dense_product(small):
    G = small.graph.node_count
    c = np.random.default_rng(3).normal(size=3 * G)
    m = MorphableModel(c[:, None], np.zeros((3 * G, 1)), np.zeros((3 * small.template.vertex_count, 1)))
    V = assemble_geometry(small.template, small.graph, m, [2.0], [0.0])
    expect = small.template.positions.ravel() + 2.0 * dense_U(small.graph) @ c
    assert np.allclose(V.ravel(), expect, atol=1e-12)


def test_uniform_red_column_shifts_red_channel(small):
    N = small.template.vertex_count
    col = np.zeros((N, 3))
    col[:, 0] = 0.1
    m = MorphableModel(np.zeros((3 * small.graph.node_count, 1)), np.zeros((3 * small.graph.node_count, 1)),
                       col.reshape(-1, 1))
    R = assemble_reflectance(small.template, m, [1.0])
    assert np.allclose(R[:, 0], small.template.reflectance[:, 0] + 0.1)
    assert np.array_equal(R[:, 1:], small.template.reflectance[:, 1:])


def test_reflectance_is_not_clamped(small):
    N = small.template.vertex_count
    m = MorphableModel(np.zeros((3 * small.graph.node_count, 1)), np.zeros((3 * small.graph.node_count, 1)),
                       np.ones((3 * N, 1)))
    assert assemble_reflectance(small.template, m, [5.0]).max() > 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_geometry_superposition(seed):
    from morphface.gradcheck import small_rig
    rig = small_rig(16)
    m = random_model(rig.graph, rig.template, (3, 2, 3), seed)
    rng = np.random.default_rng(seed)
    a1, a2, d = rng.normal(size=3), rng.normal(size=3), rng.normal(size=2)
    f = lambda a, dd: assemble_geometry(rig.template, rig.graph, m, a, dd)
    res = f(a1 + a2, d) - f(a1, d) - f(a2, np.zeros(2)) + f(np.zeros(3), np.zeros(2))
    assert np.abs(res).max() < 1e-9
    b1, b2 = rng.normal(size=3), rng.normal(size=3)
    g = lambda b: assemble_reflectance(rig.template, m, b)
    assert np.abs(g(b1 + b2) - g(b1) - g(b2) + g(np.zeros(3))).max() < 1e-12


def test_geometry_jacobians_match_finite_differences(small):
    rng = np.random.default_rng(5)
    m = random_model(small.graph, small.template, (3, 2, 3))
    a, d = rng.normal(size=3), rng.normal(size=2)
    U = dense_U(small.graph)
    h = 1e-6
    # dV/dalpha = U M_gid, dV/dM_gid[r, j] = U[:, r] alpha_j
    f = lambda mm, aa, dd: assemble_geometry(small.template, small.graph, mm, aa, dd).ravel()
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        num = (f(m, a + e, d) - f(m, a - e, d)) / (2 * h)
        assert np.allclose(num, U @ m.M_gid[:, j], rtol=1e-5, atol=1e-8)
    for r, j in [(0, 0), (7, 1), (20, 2)]:
        mp, mm = m.copy(), m.copy()
        mp.M_gid[r, j] += h
        mm.M_gid[r, j] -= h
        num = (f(mp, a, d) - f(mm, a, d)) / (2 * h)
        assert np.allclose(num, U[:, r] * a[j], rtol=1e-5, atol=1e-8)
    for r, j in [(3, 0), (11, 1)]:
        mp, mm = m.copy(), m.copy()
        mp.M_gexp[r, j] += h
        mm.M_gexp[r, j] -= h
        num = (f(mp, a, d) - f(mm, a, d)) / (2 * h)
        assert np.allclose(num, U[:, r] * d[j], rtol=1e-5, atol=1e-8)


def test_dimension_mismatch_raises(small):
    m = random_model(small.graph, small.template, (3, 2, 3))
    with pytest.raises(DimensionError):
        assemble_geometry(small.template, small.graph, m, np.zeros(4), np.zeros(2))
    with pytest.raises(DimensionError):
        assemble_reflectance(small.template, m, np.zeros(2))


# --- orthogonalization ----------------------------------------------------------

def test_zero_expression_leaves_identity_unchanged(small):
    m = random_model(small.graph, small.template, (3, 2, 3))
    m.M_gexp[:] = 0
    assert np.array_equal(orthogonalize_identity(m, small.graph).M_gid, m.M_gid)


def test_shared_column_maps_to_zero(small):
    m = random_model(small.graph, small.template, (3, 2, 3))
    m.M_gid[:, 1] = m.M_gexp[:, 0]
    out = orthogonalize_identity(m, small.graph)
    assert np.abs(out.M_gid[:, 1]).max() < 1e-10


def test_orthogonalization_matches_qr_projector(small):
    m = random_model(small.graph, small.template, (2, 2, 1), seed=9)
    out = orthogonalize_identity(m, small.graph)
    U = dense_U(small.graph)
    A, B = U @ m.M_gexp, U @ m.M_gid
    Q, _ = np.linalg.qr(A)
    expect = B - Q @ (Q.T @ B)
    assert np.allclose(U @ out.M_gid, expect, atol=1e-10)
    assert np.abs(A.T @ (U @ out.M_gid)).max() < 1e-8


def test_orthogonalization_is_idempotent_and_scaled_small(desk_rig):
    m = init_model(desk_rig.template, desk_rig.graph, (8, 6, 8), seed=2)
    once = orthogonalize_identity(m, desk_rig.graph)
    twice = orthogonalize_identity(once, desk_rig.graph)
    res, scale = orthogonality_residual(once, desk_rig.graph)
    assert res <= 1e-8 * scale
    assert np.linalg.norm(twice.M_gid - once.M_gid) <= 1e-10 * np.linalg.norm(once.M_gid)


def test_rank_deficient_expression_warns(small):
    m = random_model(small.graph, small.template, (2, 2, 1))
    m.M_gexp[:, 1] = m.M_gexp[:, 0]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = orthogonalize_identity(m, small.graph)
    assert any("rank deficient" in str(x.message) for x in w)
    A = dense_U(small.graph) @ m.M_gexp
    assert np.abs(A.T @ (dense_U(small.graph) @ out.M_gid)).max() < 1e-8


# --- model files ----------------------------------------------------------------

def test_model_file_roundtrip(tmp_path, small):
    m = random_model(small.graph, small.template, (3, 2, 3))
    assert np.array_equal(model_from_bytes(model_to_bytes(m)).M_R, m.M_R)
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.digest() == m.digest()
    with pytest.raises(ValueError):
        model_from_bytes(b"XXXX" + model_to_bytes(m)[4:])


def test_model_check_rejects_nonfinite(small):
    m = random_model(small.graph, small.template, (3, 2, 3))
    m.M_R[0, 0] = np.nan
    with pytest.raises(DimensionError):
        m.check()
