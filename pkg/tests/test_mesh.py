import warnings

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from morphface.mesh import (compute_normals, farthest_point_sampling, geodesic_distances, normals_backward,
                            points_in_polygon, scatter_add)


def flat_square():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    return V, np.array([[0, 1, 2], [0, 2, 3]])


def test_flat_square_normals():
    V, T = flat_square()
    assert np.allclose(compute_normals(V, T), [0, 0, 1])


def test_cube_corner_normal():
    # the three faces meeting at (1,1,1), each split along a diagonal through it
    V = np.array([[1.0, 1, 1], [0, 1, 1], [0, 0, 1], [1, 0, 1], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    T = np.array([[0, 1, 2], [0, 2, 3],       # z = 1
                  [0, 3, 4], [0, 4, 5],       # x = 1
                  [0, 5, 6], [0, 6, 1]])      # y = 1
    n = compute_normals(V, T)
    assert np.allclose(n[0], np.ones(3) / np.sqrt(3), atol=1e-12)


def test_normals_rotate_with_mesh(small):
    R = Rotation.from_euler("xyz", [0.3, -0.7, 1.1]).as_matrix()
    V = small.template.positions
    n0 = compute_normals(V, small.template.triangles)
    n1 = compute_normals(V @ R.T, small.template.triangles)
    assert np.abs(n1 - n0 @ R.T).max() < 1e-6
    assert np.allclose(np.linalg.norm(n0, axis=1), 1.0, atol=1e-6)


def test_zero_area_vertex_gets_fallback():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.warns(RuntimeWarning):
        n = compute_normals(V, np.array([[0, 1, 2]]))
    assert np.allclose(n, [0, 0, 1])


def test_normals_backward_matches_finite_differences(small):
    rng = np.random.default_rng(0)
    V = small.template.positions + rng.normal(0, 1.0, small.template.positions.shape)
    T = small.template.triangles
    w = rng.normal(size=V.shape)
    g = normals_backward(V, T, w)
    h = 1e-6
    for idx in rng.choice(V.size, 20, replace=False):
        Vp, Vm = V.copy().ravel(), V.copy().ravel()
        Vp[idx] += h
        Vm[idx] -= h
        num = (np.sum(w * compute_normals(Vp.reshape(V.shape), T))
               - np.sum(w * compute_normals(Vm.reshape(V.shape), T))) / (2 * h)
        assert abs(num - g.ravel()[idx]) <= 1e-5 * max(1.0, abs(num))


def test_scatter_add_accumulates_repeats():
    out = scatter_add([0, 2, 0], np.array([[1.0, 2], [3, 4], [5, 6]]), 3)
    assert np.array_equal(out, [[6, 8], [0, 0], [3, 4]])


def test_geodesic_distances_on_path():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0]])
    d = geodesic_distances(V, np.array([[0, 1, 2]]), [0])
    assert np.allclose(d[0], [0, 1, np.sqrt(2)])


def test_farthest_point_sampling_is_distinct(small):
    ids = farthest_point_sampling(small.template.positions, small.template.triangles, 10)
    assert len(set(ids.tolist())) == 10


def test_points_in_polygon_square():
    sq = np.array([[0.0, 0], [2, 0], [2, 2], [0, 2]])
    inside = points_in_polygon(np.array([[1.0, 1], [3, 1], [-0.5, 0.5], [1.9, 1.9]]), sq)
    assert inside.tolist() == [True, False, False, True]
