import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from morphface import metrics as M


@pytest.fixture
def cloud():
    return np.random.default_rng(0).normal(0, 30, (200, 3))


def test_rmse_identical_is_zero(cloud):
    assert M.vertex_rmse(cloud, cloud) < 1e-12


def test_rmse_rigid_copy_is_zero_after_alignment(cloud):
    R = Rotation.from_euler("xyz", [0.4, -1.0, 2.0]).as_matrix()
    moved = cloud @ R.T + [10, -5, 300]
    assert M.vertex_rmse(moved, cloud, "rigid") < 1e-9
    assert M.vertex_rmse(cloud, moved, "similarity") < 1e-9
    assert M.vertex_rmse(2.0 * moved, cloud, "similarity") < 1e-9


def test_rmse_without_alignment_reports_offset(cloud):
    assert M.vertex_rmse(cloud + [2.0, 0, 0], cloud, "none") == pytest.approx(2.0)


def test_rmse_errors(cloud):
    with pytest.raises(M.MetricError):
        M.vertex_rmse(cloud[:10], cloud)
    with pytest.raises(M.MetricError):
        M.vertex_rmse(np.zeros((5, 3)), np.zeros((5, 3)))


def test_rmse_alignment_invariant_to_motion_of_either(cloud):
    rng = np.random.default_rng(1)
    other = cloud + rng.normal(0, 1, cloud.shape)
    R = Rotation.from_euler("xyz", [0.1, 0.2, -0.3]).as_matrix()
    base = M.vertex_rmse(other, cloud, "rigid")
    assert M.vertex_rmse(other @ R.T + 4, cloud, "rigid") == pytest.approx(base, rel=1e-9)


def test_iou_examples():
    a = np.zeros((20, 20), int)
    a[0:10, 0:10] = 1
    assert M.lip_iou(a, a)["upper"] == 1.0
    b = np.zeros_like(a)
    b[10:20, 10:20] = 1
    assert M.lip_iou(a, b)["upper"] == 0.0
    c = np.zeros_like(a)
    c[5:15, 0:10] = 1
    assert M.lip_iou(a, c)["upper"] == pytest.approx(1 / 3)
    assert M.lip_iou(a, c)["lower"] is None


def test_expression_energy_examples(small):
    G = small.graph.node_count
    assert M.neutral_expression_energy(small.graph, np.ones((3 * G, 2)), [np.zeros(2)]) == 0
    # every node moved 1 mm in each coordinate -> every vertex too
    Mexp = np.ones((3 * G, 1))
    assert M.expression_energy(small.graph, Mexp, [1.0]) == pytest.approx(3.0)
    with pytest.raises(M.MetricError):
        M.neutral_expression_energy(small.graph, Mexp, [])


def test_subspace_angle_examples():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(10, 3))
    mix = rng.normal(size=(3, 3))
    assert M.subspace_angles(A, A @ mix).max() < 1e-6
    assert M.subspace_angles(A, A[:, ::-1] * [1, 5, -2]).max() < 1e-6
    Q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    assert np.allclose(M.subspace_angles(Q[:, :3], Q[:, 3:6]), 90)
    th = np.radians(37.0)
    a = np.array([[1.0], [0], [0]])
    b = np.array([[np.cos(th)], [np.sin(th)], [0]])
    assert M.subspace_angles(a, b)[0] == pytest.approx(37.0)
    with pytest.raises(M.MetricError):
        M.subspace_angles(np.ones((4, 2)), A[:4, :2])


def test_basis_angles_ignore_similarity_motion(desk_rig, world):
    g, tpl = desk_rig.graph, desk_rig.template
    S = M.similarity_modes(tpl.positions[g.node_ids])
    rng = np.random.default_rng(3)
    leaked = world.model.M_gid + S @ rng.normal(size=(7, 8))
    assert M.basis_angles(g, tpl, leaked, world.model.M_gid).max() < 1e-4


def test_report_aggregates_and_checks():
    items = [{"rmse_similarity": 1.0, "neutral": True, "expression_energy": 0.5},
             {"rmse_similarity": 3.0, "neutral": False, "expression_energy": 2.0}]
    rep = M.EvalReport(items=items, angles={"identity": [1.0, 4.0]})
    agg = rep.aggregate()
    assert agg["rmse_similarity"]["mean"] == 2.0
    assert agg["neutral_energy"] == 0.5
    assert agg["max_angle_identity"] == 4.0
    assert agg["iou_upper"] is None
    assert "skipped" in rep.table()
    rep.items.append({"rmse_similarity": float("nan")})
    with pytest.raises(M.MetricError):
        rep.check()
