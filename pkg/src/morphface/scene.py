"""Rigid pose, pinhole projection and spherical-harmonics Lambertian shading.

Conventions (used everywhere in the package):

* Euler angles ``(a, b, c)`` are intrinsic X-then-Y-then-Z, so
  ``R = Rx(a) @ Ry(b) @ Rz(c)``.
* The camera sits at the origin looking down +z with image x to the right and
  image y down: ``u = cx + f x / z``, ``v = cy + f y / z``.  Pixel (row r,
  column c) has its centre at ``(c + 0.5, r + 0.5)``.
* Real SH, bands 0..2, in the order
  ``1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2`` with constants
  0.2820948, 0.4886025 (x3), 1.0925484, 1.0925484, 0.3153916, 1.0925484, 0.5462742.
* Lighting ``gamma`` is channel-major, shape (3, 9).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.2820948
SH_C1 = 0.4886025
SH_C2 = 1.0925484
SH_C3 = 0.3153916
SH_C4 = 0.5462742
NEAR = 1e-6


class ProjectionError(ValueError):
    pass


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def euler_matrix(angles):
    a, b, c = angles
    return _rx(a) @ _ry(b) @ _rz(c)


def euler_derivatives(angles):
    """The three partial derivatives dR/da, dR/db, dR/dc."""
    a, b, c = angles
    X, Y, Z = _rx(a), _ry(b), _rz(c)
    return np.stack([_drx(a) @ Y @ Z, X @ _dry(b) @ Z, X @ Y @ _drz(c)])


def rotation_angle_between(R1, R2):
    """Geodesic angle (radians) between two rotation matrices."""
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass
class RigidPose:
    rotation: np.ndarray      # 3 Euler angles, radians
    translation: np.ndarray   # 3 values, model units

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @property
    def matrix(self):
        return euler_matrix(self.rotation)


def apply_pose(v, pose):
    """phi(v) = Rot v + t for a point (3,) or points (N, 3)."""
    v = np.asarray(v, dtype=float)
    return v @ pose.matrix.T + pose.translation


def pose_backward(V, pose, g_out):
    """Gradients of ``apply_pose`` for points ``V`` (N, 3) given dL/d(output) (N, 3).

    Returns (g_V, g_rotation(3,), g_translation(3,)).
    """
    R = pose.matrix
    dR = euler_derivatives(pose.rotation)
    g_V = g_out @ R
    # out_n = R v_n  ->  dL/dR = sum_n g_n v_n^T
    GR = g_out.T @ V
    g_rot = np.einsum("kij,ij->k", dR, GR)
    return g_V, g_rot, g_out.sum(axis=0)


@dataclass
class Camera:
    focal: float
    principal: tuple
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def for_template(cls, template, width=240, height=None, distance=500.0, coverage=0.75):
        """Fixed intrinsics so the template at ``rest_translation`` spans ``coverage`` of the frame."""
        height = width if height is None else height
        ext = template.positions.max(0) - template.positions.min(0)
        zmin = distance + template.positions[:, 2].min()
        f = min(coverage * width * zmin / ext[0], coverage * height * zmin / ext[1])
        return cls(focal=float(f), principal=(width / 2.0, height / 2.0), width=width, height=height)

    def to_dict(self):
        return {"focal": self.focal, "principal": list(self.principal),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["focal"], tuple(d["principal"]), d["width"], d["height"])


REST_DISTANCE = 500.0


def rest_translation():
    return np.array([0.0, 0.0, REST_DISTANCE])


def project(v_cam, camera):
    """Pinhole projection of camera-space points (3,) or (N, 3) to pixels."""
    v = np.asarray(v_cam, dtype=float)
    z = v[..., 2]
    if np.any(z <= NEAR):
        raise ProjectionError("point at or behind the camera plane")
    f = camera.focal
    cx, cy = camera.principal
    return np.stack([cx + f * v[..., 0] / z, cy + f * v[..., 1] / z], axis=-1)


def project_backward(v_cam, camera, g_p):
    """dL/dv_cam for points (N, 3) given dL/dp (N, 2)."""
    x, y, z = v_cam[:, 0], v_cam[:, 1], v_cam[:, 2]
    f = camera.focal
    gu, gv = g_p[:, 0], g_p[:, 1]
    return np.column_stack([f * gu / z, f * gv / z, -f * (gu * x + gv * y) / z ** 2])


def sh_basis(n, check=True):
    """Nine real SH values at unit direction(s) ``n`` (3,) or (N, 3)."""
    n = np.asarray(n, dtype=float)
    if check and np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-6):
        raise ValueError("sh_basis expects unit normals")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2 * x * y, SH_C2 * y * z, SH_C3 * (3 * z * z - 1), SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_backward(n, g_H):
    """dL/dn (N, 3) given dL/dH (N, 9); treats n as an unconstrained 3-vector."""
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    g = g_H
    gx = SH_C1 * g[:, 3] + SH_C2 * (y * g[:, 4] + z * g[:, 7]) + 2 * SH_C4 * x * g[:, 8]
    gy = SH_C1 * g[:, 1] + SH_C2 * (x * g[:, 4] + z * g[:, 5]) - 2 * SH_C4 * y * g[:, 8]
    gz = SH_C1 * g[:, 2] + SH_C2 * (y * g[:, 5] + x * g[:, 7]) + 6 * SH_C3 * z * g[:, 6]
    return np.column_stack([gx, gy, gz])


def shade(r, n, gamma):
    """c_ch = r_ch * sum_b gamma[ch, b] H_b(n); works per point or for (N, 3) arrays."""
    gamma = np.asarray(gamma, dtype=float).reshape(3, 9)
    H = sh_basis(n, check=False)
    return np.asarray(r, dtype=float) * (H @ gamma.T)


def shade_backward(r, n, gamma, g_c):
    """Gradients of :func:`shade` for arrays r (N, 3), n (N, 3); returns (g_r, g_n, g_gamma)."""
    gamma = np.asarray(gamma, dtype=float).reshape(3, 9)
    H = sh_basis(n, check=False)
    irr = H @ gamma.T
    g_r = g_c * irr
    g_irr = g_c * r
    g_gamma = g_irr.T @ H
    g_n = sh_basis_backward(n, g_irr @ gamma)
    return g_r, g_n, g_gamma
