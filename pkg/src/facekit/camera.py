"""Camera models: weak perspective and pinhole perspective.

Camera frame convention: the camera looks down ``+z``; for the perspective
model a point is in front of the camera when its camera-frame ``z > 0``.
Parameter vectors used by the optimisers are

* weak perspective: ``[qw, qx, qy, qz, scale, tx, ty]``
* perspective:      ``[qw, qx, qy, qz, focal, tx, ty, tz]``

The quaternion is normalised on use, so any non-zero 4-vector is a valid
rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

WEAK = "weak_perspective"
PERSPECTIVE = "perspective"


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q * np.sign(q[0]) if q[0] != 0 else q


def axis_angle_quat(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = np.deg2rad(degrees) / 2
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def rotation_angle_deg(q1, q2):
    """Geodesic angle between two rotations, in degrees."""
    R = quat_to_matrix(q1).T @ quat_to_matrix(q2)
    c = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    return float(np.rad2deg(np.arccos(c)))


def quat_matrix_jacobian(q):
    """``dR/dq`` of shape (4, 3, 3) including the normalisation of ``q``."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    w, x, y, z = q / norm
    dR = np.empty((4, 3, 3))
    dR[0] = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dR[1] = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR[2] = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dR[3] = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    qbar = q / norm
    dnorm = (np.eye(4) - np.outer(qbar, qbar)) / norm  # d qbar_m / d q_k
    return np.einsum("mk,mij->kij", dnorm, dR)


@dataclass
class CameraParams:
    mode: str = WEAK
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: float = 1.0
    focal_length: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    principal_point: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if self.mode not in (WEAK, PERSPECTIVE):
            raise ValidationError(f"unknown camera mode {self.mode!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(self.rotation)
        if not norm > 0:
            raise ValidationError("camera rotation quaternion is zero")
        self.rotation = self.rotation / norm
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        t = np.asarray(self.translation, dtype=np.float64).ravel()
        if self.mode == WEAK:
            if t.size != 2:
                raise ValidationError("weak-perspective translation is 2D (pixels)")
            if not self.scale > 0:
                raise ValidationError("camera scale must be positive")
        else:
            if t.size != 3:
                raise ValidationError("perspective translation is 3D (mm)")
            if not self.focal_length > 0:
                raise ValidationError("focal length must be positive")
        self.translation = t
        self.scale = float(self.scale)
        self.focal_length = float(self.focal_length)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def n_params(self):
        return 7 if self.mode == WEAK else 8

    def to_vector(self):
        k = self.scale if self.mode == WEAK else self.focal_length
        return np.concatenate([self.rotation, [k], self.translation])

    def with_vector(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.mode == WEAK:
            return CameraParams(WEAK, x[:4], scale=x[4], translation=x[5:7],
                                principal_point=self.principal_point)
        return CameraParams(PERSPECTIVE, x[:4], focal_length=x[4], translation=x[5:8],
                            principal_point=self.principal_point)

    def to_camera_frame(self, points):
        """Rigidly move world points into the camera frame (no projection)."""
        p = np.asarray(points, dtype=np.float64) @ self.R.T
        if self.mode == PERSPECTIVE:
            p = p + self.translation
        return p

    def from_camera_frame(self, points):
        p = np.asarray(points, dtype=np.float64)
        if self.mode == PERSPECTIVE:
            p = p - self.translation
        return p @ self.R

    def to_dict(self):
        d = {"mode": self.mode, "rotation": self.rotation.tolist(),
             "translation": self.translation.tolist(),
             "principal_point": self.principal_point.tolist()}
        if self.mode == WEAK:
            d["scale"] = self.scale
        else:
            d["focal_length"] = self.focal_length
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"mode", "rotation", "translation", "principal_point", "scale", "focal_length"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown camera keys: {sorted(unknown)}")
        return cls(mode=d.get("mode", WEAK), rotation=d.get("rotation", [1, 0, 0, 0]),
                   scale=d.get("scale", 1.0), focal_length=d.get("focal_length", 1.0),
                   translation=d.get("translation", [0, 0] if d.get("mode", WEAK) == WEAK
                                     else [0, 0, 0]),
                   principal_point=d.get("principal_point", [0, 0]))


def project(camera: CameraParams, points3d, return_valid=False):
    """Project ``(N, 3)`` world points to ``(N, 2)`` pixels.

    For perspective cameras, points with camera-frame ``z <= 0`` are behind
    the camera; their projections are NaN and ``valid`` is False.
    """
    p = np.asarray(points3d, dtype=np.float64)
    c = p @ camera.R.T
    if camera.mode == WEAK:
        out = camera.scale * c[:, :2] + camera.translation + camera.principal_point
        valid = np.ones(len(p), bool)
    else:
        c = c + camera.translation
        valid = c[:, 2] > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            out = camera.focal_length * c[:, :2] / c[:, 2:3] + camera.principal_point
        out[~valid] = np.nan
    return (out, valid) if return_valid else out


def projection_jacobians(camera: CameraParams, points3d):
    """Jacobians of :func:`project` for every point.

    Returns ``(uv, J_points, J_camera)`` with shapes (N, 2), (N, 2, 3) and
    (N, 2, n_params), where camera parameters follow :meth:`CameraParams.to_vector`.
    """
    p = np.asarray(points3d, dtype=np.float64)
    R = camera.R
    dR = quat_matrix_jacobian(camera.rotation)
    c = p @ R.T
    dc_dq = np.einsum("kij,nj->nik", dR, p)  # (N, 3, 4)
    n = len(p)
    if camera.mode == WEAK:
        s = camera.scale
        uv = s * c[:, :2] + camera.translation + camera.principal_point
        J_p = np.broadcast_to(s * R[:2], (n, 2, 3)).copy()
        J_c = np.zeros((n, 2, 7))
        J_c[:, :, :4] = s * dc_dq[:, :2, :]
        J_c[:, :, 4] = c[:, :2]
        J_c[:, 0, 5] = 1.0
        J_c[:, 1, 6] = 1.0
        return uv, J_p, J_c
    f = camera.focal_length
    c = c + camera.translation
    z = c[:, 2]
    uv = f * c[:, :2] / z[:, None] + camera.principal_point
    d_uv_dc = np.zeros((n, 2, 3))
    d_uv_dc[:, 0, 0] = f / z
    d_uv_dc[:, 1, 1] = f / z
    d_uv_dc[:, 0, 2] = -f * c[:, 0] / z ** 2
    d_uv_dc[:, 1, 2] = -f * c[:, 1] / z ** 2
    J_p = d_uv_dc @ R
    J_c = np.zeros((n, 2, 8))
    J_c[:, :, :4] = d_uv_dc @ dc_dq
    J_c[:, :, 4] = c[:, :2] / z[:, None]
    J_c[:, :, 5:8] = d_uv_dc
    return uv, J_p, J_c
