"""Pinhole cameras and rotation helpers.

Conventions: world-to-camera ``x_cam = R @ x_world + t``; the camera looks down
its +z axis with +x right and +y down in the image, so pixel coordinates are
``u = fx * x / z + cx`` and ``v = fy * y / z + cy``. Pixel ``(row i, col j)``
has its center at ``(u, v) = (j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass
class Camera:
    K: Intrinsics
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction (optical axis) in world coordinates."""
        return self.R[2]

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        return x @ self.R.T + self.t

    def project(self, x: np.ndarray):
        """Project world points; returns ``(uv, depth)``."""
        xc = self.world_to_camera(x)
        z = xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K.fx * xc[..., 0] / z + self.K.cx
            v = self.K.fy * xc[..., 1] / z + self.K.cy
        return np.stack([u, v], axis=-1), z

    def scaled(self, width: int, height: int) -> "Camera":
        return Camera(self.K.scaled(width, height), self.R.copy(), self.t.copy())


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """Rotation and translation of a camera at ``position`` facing ``target``.

    World +y is up, which maps to image -v.
    """
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ position


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Axis-angle vector to rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0.0]])


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in radians."""
    c = (np.trace(Ra.T @ Rb) - 1) / 2
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rodrigues_t(omega) -> dc.Tensor:
    """Differentiable axis-angle to rotation matrix.

    Uses the Taylor expansion of ``sin(x)/x`` and ``(1 - cos x)/x**2`` near zero
    so the gradient at ``omega = 0`` is exact.
    """
    omega = dc._lift(omega)
    w0, w1, w2 = omega[0], omega[1], omega[2]
    zero = dc.Tensor(0.0)
    K = dc.stack([dc.stack([zero, -w2, w1]), dc.stack([w2, zero, -w0]),
                  dc.stack([-w1, w0, zero])])
    th2 = dc.sum(dc.square(omega))
    small = th2.data < 1e-8
    th = dc.sqrt(dc.where(small, 1.0, th2))
    a = dc.where(small, 1.0 - th2 / 6.0, dc.sin(th) / th)
    b = dc.where(small, 0.5 - th2 / 24.0, (1.0 - dc.cos(th)) / dc.where(small, 1.0, th2))
    return dc.Tensor(np.eye(3)) + a * K + b * (K @ K)
