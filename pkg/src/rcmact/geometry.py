"""Rigid-body primitives shared by calibration, the simulator, and evaluation.

All positions are millimeters, all angles radians, everything float64.
Rotations are stored as 3x3 matrices because the frame estimator produces a
matrix directly and the realignment formulas are written in matrix form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ZeroAxisError

# A Vec3 is a plain float64 ndarray of shape (3,).
Vec3 = np.ndarray

ROTATION_TOL = 1e-9

_IDENTITY3 = np.eye(3)


def vec3(x: float, y: float, z: float) -> Vec3:
    """Build a float64 3-vector."""
    return np.array([x, y, z], dtype=np.float64)


def _as_vec3(p) -> Vec3:
    v = np.asarray(p, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected shape (3,), got {v.shape}")
    return v


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> rotation @ p + translation.

    Invariants enforced at construction: the rotation is orthonormal
    (Frobenius defect < 1e-9), has determinant +1 (within 1e-9), and all
    entries are finite.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be shape (3,), got {t.shape}")
        a, b, c, d, e, f, g, h, i = r.ravel().tolist()
        tx, ty, tz = t.tolist()
        if not all(map(math.isfinite, (a, b, c, d, e, f, g, h, i, tx, ty, tz))):
            raise ValueError("non-finite entries in rigid transform")
        # Frobenius defect of R^T R - I from column dot products (hot path,
        # so no numpy temporaries here)
        c00 = a * a + d * d + g * g - 1.0
        c11 = b * b + e * e + h * h - 1.0
        c22 = c * c + f * f + i * i - 1.0
        c01 = a * b + d * e + g * h
        c02 = a * c + d * f + g * i
        c12 = b * c + e * f + h * i
        defect = math.sqrt(c00 * c00 + c11 * c11 + c22 * c22
                           + 2.0 * (c01 * c01 + c02 * c02 + c12 * c12))
        if defect >= ROTATION_TOL:
            raise ValueError("rotation matrix is not orthonormal")
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant {det} is not +1 (reflection?)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def is_identity(self) -> bool:
        """Exact (bitwise) identity check, used for arithmetic-free fast paths."""
        return (
            np.array_equal(self.rotation, _IDENTITY3)
            and np.array_equal(self.translation, np.zeros(3))
        )


def apply(transform: RigidTransform, p: Vec3) -> Vec3:
    """Map a point through the transform: R @ p + d."""
    return transform.rotation @ _as_vec3(p) + transform.translation


def invert(transform: RigidTransform) -> RigidTransform:
    """Inverse motion: (R^T, -R^T d)."""
    rt = transform.rotation.T
    return RigidTransform(rt.copy(), -(rt @ transform.translation))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a after b: apply(compose(a, b), p) == apply(a, apply(b, p))."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def rotation_from_axis_angle(axis: Vec3, angle: float) -> np.ndarray:
    """Rodrigues rotation about `axis` (normalized internally) by `angle` rad.

    Raises ZeroAxisError when the axis norm is at or below 1e-12.  For
    angle == 0.0 the result is the exact identity matrix.
    """
    ax = _as_vec3(axis)
    norm = math.sqrt(float(ax @ ax))
    if norm <= 1e-12:
        raise ZeroAxisError(f"axis norm {norm} too small")
    x, y, z = (ax / norm).tolist()
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = math.sin(angle)
    c1 = 1.0 - math.cos(angle)
    return np.eye(3) + s * k + c1 * (k @ k)
