"""Two-pinhole stereo feature model standing in for microscope imagery.

Two cameras hang a fixed height above the workspace center, optical axes
parallel and pointing straight down, separated along x by the baseline.
A world point (x, y, z) has camera-frame depth Z = height - z and projects
to u = focal * (x - cx) / Z, v = focal * y / Z per camera.

The pair of views makes the mapping invertible: `triangulate` recovers the
3D point from the four image coordinates, which is what lets episode
realignment rebuild projection features in the global frame without storing
raw landmark positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError

CAMERA_HEIGHT_MM = 30.0


@dataclass(frozen=True)
class StereoRig:
    baseline_mm: float = 10.0
    focal: float = 30.0
    height_mm: float = CAMERA_HEIGHT_MM

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 3) world points to (N, 4) features [u1, v1, u2, v2].

        Raises BehindCameraError if any point has non-positive depth.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        depth = self.height_mm - pts[:, 2]
        if np.any(depth <= 0.0):
            raise BehindCameraError(
                f"landmark depth min {depth.min():.3f} mm is not positive")
        half = 0.5 * self.baseline_mm
        u1 = self.focal * (pts[:, 0] + half) / depth
        u2 = self.focal * (pts[:, 0] - half) / depth
        v = self.focal * pts[:, 1] / depth
        return np.stack([u1, v, u2, v], axis=1)

    def triangulate(self, features: np.ndarray) -> np.ndarray:
        """Invert `project`: (N, 4) features [u1, v1, u2, v2] to (N, 3) points."""
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        disparity = feats[:, 0] - feats[:, 2]
        if np.any(disparity <= 0.0):
            raise BehindCameraError("non-positive disparity implies depth <= 0")
        depth = self.focal * self.baseline_mm / disparity
        x = feats[:, 0] * depth / self.focal - 0.5 * self.baseline_mm
        y = 0.5 * (feats[:, 1] + feats[:, 3]) * depth / self.focal
        z = self.height_mm - depth
        return np.stack([x, y, z], axis=1)
