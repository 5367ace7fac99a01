"""Per-episode rigid-frame estimation from three fiducials, plus realignment.

Each episode lives in its own drifted frame C_t.  Reading the three fixed
fiducials in that frame and matching them against their known global
positions determines the rigid motion C_0 -> C_t exactly (three
non-collinear correspondences fully constrain a proper rigid motion).
Realignment then maps every positional quantity back to C_0 with the
inverse motion p' = R^T (p - d).

The estimator builds right-handed orthonormal bases on both triads and
takes R = B_obs @ B_ref^T, which is exact for consistent correspondences
and cheap enough for bulk property tests.  When the frame result does not
reproduce the correspondences (noisy readouts), it falls back to the
SVD least-squares fit over the three points with reflection guarding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import AlreadyCalibratedError, DegenerateTriadError, ReflectionRequiredError
from .geometry import RigidTransform, Vec3, _as_vec3
from .projection import StereoRig

CONDITIONING_FLOOR = 1e-6
# residual above this scale-relative threshold switches to the SVD fit
_EXACT_RESIDUAL_TOL = 1e-9
# smallest singular value (relative to largest) at which a det=-1 best fit
# is treated as a genuine reflection rather than rank deficiency
_REFLECTION_SV_TOL = 1e-6


@dataclass(frozen=True)
class FiducialTriad:
    """Ordered, labeled triple of fiducial positions (mm)."""

    p1: Vec3
    p2: Vec3
    p3: Vec3

    def __post_init__(self):
        object.__setattr__(self, "p1", _as_vec3(self.p1))
        object.__setattr__(self, "p2", _as_vec3(self.p2))
        object.__setattr__(self, "p3", _as_vec3(self.p3))

    @staticmethod
    def from_matrix(points: np.ndarray) -> "FiducialTriad":
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape != (3, 3):
            raise ValueError(f"expected (3, 3) point matrix, got {pts.shape}")
        return FiducialTriad(pts[0].copy(), pts[1].copy(), pts[2].copy())

    def as_matrix(self) -> np.ndarray:
        """Rows are p1, p2, p3."""
        return np.stack([self.p1, self.p2, self.p3])


@dataclass(frozen=True)
class CalibrationResult:
    """Estimated global->local motion plus fit diagnostics.

    transform maps C_0 to C_t: p_local = R @ p_global + d.
    residual is the max correspondence error in mm; conditioning is the
    worse (smaller) of the two triads' conditioning numbers.
    """

    transform: RigidTransform
    residual: float
    conditioning: float


def _conditioning_from_list(m) -> float:
    ux, uy, uz = m[3] - m[0], m[4] - m[1], m[5] - m[2]
    wx, wy, wz = m[6] - m[0], m[7] - m[1], m[8] - m[2]
    cx = uy * wz - uz * wy
    cy = uz * wx - ux * wz
    cz = ux * wy - uy * wx
    nu = math.sqrt(ux * ux + uy * uy + uz * uz)
    nw = math.sqrt(wx * wx + wy * wy + wz * wz)
    if nu <= 0.0 or nw <= 0.0:
        return 0.0
    return math.sqrt(cx * cx + cy * cy + cz * cz) / (nu * nw)


def triad_conditioning(triad: FiducialTriad) -> float:
    """Quality in [0, 1]: sin of the angle between the p1->p2 and p1->p3 edges.

    Returns 0.0 for collinear or coincident points.
    """
    return _conditioning_from_list(triad.p1.tolist() + triad.p2.tolist()
                                   + triad.p3.tolist())


def _triad_basis(m):
    """Right-handed orthonormal basis columns (e1, e2, e3) from a 3x3 row matrix."""
    p1x, p1y, p1z, p2x, p2y, p2z, p3x, p3y, p3z = m
    ux, uy, uz = p2x - p1x, p2y - p1y, p2z - p1z
    wx, wy, wz = p3x - p1x, p3y - p1y, p3z - p1z
    nu = math.sqrt(ux * ux + uy * uy + uz * uz)
    e1x, e1y, e1z = ux / nu, uy / nu, uz / nu
    dot = wx * e1x + wy * e1y + wz * e1z
    tx, ty, tz = wx - dot * e1x, wy - dot * e1y, wz - dot * e1z
    nt = math.sqrt(tx * tx + ty * ty + tz * tz)
    e2x, e2y, e2z = tx / nt, ty / nt, tz / nt
    e3x = e1y * e2z - e1z * e2y
    e3y = e1z * e2x - e1x * e2z
    e3z = e1x * e2y - e1y * e2x
    return (e1x, e1y, e1z, e2x, e2y, e2z, e3x, e3y, e3z)


def best_fit_rigid(ref_points: np.ndarray, obs_points: np.ndarray):
    """Least-squares proper rigid motion mapping ref_points onto obs_points.

    Works for any N >= 3 correspondences (rows).  Raises
    ReflectionRequiredError when the unconstrained optimum is a reflection
    and the cross-covariance is far from rank-deficient; with exactly three
    points the covariance has rank <= 2, so the determinant correction is
    always the optimal proper rotation there.
    """
    ref = np.asarray(ref_points, dtype=np.float64)
    obs = np.asarray(obs_points, dtype=np.float64)
    c_ref = ref.mean(axis=0)
    c_obs = obs.mean(axis=0)
    h = (ref - c_ref).T @ (obs - c_obs)
    u, s, vt = np.linalg.svd(h)
    v = vt.T
    sign = float(np.sign(np.linalg.det(v @ u.T)))
    if sign < 0.0 and s[2] > _REFLECTION_SV_TOL * s[0]:
        raise ReflectionRequiredError(
            f"best-fit orthogonal alignment has det -1 (sv ratio {s[2] / s[0]:.3e})")
    rot = v @ np.diag([1.0, 1.0, sign]) @ u.T
    return rot, c_obs - rot @ c_ref


def estimate_transform(reference: FiducialTriad,
                       observed: FiducialTriad) -> CalibrationResult:
    """Solve obs_i = R @ ref_i + d for the episode's global->local motion.

    Noiseless consistent triads are recovered exactly (residual ~1e-15);
    identical triads short-circuit to the exact identity so that zero-drift
    calibration is a true no-op.  Noisy triads get the least-squares fit.
    """
    rm = reference.p1.tolist() + reference.p2.tolist() + reference.p3.tolist()
    om = observed.p1.tolist() + observed.p2.tolist() + observed.p3.tolist()
    conditioning = min(_conditioning_from_list(rm), _conditioning_from_list(om))
    if conditioning <= CONDITIONING_FLOOR:
        raise DegenerateTriadError(
            f"triad conditioning {conditioning:.3e} at or below {CONDITIONING_FLOOR}")

    if rm == om:
        return CalibrationResult(RigidTransform.identity(), 0.0, conditioning)

    br = _triad_basis(rm)
    bo = _triad_basis(om)
    # R = B_obs @ B_ref^T with basis vectors as columns
    rot9 = [
        bo[0] * br[0] + bo[3] * br[3] + bo[6] * br[6],
        bo[0] * br[1] + bo[3] * br[4] + bo[6] * br[7],
        bo[0] * br[2] + bo[3] * br[5] + bo[6] * br[8],
        bo[1] * br[0] + bo[4] * br[3] + bo[7] * br[6],
        bo[1] * br[1] + bo[4] * br[4] + bo[7] * br[7],
        bo[1] * br[2] + bo[4] * br[5] + bo[7] * br[8],
        bo[2] * br[0] + bo[5] * br[3] + bo[8] * br[6],
        bo[2] * br[1] + bo[5] * br[4] + bo[8] * br[7],
        bo[2] * br[2] + bo[5] * br[5] + bo[8] * br[8],
    ]
    c_ref = ((rm[0] + rm[3] + rm[6]) / 3.0,
             (rm[1] + rm[4] + rm[7]) / 3.0,
             (rm[2] + rm[5] + rm[8]) / 3.0)
    c_obs = ((om[0] + om[3] + om[6]) / 3.0,
             (om[1] + om[4] + om[7]) / 3.0,
             (om[2] + om[5] + om[8]) / 3.0)
    dx = c_obs[0] - (rot9[0] * c_ref[0] + rot9[1] * c_ref[1] + rot9[2] * c_ref[2])
    dy = c_obs[1] - (rot9[3] * c_ref[0] + rot9[4] * c_ref[1] + rot9[5] * c_ref[2])
    dz = c_obs[2] - (rot9[6] * c_ref[0] + rot9[7] * c_ref[1] + rot9[8] * c_ref[2])

    def max_residual(r9, t):
        worst = 0.0
        for i in range(3):
            px, py, pz = rm[3 * i], rm[3 * i + 1], rm[3 * i + 2]
            ex = r9[0] * px + r9[1] * py + r9[2] * pz + t[0] - om[3 * i]
            ey = r9[3] * px + r9[4] * py + r9[5] * pz + t[1] - om[3 * i + 1]
            ez = r9[6] * px + r9[7] * py + r9[8] * pz + t[2] - om[3 * i + 2]
            err = math.sqrt(ex * ex + ey * ey + ez * ez)
            if err > worst:
                worst = err
        return worst

    residual = max_residual(rot9, (dx, dy, dz))
    scale = max(map(abs, rm + om))
    if residual <= _EXACT_RESIDUAL_TOL * (1.0 + scale):
        rot = np.array(rot9).reshape(3, 3)
        transform = RigidTransform(rot, np.array([dx, dy, dz]))
        return CalibrationResult(transform, residual, conditioning)

    # noisy readouts: least-squares fit over the three correspondences
    rot, d = best_fit_rigid(np.array(rm).reshape(3, 3), np.array(om).reshape(3, 3))
    transform = RigidTransform(rot, d)
    residual = max_residual(rot.ravel().tolist(), d.tolist())
    return CalibrationResult(transform, residual, conditioning)


def identity_calibration(reference: FiducialTriad | None = None) -> CalibrationResult:
    """Exact no-op calibration (used by the no-calibration ablation)."""
    cond = triad_conditioning(reference) if reference is not None else 1.0
    return CalibrationResult(RigidTransform.identity(), 0.0, cond)


def realign_point(cal: CalibrationResult, p_local: Vec3) -> Vec3:
    """Map a local-frame point back to C_0: R^T (p - d)."""
    t = cal.transform
    if t.is_identity():
        return _as_vec3(p_local).copy()
    return t.rotation.T @ (_as_vec3(p_local) - t.translation)


def realign_points(cal: CalibrationResult, points: np.ndarray) -> np.ndarray:
    """Vectorized realign_point over (N, 3) rows."""
    t = cal.transform
    pts = np.asarray(points, dtype=np.float64)
    if t.is_identity():
        return pts.copy()
    return (pts - t.translation) @ t.rotation


def realign_observation(cal: CalibrationResult, obs: np.ndarray,
                        rig: StereoRig) -> np.ndarray:
    """Realign one 17-dim observation vector (12 features + 5 proprio) to C_0.

    Features are triangulated back to 3D landmarks, realigned, and
    reprojected; proprioception x, y, z are realigned directly; roll and
    gripper are frame-invariant and pass through.
    """
    v = np.asarray(obs, dtype=np.float64)
    if v.shape != (17,):
        raise ValueError(f"expected 17-dim observation, got {v.shape}")
    if cal.transform.is_identity():
        return v.copy()
    out = v.copy()
    landmarks = rig.triangulate(v[:12].reshape(3, 4))
    out[:12] = rig.project(realign_points(cal, landmarks)).ravel()
    out[12:15] = realign_point(cal, v[12:15])
    return out


def rig_from_meta(meta: dict) -> StereoRig:
    """Rebuild the stereo rig an episode was recorded with from its metadata."""
    return StereoRig(
        baseline_mm=float(meta["camera_baseline"]),
        focal=float(meta["camera_focal"]),
        height_mm=float(meta["camera_height"]),
    )


def realign_episode(cal: CalibrationResult, ep, rig: StereoRig | None = None):
    """Realign a whole recorded episode to C_0 (training-data phase 1).

    Positional channels (proprio x/y/z, action x/y/z, projection features)
    are mapped through the inverse motion; roll and gripper are unchanged.
    The fiducial readouts and stored drift stay as recorded.  Raises
    AlreadyCalibratedError if the episode is already flagged.
    """
    from .dataset import EpisodeRecord  # deferred: dataset depends on this module

    if not isinstance(ep, EpisodeRecord):
        raise TypeError(f"expected EpisodeRecord, got {type(ep).__name__}")
    if ep.calibrated:
        raise AlreadyCalibratedError(f"episode seed={ep.seed} already calibrated")
    if rig is None:
        rig = rig_from_meta(ep.meta)
    if cal.transform.is_identity():
        return replace(ep, calibrated=True,
                       observations=ep.observations.copy(),
                       actions=ep.actions.copy())
    obs = ep.observations.copy()
    t = ep.observations.shape[0]
    landmarks = rig.triangulate(ep.observations[:, :12].reshape(t * 3, 4))
    obs[:, :12] = rig.project(realign_points(cal, landmarks)).reshape(t, 12)
    obs[:, 12:15] = realign_points(cal, ep.observations[:, 12:15])
    actions = ep.actions.copy()
    actions[:, :3] = realign_points(cal, ep.actions[:, :3])
    return replace(ep, calibrated=True, observations=obs, actions=actions)
