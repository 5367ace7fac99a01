"""Deterministic kinematic world for the ring grasp-and-place task.

The physical world lives in the global frame C_0: two rings on the z = 0
plane, a tool tip with roll and gripper channels, and a success check on
in-plane placement accuracy.  Each episode additionally carries a rigid
"drift" transform modeling the shifted pivot point: every readout the
robot sees (observations, fiducials) and every command it issues is
expressed in the drifted local frame C_t, p_local = drift(p_global).
That frame inconsistency across episodes is the data pathology the
calibration stage exists to remove.

Motion is kinematic only: the tip moves toward the commanded target with
a clamped per-step displacement; grasping is a proximity + gripper-
threshold event, and a held ring tracks the tip rigidly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import FiducialTriad
from .errors import InvalidConfigError
from .geometry import RigidTransform, Vec3, apply, rotation_from_axis_angle, vec3
from .projection import CAMERA_HEIGHT_MM, StereoRig

# actuator limits per control step; the gripper rate is deliberately slow so
# that closing spans several control steps with the tip settled at the target
MAX_STEP_MM = 0.5
MAX_ROLL_STEP_RAD = 0.1
MAX_GRIPPER_STEP = 0.125

GRASP_RADIUS_MM = 0.3
GRIPPER_THRESHOLD = 0.5
MIN_RING_SEPARATION_MM = 2.0
HOME_HEIGHT_FRACTION = 0.6

FRAME_LOCAL = "local"
FRAME_GLOBAL = "global"

# substream ids for per-episode randomness (seeded as [seed, stream])
_STREAM_LAYOUT = 0
_STREAM_DRIFT = 1
_STREAM_FIDUCIAL = 2
STREAM_EXPERT_JITTER = 3
STREAM_POSTERIOR_Z = 4


def _default_fiducials() -> FiducialTriad:
    return FiducialTriad(vec3(-5.0, -5.0, 0.0), vec3(5.0, -5.0, 0.0),
                         vec3(-5.0, 5.0, 0.0))


@dataclass(frozen=True)
class WorldConfig:
    black_ring_diameter: float = 1.22
    orange_ring_diameter: float = 4.02
    workspace_half_extent: float = 10.0
    rcm_reference: Vec3 = field(default_factory=lambda: vec3(0.0, 0.0, 25.0))
    fiducial_reference: FiducialTriad = field(default_factory=_default_fiducials)
    drift_translation_max: float = 1.0
    drift_rotation_max: float = 0.087  # ~5 degrees
    fiducial_noise_sigma: float = 0.0
    control_rate_hz: float = 10.0
    success_tolerance: float = 0.15
    time_limit_steps: int = 250
    camera_baseline: float = 10.0
    camera_focal: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "rcm_reference",
                           np.asarray(self.rcm_reference, dtype=np.float64))

    def validate(self) -> None:
        if not (0.0 < self.black_ring_diameter < self.orange_ring_diameter):
            raise InvalidConfigError("need 0 < black diameter < orange diameter")
        if self.workspace_half_extent <= 0.0:
            raise InvalidConfigError("workspace_half_extent must be positive")
        if self.success_tolerance <= 0.0:
            raise InvalidConfigError("success_tolerance must be positive")
        if self.control_rate_hz <= 0.0:
            raise InvalidConfigError("control_rate_hz must be positive")
        if self.time_limit_steps <= 0:
            raise InvalidConfigError("time_limit_steps must be positive")
        if self.drift_translation_max < 0.0 or self.drift_rotation_max < 0.0:
            raise InvalidConfigError("drift magnitudes must be non-negative")
        if self.fiducial_noise_sigma < 0.0:
            raise InvalidConfigError("fiducial_noise_sigma must be non-negative")
        if self.camera_baseline <= 0.0 or self.camera_focal <= 0.0:
            raise InvalidConfigError("camera parameters must be positive")
        if self.workspace_half_extent >= CAMERA_HEIGHT_MM:
            raise InvalidConfigError("workspace reaches the camera plane")

    def rig(self) -> StereoRig:
        return StereoRig(self.camera_baseline, self.camera_focal, CAMERA_HEIGHT_MM)

    def home_pose(self) -> Vec3:
        return vec3(0.0, 0.0, HOME_HEIGHT_FRACTION * self.workspace_half_extent)


@dataclass(frozen=True)
class WorldState:
    tip: Vec3
    roll: float
    gripper: float
    black_ring_center: Vec3
    orange_ring_center: Vec3
    holding: bool
    drift: RigidTransform
    step_index: int
    rng_state: int  # episode seed; per-purpose streams derive from it
    grasp_frame: int | None = None          # ring actually attached
    grasp_attempt_frame: int | None = None  # first closing past the threshold
    release_occurred: bool = False
    last_target_clamped: bool = False


@dataclass(frozen=True)
class ObservationFrame:
    """12 projection features + 5 proprioception values.

    features lays out [u1, v1, u2, v2] per landmark in the order
    (black ring, orange ring, tool tip); proprio is [x, y, z, roll, gripper]
    in the frame named by frame_tag.
    """

    proprio: np.ndarray
    features: np.ndarray
    frame_tag: str

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.features, self.proprio])


# An action is a plain float64 array [x, y, z, roll, gripper]: the target
# end-effector state in the episode's local frame.
ActionVector = np.ndarray


@dataclass(frozen=True)
class TaskOutcome:
    grasped: bool
    placed: bool
    success: bool
    grasp_frame: int | None
    final_error: float
    steps_used: int
    # where/when the gripper first closed, whether or not a ring was caught;
    # grasp metrics compare initiation events, success counts attachments
    grasp_attempt_frame: int | None = None


def _sample_ring_centers(rng: np.random.Generator, half: float) -> tuple[Vec3, Vec3]:
    for _ in range(100):
        bx = rng.uniform(-0.70 * half, -0.15 * half)
        by = rng.uniform(-0.5 * half, 0.5 * half)
        ox = rng.uniform(0.15 * half, 0.70 * half)
        oy = rng.uniform(-0.5 * half, 0.5 * half)
        black = vec3(bx, by, 0.0)
        orange = vec3(ox, oy, 0.0)
        if np.linalg.norm(black - orange) >= MIN_RING_SEPARATION_MM:
            return black, orange
    raise InvalidConfigError("could not place rings with required separation")


def _sample_drift(rng: np.random.Generator, config: WorldConfig) -> RigidTransform:
    """Rotation about the nominal pivot point plus a translation offset."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-9:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, config.drift_rotation_max)
    direction = rng.normal(size=3)
    while np.linalg.norm(direction) < 1e-9:
        direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    shift = direction * rng.uniform(0.0, config.drift_translation_max)
    rot = rotation_from_axis_angle(axis, angle)
    pivot = config.rcm_reference
    # T(p) = R (p - pivot) + pivot + shift
    return RigidTransform(rot, pivot - rot @ pivot + shift)


def reset(config: WorldConfig, seed: int) -> WorldState:
    """Deterministic fresh episode: random ring layout and pivot drift."""
    config.validate()
    if seed < 0:
        raise InvalidConfigError("seed must be non-negative")
    black, orange = _sample_ring_centers(
        np.random.default_rng([seed, _STREAM_LAYOUT]), config.workspace_half_extent)
    drift = _sample_drift(np.random.default_rng([seed, _STREAM_DRIFT]), config)
    return WorldState(
        tip=config.home_pose(),
        roll=0.0,
        gripper=1.0,
        black_ring_center=black,
        orange_ring_center=orange,
        holding=False,
        drift=drift,
        step_index=0,
        rng_state=seed,
    )


def _to_global_target(state: WorldState, target_local: np.ndarray) -> np.ndarray:
    d = state.drift
    if d.is_identity():
        return target_local.copy()
    return d.rotation.T @ (target_local - d.translation)


def local_action(state: WorldState, action_global: np.ndarray) -> np.ndarray:
    """Express a global-frame target action in the episode's local frame."""
    a = np.asarray(action_global, dtype=np.float64).copy()
    if not state.drift.is_identity():
        a[:3] = apply(state.drift, a[:3])
    return a


def step(state: WorldState, action: ActionVector, config: WorldConfig) -> WorldState:
    """Advance one control step toward a local-frame target action.

    Tip displacement is clamped to MAX_STEP_MM, roll and gripper to their
    per-step rates.  Grasp fires when the gripper crosses below 0.5 with
    the tip within GRASP_RADIUS_MM of the black ring; release fires on the
    upward crossing and leaves the ring at the tip's position.  Targets
    outside the workspace cube are clamped and flagged, not fatal.
    """
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (5,):
        raise ValueError(f"action must have shape (5,), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("non-finite action")

    target = _to_global_target(state, a[:3])
    half = config.workspace_half_extent
    clamped_target = np.clip(target, -half, half)
    was_clamped = bool(np.any(clamped_target != target))

    delta = clamped_target - state.tip
    dist = float(np.linalg.norm(delta))
    if dist <= MAX_STEP_MM:
        tip = clamped_target
    else:
        tip = state.tip + delta * (MAX_STEP_MM / dist)

    roll = state.roll + float(np.clip(a[3] - state.roll,
                                      -MAX_ROLL_STEP_RAD, MAX_ROLL_STEP_RAD))
    grip_target = float(min(max(a[4], 0.0), 1.0))
    gripper = state.gripper + float(np.clip(grip_target - state.gripper,
                                            -MAX_GRIPPER_STEP, MAX_GRIPPER_STEP))

    holding = state.holding
    grasp_frame = state.grasp_frame
    grasp_attempt = state.grasp_attempt_frame
    release_occurred = state.release_occurred
    black = state.black_ring_center

    crossed_down = (state.gripper >= GRIPPER_THRESHOLD
                    and gripper < GRIPPER_THRESHOLD)
    if crossed_down and grasp_attempt is None:
        grasp_attempt = state.step_index
    if (crossed_down and not holding
            and float(np.linalg.norm(tip - black)) <= GRASP_RADIUS_MM):
        holding = True
        if grasp_frame is None:
            grasp_frame = state.step_index
    elif (holding and state.gripper <= GRIPPER_THRESHOLD
          and gripper > GRIPPER_THRESHOLD):
        holding = False
        release_occurred = True
        black = tip.copy()

    if holding:
        black = tip

    return replace(
        state,
        tip=tip,
        roll=roll,
        gripper=gripper,
        black_ring_center=black,
        holding=holding,
        step_index=state.step_index + 1,
        grasp_frame=grasp_frame,
        grasp_attempt_frame=grasp_attempt,
        release_occurred=release_occurred,
        last_target_clamped=was_clamped,
    )


def observe(state: WorldState, config: WorldConfig, frame: str) -> ObservationFrame:
    """Project the three landmarks through both cameras in the requested frame."""
    if frame not in (FRAME_LOCAL, FRAME_GLOBAL):
        raise ValueError(f"frame must be '{FRAME_LOCAL}' or '{FRAME_GLOBAL}'")
    landmarks = np.stack([state.black_ring_center, state.orange_ring_center,
                          state.tip])
    tip = state.tip
    if frame == FRAME_LOCAL and not state.drift.is_identity():
        landmarks = landmarks @ state.drift.rotation.T + state.drift.translation
        tip = landmarks[2]
    features = config.rig().project(landmarks).ravel()
    proprio = np.array([tip[0], tip[1], tip[2], state.roll, state.gripper])
    return ObservationFrame(proprio=proprio, features=features, frame_tag=frame)


def fiducial_readout(state: WorldState, config: WorldConfig) -> FiducialTriad:
    """Fiducials as the robot sees them this episode (local frame, noisy).

    The noise draw is a fixed function of the episode seed, so repeated
    readouts within an episode agree.
    """
    ref = config.fiducial_reference.as_matrix()
    if state.drift.is_identity():
        pts = ref.copy()
    else:
        pts = ref @ state.drift.rotation.T + state.drift.translation
    if config.fiducial_noise_sigma > 0.0:
        rng = np.random.default_rng([state.rng_state, _STREAM_FIDUCIAL])
        pts = pts + rng.normal(scale=config.fiducial_noise_sigma, size=(3, 3))
    return FiducialTriad.from_matrix(pts)


def check_outcome(state: WorldState, config: WorldConfig) -> TaskOutcome:
    """Score the episode: grasp seen, ring placed in tolerance, time respected."""
    grasped = state.grasp_frame is not None
    dx = float(state.black_ring_center[0] - state.orange_ring_center[0])
    dy = float(state.black_ring_center[1] - state.orange_ring_center[1])
    in_plane = math.hypot(dx, dy)
    placed = (state.release_occurred and not state.holding
              and in_plane <= config.success_tolerance)
    steps_used = state.step_index
    success = grasped and placed and steps_used <= config.time_limit_steps
    return TaskOutcome(grasped=grasped, placed=placed, success=success,
                       grasp_frame=state.grasp_frame, final_error=in_plane,
                       steps_used=steps_used,
                       grasp_attempt_frame=state.grasp_attempt_frame)
