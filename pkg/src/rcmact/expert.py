"""Scripted oracle demonstrations of the grasp-and-place task.

The expert plans in the global frame (it has oracle access to the true
ring positions) but records observations and commands in the episode's
drifted local frame, exactly as the robot's own logs would look.  That
mismatch is deliberate: it reproduces the inconsistent-frame pathology
that dataset calibration has to undo.
"""

from __future__ import annotations

import math

import numpy as np

from . import simulator
from .dataset import EpisodeRecord
from .errors import ExpertFailureError, UnreachableLayoutError
from .projection import CAMERA_HEIGHT_MM
from .simulator import (
    MAX_GRIPPER_STEP,
    MAX_STEP_MM,
    STREAM_EXPERT_JITTER,
    WorldConfig,
    WorldState,
)

HOVER_MM = 2.0
# offset added to a failing seed when an episode must be regenerated
RESEED_STRIDE = 1000003


def _dwell_for_move(src: np.ndarray, dst: np.ndarray) -> int:
    return int(math.ceil(float(np.linalg.norm(dst - src)) / MAX_STEP_MM))


def _dwell_for_grip(change: float) -> int:
    return int(math.ceil(abs(change) / MAX_GRIPPER_STEP))


def plan_waypoints(state: WorldState, config: WorldConfig):
    """Per-timestep (action, phase_label) list solving the fresh episode.

    Actions are global-frame targets; each phase is repeated long enough
    for the rate-clamped stepping to reach the waypoint before moving on.
    """
    black = state.black_ring_center
    orange = state.orange_ring_center
    half = config.workspace_half_extent
    for ring in (black, orange):
        if np.any(np.abs(ring) > half) or ring[2] + HOVER_MM > half:
            raise UnreachableLayoutError(f"ring at {ring} outside workspace")

    tol = config.success_tolerance
    bx, by, bz = black.tolist()
    ox, oy, oz = orange.tolist()
    phases = [
        ("approach", np.array([bx, by, bz + HOVER_MM, 0.0, 1.0])),
        ("descend", np.array([bx, by, bz, 0.0, 1.0])),
        ("close", np.array([bx, by, bz, 0.0, 0.0])),
        ("lift", np.array([bx, by, bz + HOVER_MM, 0.0, 0.0])),
        ("transfer", np.array([ox, oy, oz + HOVER_MM, 0.0, 0.0])),
        ("place", np.array([ox, oy, oz + 0.5 * tol, 0.0, 0.0])),
        ("open", np.array([ox, oy, oz + 0.5 * tol, 0.0, 1.0])),
        ("retract", np.array([ox, oy, oz + HOVER_MM, 0.0, 1.0])),
    ]
    steps = []
    pos = state.tip
    grip = state.gripper
    for label, target in phases:
        # exact-arrival dwells: rate-clamped stepping reaches a static target
        # in ceil(distance / rate) steps, and padding a phase with extra
        # repeats would duplicate observations while the chunk targets shift
        move = _dwell_for_move(pos, target[:3])
        squeeze = _dwell_for_grip(target[4] - grip)
        dwell = max(move, squeeze, 1)
        steps.extend((target, label) for _ in range(dwell))
        pos = target[:3]
        grip = target[4]
    return steps


def generate_episode(config: WorldConfig, seed: int,
                     noise_sigma: float = 0.05) -> EpisodeRecord:
    """Roll out the scripted plan and record a raw local-frame episode.

    noise_sigma adds per-step Gaussian jitter (mm) to the Cartesian targets
    for demonstration diversity.  Raises ExpertFailureError when the rollout
    does not end in task success; callers reject and reseed.
    """
    if noise_sigma < 0.0:
        raise ValueError("noise_sigma must be non-negative")
    state = simulator.reset(config, seed)
    readout = simulator.fiducial_readout(state, config)
    plan = plan_waypoints(state, config)
    rng = np.random.default_rng([seed, STREAM_EXPERT_JITTER])

    obs_rows = []
    act_rows = []
    for target_global, _label in plan:
        action = target_global.copy()
        if noise_sigma > 0.0:
            action[:3] = action[:3] + rng.normal(scale=noise_sigma, size=3)
        action_local = simulator.local_action(state, action)
        obs_rows.append(simulator.observe(state, config, simulator.FRAME_LOCAL)
                        .as_vector())
        act_rows.append(action_local)
        state = simulator.step(state, action_local, config)

    outcome = simulator.check_outcome(state, config)
    if not outcome.success:
        raise ExpertFailureError(
            f"seed {seed}: grasped={outcome.grasped} placed={outcome.placed} "
            f"error={outcome.final_error:.3f} mm")

    return EpisodeRecord(
        seed=seed,
        calibrated=False,
        drift_truth=state.drift,
        fiducial_reference=config.fiducial_reference,
        fiducial_observed=readout,
        observations=np.stack(obs_rows),
        actions=np.stack(act_rows),
        grasp_frame=outcome.grasp_frame if outcome.grasp_frame is not None else -1,
        meta=config_echo(config),
    )


def collect_episodes(config: WorldConfig, n_episodes: int, base_seed: int,
                     noise_sigma: float = 0.05) -> list[EpisodeRecord]:
    """Generate n successful demonstrations, reseeding failures deterministically."""
    episodes = []
    for i in range(n_episodes):
        candidate = base_seed + i
        while True:
            try:
                episodes.append(generate_episode(config, candidate, noise_sigma))
                break
            except ExpertFailureError:
                candidate += RESEED_STRIDE
    return episodes


def config_echo(config: WorldConfig) -> dict[str, str]:
    """Flat text echo of the world configuration stored in episode metadata."""
    fid = config.fiducial_reference.as_matrix().ravel()
    return {
        "black_ring_diameter": repr(config.black_ring_diameter),
        "orange_ring_diameter": repr(config.orange_ring_diameter),
        "workspace_half_extent": repr(config.workspace_half_extent),
        "rcm_reference": ",".join(repr(v) for v in config.rcm_reference.tolist()),
        "fiducial_reference": ",".join(repr(v) for v in fid.tolist()),
        "drift_translation_max": repr(config.drift_translation_max),
        "drift_rotation_max": repr(config.drift_rotation_max),
        "fiducial_noise_sigma": repr(config.fiducial_noise_sigma),
        "control_rate_hz": repr(config.control_rate_hz),
        "success_tolerance": repr(config.success_tolerance),
        "time_limit_steps": repr(config.time_limit_steps),
        "camera_baseline": repr(config.camera_baseline),
        "camera_focal": repr(config.camera_focal),
        "camera_height": repr(CAMERA_HEIGHT_MM),
    }
