"""Episode-start calibration plus the chunk-buffered control loop.

Each control step: observe in the drifted local frame, realign to the
global frame with the episode's one-shot calibration, decode an action
chunk with z = 0, push it into per-timestep FIFO buffers, blend every
buffered prediction for the current step with decaying weights, and map
the blended global-frame target back to the local frame for execution.

Ablation switches: "no_calib" forces the identity calibration, "no_ensemble"
executes only the newest chunk's element, "posterior_z" samples z ~ N(0, I)
per replan instead of z = 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import simulator
from .calibration import (
    CalibrationResult,
    estimate_transform,
    identity_calibration,
    realign_observation,
)
from .errors import EmptyBufferError
from .geometry import apply
from .policy import PolicyParameters, decode
from .simulator import STREAM_POSTERIOR_Z, TaskOutcome, WorldConfig, WorldState

VARIANTS = ("full", "no_calib", "no_ensemble", "posterior_z")

SCHEDULE_EXP = "exp_decay"
SCHEDULE_POW = "pow_decay"


@dataclass(frozen=True)
class EnsembleConfig:
    weight_schedule: str = SCHEDULE_EXP
    m: float = 0.8
    window: int = 3          # pow_decay uses the newest window+1 entries
    replan_every: int = 1

    def __post_init__(self):
        if self.weight_schedule not in (SCHEDULE_EXP, SCHEDULE_POW):
            raise ValueError(f"unknown weight schedule {self.weight_schedule!r}")
        if self.m <= 0.0:
            raise ValueError("m must be positive")
        if self.window < 0:
            raise ValueError("window must be non-negative")
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")


@dataclass
class ChunkBuffer:
    """Per-timestep FIFO lists of predicted 5D actions, oldest first."""

    horizon: int
    slots: list = field(default_factory=list)

    def __post_init__(self):
        if not self.slots:
            self.slots = [[] for _ in range(self.horizon)]

    def entries(self, t: int) -> list:
        return self.slots[t]


def push_chunk(buffer: ChunkBuffer, t: int, chunk: np.ndarray) -> None:
    """Append chunk element j to buffer slot t + j; drops beyond the horizon."""
    if t < 0:
        raise ValueError("t must be non-negative")
    chunk = np.asarray(chunk, dtype=np.float64)
    stop = min(chunk.shape[0], buffer.horizon - t)
    for j in range(stop):
        buffer.slots[t + j].append(chunk[j].copy())


def ensemble(entries, cfg: EnsembleConfig) -> np.ndarray:
    """Decaying-weight blend of buffered predictions (newest has i = 0).

    exp_decay weighs every entry with exp(-m * i); pow_decay weighs only the
    newest window+1 entries with m ** i.  Single-entry and all-identical
    inputs return the entry exactly (no arithmetic), which keeps degenerate
    configurations bitwise equal to the no-ensemble path.
    """
    entries = list(entries)
    if not entries:
        raise EmptyBufferError("no buffered predictions for this timestep")
    if len(entries) == 1:
        return entries[0].copy()
    newest = entries[-1]
    if all(np.array_equal(e, newest) for e in entries):
        return newest.copy()
    if cfg.weight_schedule == SCHEDULE_POW:
        take = min(len(entries), cfg.window + 1)
        stack = np.stack(entries[-take:])
        ages = np.arange(take - 1, -1, -1, dtype=np.float64)
        weights = cfg.m ** ages
    else:
        stack = np.stack(entries)
        ages = np.arange(len(entries) - 1, -1, -1, dtype=np.float64)
        weights = np.exp(-cfg.m * ages)
    return weights @ stack / weights.sum()


def episode_start_calibrate(state: WorldState,
                            config: WorldConfig) -> CalibrationResult:
    """One-shot calibration from the fresh episode's fiducial readout."""
    readout = simulator.fiducial_readout(state, config)
    return estimate_transform(config.fiducial_reference, readout)


@dataclass(eq=False)
class Rollout:
    """Full record of one closed-loop episode."""

    seed: int
    variant: str
    calibration: CalibrationResult
    observations_local: np.ndarray   # (T, 17) raw, as the robot saw them
    observations_global: np.ndarray  # (T, 17) realigned policy inputs
    actions_global: np.ndarray       # (T, 5) blended policy outputs in C_0
    actions_local: np.ndarray        # (T, 5) commands actually executed
    tip_positions: np.ndarray        # (T, 3) true global tip after each step
    outcome: TaskOutcome
    clamped_steps: int
    step_seconds: np.ndarray         # wall-clock diagnostics; not an artifact


def _to_local_command(cal: CalibrationResult, action_global: np.ndarray) -> np.ndarray:
    a = action_global.copy()
    if not cal.transform.is_identity():
        a[:3] = apply(cal.transform, a[:3])
    return a


def run_episode(params: PolicyParameters, config: WorldConfig, seed: int,
                variant: str = "full",
                ensemble_config: EnsembleConfig | None = None) -> Rollout:
    """Run one closed-loop episode; stops early once the task succeeds.

    Deterministic given (params, config, seed, variant).  Workspace-clamp
    events are counted, not fatal.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    ecfg = ensemble_config or EnsembleConfig()
    state = simulator.reset(config, seed)
    if variant == "no_calib":
        cal = identity_calibration(config.fiducial_reference)
    else:
        cal = episode_start_calibrate(state, config)
    rig = config.rig()
    stats = params.norm_stats
    cfg = params.config
    horizon = config.time_limit_steps
    buffer = ChunkBuffer(horizon)
    rng_z = np.random.default_rng([seed, STREAM_POSTERIOR_Z])
    z_zero = np.zeros(cfg.latent_dim)

    obs_local_rows = []
    obs_global_rows = []
    act_global_rows = []
    act_local_rows = []
    tip_rows = []
    seconds = []
    clamped = 0
    latest_chunk = None
    latest_chunk_t = -1

    for t in range(horizon):
        t0 = time.perf_counter()
        v_local = simulator.observe(state, config, simulator.FRAME_LOCAL).as_vector()
        v_global = realign_observation(cal, v_local, rig)
        if t % ecfg.replan_every == 0:
            z = rng_z.standard_normal(cfg.latent_dim) if variant == "posterior_z" else z_zero
            chunk = stats.denormalize_actions(
                decode(params, stats.normalize_obs(v_global), z))
            if variant == "no_ensemble":
                latest_chunk = chunk
                latest_chunk_t = t
            else:
                push_chunk(buffer, t, chunk)
        if variant == "no_ensemble":
            idx = min(t - latest_chunk_t, cfg.chunk_size - 1)
            action_global = latest_chunk[idx].copy()
        else:
            action_global = ensemble(buffer.entries(t), ecfg)
        action_local = _to_local_command(cal, action_global)
        state = simulator.step(state, action_local, config)

        obs_local_rows.append(v_local)
        obs_global_rows.append(v_global)
        act_global_rows.append(action_global)
        act_local_rows.append(action_local)
        tip_rows.append(state.tip.copy())
        seconds.append(time.perf_counter() - t0)
        if state.last_target_clamped:
            clamped += 1
        if simulator.check_outcome(state, config).success:
            break

    outcome = simulator.check_outcome(state, config)
    return Rollout(
        seed=seed,
        variant=variant,
        calibration=cal,
        observations_local=np.stack(obs_local_rows),
        observations_global=np.stack(obs_global_rows),
        actions_global=np.stack(act_global_rows),
        actions_local=np.stack(act_local_rows),
        tip_positions=np.stack(tip_rows),
        outcome=outcome,
        clamped_steps=clamped,
        step_seconds=np.asarray(seconds),
    )


def rollout_to_episode(rollout: Rollout, config: WorldConfig):
    """Repackage a rollout in the raw episode container (local frame).

    The stored grasp frame is the initiation event so that record-level
    metrics agree with the in-process ones.
    """
    from .dataset import EpisodeRecord
    from .expert import config_echo

    state = simulator.reset(config, rollout.seed)
    readout = simulator.fiducial_readout(state, config)
    grasp = rollout.outcome.grasp_attempt_frame
    return EpisodeRecord(
        seed=rollout.seed,
        calibrated=False,
        drift_truth=state.drift,
        fiducial_reference=config.fiducial_reference,
        fiducial_observed=readout,
        observations=rollout.observations_local.copy(),
        actions=rollout.actions_local.copy(),
        grasp_frame=grasp if grasp is not None else -1,
        meta=config_echo(config),
    )


def outcome_sidecar_lines(rollout: Rollout) -> list[str]:
    """Deterministic key=value summary written next to a serialized rollout."""
    o = rollout.outcome
    return [
        f"seed={rollout.seed}",
        f"variant={rollout.variant}",
        f"grasped={int(o.grasped)}",
        f"placed={int(o.placed)}",
        f"success={int(o.success)}",
        f"grasp_frame={-1 if o.grasp_frame is None else o.grasp_frame}",
        f"grasp_attempt_frame="
        f"{-1 if o.grasp_attempt_frame is None else o.grasp_attempt_frame}",
        f"final_error_mm={o.final_error!r}",
        f"steps_used={o.steps_used}",
        f"clamped_steps={rollout.clamped_steps}",
        f"calibration_residual_mm={rollout.calibration.residual!r}",
    ]
