"""Trajectory metrics, ablation table, and the chunk-size sweep.

All metrics compare a closed-loop rollout against the matched-seed scripted
expert episode, both expressed in the global frame C_0, which is exactly
what makes them insensitive to the per-episode pivot drift.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import expert as expert_mod
from .calibration import estimate_transform, realign_episode
from .dataset import EpisodeRecord
from .errors import EmptyTrajectoryError
from .inference import EnsembleConfig, Rollout, run_episode
from .policy import PolicyConfig, PolicyParameters, train
from .simulator import WorldConfig

log = logging.getLogger(__name__)

ABLATION_COLUMNS = [
    "variant", "episodes", "grasped", "placed", "success", "success_rate",
    "mean_mse", "mean_grasp_deviation_mm", "deviation_count",
    "mean_grasping_latency_frames", "latency_count",
]

SWEEP_COLUMNS = [
    "chunk_size", "mse", "grasp_deviation_mm", "grasping_latency_frames",
    "success_rate", "norm_mse", "norm_grasp_deviation_mm",
    "norm_grasping_latency_frames", "norm_success_rate",
]


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    grasp_deviation_mm: float | None
    grasping_latency_frames: int | None
    grasped: bool
    placed: bool
    success: bool
    steps: int


def trajectory_mse(predicted: np.ndarray, expert: np.ndarray) -> float:
    """Mean over timesteps of the squared 5D action error.

    Trajectories of unequal length are truncated to the shorter one (logged).
    """
    pred = np.asarray(predicted, dtype=np.float64)
    exp = np.asarray(expert, dtype=np.float64)
    if pred.size == 0 or exp.size == 0:
        raise EmptyTrajectoryError("empty trajectory")
    if pred.shape[0] != exp.shape[0]:
        log.warning("trajectory lengths differ (%d vs %d); truncating",
                    pred.shape[0], exp.shape[0])
        t = min(pred.shape[0], exp.shape[0])
        pred, exp = pred[:t], exp[:t]
    diff = pred - exp
    return float((diff * diff).sum(axis=1).mean())


def expert_grasp_tip(ep: EpisodeRecord) -> np.ndarray | None:
    """Global tip position right after the expert's grasping step.

    Recorded proprioception is pre-step, so the post-grasp tip is the next
    frame's reading (the expert dwells there, so the step offset is inert).
    """
    if ep.grasp_frame < 0:
        return None
    idx = min(ep.grasp_frame + 1, ep.length - 1)
    return ep.observations[idx, 12:15]


def grasp_deviation(rollout: Rollout, expert_ep: EpisodeRecord) -> float | None:
    """Distance between robot and expert tips at their own grasp frames (mm).

    The robot-side frame is where the grasp was initiated (first gripper
    closing), whether or not a ring was caught; conditioning on successful
    attachment would censor exactly the inaccurate attempts the metric is
    meant to expose.  For expert episodes initiation and attachment coincide.
    """
    if not expert_ep.calibrated:
        raise ValueError("expert episode must be realigned to the global frame")
    if rollout.outcome.grasp_attempt_frame is None:
        return None
    exp_tip = expert_grasp_tip(expert_ep)
    if exp_tip is None:
        return None
    robot_tip = rollout.tip_positions[rollout.outcome.grasp_attempt_frame]
    return float(np.linalg.norm(robot_tip - exp_tip))


def grasping_latency(rollout: Rollout, expert_ep: EpisodeRecord) -> int | None:
    """Absolute frame-index difference between the two grasp initiations."""
    if rollout.outcome.grasp_attempt_frame is None or expert_ep.grasp_frame < 0:
        return None
    return abs(rollout.outcome.grasp_attempt_frame - expert_ep.grasp_frame)


def evaluate_episode(rollout: Rollout, expert_ep: EpisodeRecord) -> MetricsReport:
    return MetricsReport(
        mse=trajectory_mse(rollout.actions_global, expert_ep.actions),
        grasp_deviation_mm=grasp_deviation(rollout, expert_ep),
        grasping_latency_frames=grasping_latency(rollout, expert_ep),
        grasped=rollout.outcome.grasped,
        placed=rollout.outcome.placed,
        success=rollout.outcome.success,
        steps=rollout.outcome.steps_used,
    )


def evaluate_record_pair(robot_ep: EpisodeRecord, expert_ep: EpisodeRecord) -> dict:
    """Record-level metrics for serialized rollouts (both sides calibrated)."""
    for name, ep in (("robot", robot_ep), ("expert", expert_ep)):
        if not ep.calibrated:
            raise ValueError(f"{name} episode must be realigned to the global frame")
    robot_tip = expert_grasp_tip(robot_ep)
    exp_tip = expert_grasp_tip(expert_ep)
    deviation = (float(np.linalg.norm(robot_tip - exp_tip))
                 if robot_tip is not None and exp_tip is not None else None)
    latency = (abs(robot_ep.grasp_frame - expert_ep.grasp_frame)
               if robot_ep.grasp_frame >= 0 and expert_ep.grasp_frame >= 0 else None)
    return {
        "mse": trajectory_mse(robot_ep.actions, expert_ep.actions),
        "grasp_deviation_mm": deviation,
        "grasping_latency_frames": latency,
    }


def reference_expert_episode(config: WorldConfig, seed: int) -> EpisodeRecord:
    """Noise-free matched-seed expert demonstration, realigned to C_0.

    Realignment goes through the episode's own fiducials, not the stored
    drift truth, so the comparison uses only information a real system has.
    """
    ep = expert_mod.generate_episode(config, seed, noise_sigma=0.0)
    cal = estimate_transform(ep.fiducial_reference, ep.fiducial_observed)
    return realign_episode(cal, ep)


def _aggregate(variant: str, reports: list[MetricsReport]) -> dict:
    n = len(reports)
    deviations = [r.grasp_deviation_mm for r in reports if r.grasp_deviation_mm is not None]
    latencies = [r.grasping_latency_frames for r in reports
                 if r.grasping_latency_frames is not None]
    return {
        "variant": variant,
        "episodes": n,
        "grasped": sum(r.grasped for r in reports),
        "placed": sum(r.placed for r in reports),
        "success": sum(r.success for r in reports),
        "success_rate": (sum(r.success for r in reports) / n) if n else 0.0,
        "mean_mse": float(np.mean([r.mse for r in reports])) if n else float("nan"),
        "mean_grasp_deviation_mm": float(np.mean(deviations)) if deviations else None,
        "deviation_count": len(deviations),
        "mean_grasping_latency_frames": float(np.mean(latencies)) if latencies else None,
        "latency_count": len(latencies),
    }


def run_ablation(params: PolicyParameters, config: WorldConfig, variants,
                 n_episodes: int, seed_base: int,
                 ensemble_config: EnsembleConfig | None = None,
                 csv_path=None,
                 raw_params: PolicyParameters | None = None) -> list[dict]:
    """Evaluate inference variants on matched seeds.

    Every variant sees the same worlds (same seeds) and is scored against
    the same noise-free expert references.  When raw_params is given, the
    no_calib variant runs that model instead of params: the uncalibrated
    baseline is a policy whose training data never went through frame
    realignment, mirroring how a stock chunking policy would be built
    without the calibration stage.  Without raw_params the ablation is
    inference-side only.
    """
    variants = list(variants)
    seeds = [seed_base + i for i in range(n_episodes)]
    references = {seed: reference_expert_episode(config, seed) for seed in seeds}
    rows = []
    for variant in variants:
        model = raw_params if (variant == "no_calib" and raw_params is not None) \
            else params
        reports = [
            evaluate_episode(
                run_episode(model, config, seed, variant, ensemble_config),
                references[seed])
            for seed in seeds
        ]
        rows.append(_aggregate(variant, reports))
    if csv_path is not None:
        write_csv(csv_path, ABLATION_COLUMNS, rows)
    return rows


def minmax_normalize(values) -> list[float]:
    """[0, 1] min-max scaling; a degenerate (constant) range maps to zeros."""
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return [float("nan")] * len(arr)
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        return [0.0 if np.isfinite(v) else float("nan") for v in arr]
    return [float((v - lo) / (hi - lo)) if np.isfinite(v) else float("nan")
            for v in arr]


def chunk_sweep(episodes, world_config: WorldConfig, policy_config: PolicyConfig,
                k_values, n_eval: int, seed_base: int,
                ensemble_config: EnsembleConfig | None = None,
                csv_path=None) -> list[dict]:
    """Train one model per chunk size on the same data/seed and evaluate each.

    Emits raw per-k metrics plus min-max normalized columns across the sweep.
    """
    k_values = list(k_values)
    if not k_values:
        raise ValueError("k_values must be non-empty")
    seeds = [seed_base + i for i in range(n_eval)]
    references = {seed: reference_expert_episode(world_config, seed)
                  for seed in seeds}
    raw = []
    for k in k_values:
        params = train(episodes, replace(policy_config, chunk_size=k))
        reports = [
            evaluate_episode(
                run_episode(params, world_config, seed, "full", ensemble_config),
                references[seed])
            for seed in seeds
        ]
        agg = _aggregate(f"k={k}", reports)
        raw.append({
            "chunk_size": k,
            "mse": agg["mean_mse"],
            "grasp_deviation_mm": (float("nan")
                                   if agg["mean_grasp_deviation_mm"] is None
                                   else agg["mean_grasp_deviation_mm"]),
            "grasping_latency_frames": (float("nan")
                                        if agg["mean_grasping_latency_frames"] is None
                                        else agg["mean_grasping_latency_frames"]),
            "success_rate": agg["success_rate"],
        })
    for col in ("mse", "grasp_deviation_mm", "grasping_latency_frames",
                "success_rate"):
        for row, norm in zip(raw, minmax_normalize([r[col] for r in raw])):
            row[f"norm_{col}"] = norm
    if csv_path is not None:
        write_csv(csv_path, SWEEP_COLUMNS, raw)
    return raw


def write_csv(path, columns, rows) -> None:
    """Fixed-column-order CSV; None cells are left empty."""
    with open(Path(path), "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row[c] is None else row[c] for c in columns])
