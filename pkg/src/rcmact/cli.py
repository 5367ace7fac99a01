"""Command-line pipeline: collect, calibrate-data, train, rollout, eval,
ablate, sweep, and the single-triad calibrate utility.

Configuration comes from a structured text file (flat "section.key = value"
lines or "[section]" headers) with precedence CLI flag > config file >
built-in default.  Unknown keys are an error.  Every subcommand is
deterministic: identical inputs and seeds produce byte-identical artifacts.

RCMACT_THREADS caps worker parallelism for episode collection
(unset: serial, 0: one worker per CPU).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset, evaluation, expert, inference, policy
from .calibration import (
    FiducialTriad,
    estimate_transform,
    identity_calibration,
    realign_episode,
    triad_conditioning,
)
from .errors import ExpertFailureError, RcmactError, UnknownKeyError
from .geometry import vec3
from .inference import EnsembleConfig, run_episode
from .policy import PolicyConfig
from .simulator import WorldConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DEFAULT_VARIANTS = "no_calib,no_ensemble,posterior_z,full"

EVAL_COLUMNS = ["seed", "variant", "mse", "grasp_deviation_mm",
                "grasping_latency_frames", "grasped", "placed", "success",
                "steps_used"]


def _parse_float(s):
    return float(s)


def _parse_int(s):
    return int(s)


def _parse_bool(s):
    lowered = s.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _split_reals(s):
    for sep in (";", ",", "\n", "\t"):
        s = s.replace(sep, " ")
    return [float(v) for v in s.split()]


def _parse_vec3(s):
    parts = _split_reals(s)
    if len(parts) != 3:
        raise ValueError(f"expected 3 reals, got {len(parts)}")
    return vec3(*parts)


def _parse_triad(s):
    parts = _split_reals(s)
    if len(parts) != 9:
        raise ValueError(f"expected 9 reals, got {len(parts)}")
    return FiducialTriad.from_matrix(np.array(parts).reshape(3, 3))


def _parse_int_tuple(s):
    s = s.strip()
    return tuple(int(v) for v in s.split(",")) if s else ()


def _parse_steps_per_epoch(s):
    return None if s.strip().lower() == "auto" else int(s)


_WORLD_SCHEMA = {
    "black_ring_diameter": _parse_float,
    "orange_ring_diameter": _parse_float,
    "workspace_half_extent": _parse_float,
    "rcm_reference": _parse_vec3,
    "fiducial_reference": _parse_triad,
    "drift_translation_max": _parse_float,
    "drift_rotation_max": _parse_float,
    "fiducial_noise_sigma": _parse_float,
    "control_rate_hz": _parse_float,
    "success_tolerance": _parse_float,
    "time_limit_steps": _parse_int,
    "camera_baseline": _parse_float,
    "camera_focal": _parse_float,
}

_POLICY_SCHEMA = {
    "chunk_size": _parse_int,
    "latent_dim": _parse_int,
    "hidden_dims": _parse_int_tuple,
    "beta": _parse_float,
    "dropout": _parse_float,
    "lr": _parse_float,
    "adam_beta1": _parse_float,
    "adam_beta2": _parse_float,
    "weight_decay": _parse_float,
    "epochs": _parse_int,
    "batch_size": _parse_int,
    "lr_schedule": str,
    "seed": _parse_int,
    "steps_per_epoch": _parse_steps_per_epoch,
}

_ENSEMBLE_SCHEMA = {
    "weight_schedule": str,
    "m": _parse_float,
    "window": _parse_int,
    "replan_every": _parse_int,
}

_SCHEMAS = {"world": _WORLD_SCHEMA, "policy": _POLICY_SCHEMA,
            "ensemble": _ENSEMBLE_SCHEMA}


def load_config(path) -> dict:
    """Parse a config file into {"world": {...}, "policy": {...}, ...} typed maps.

    Accepts flat "section.key = value" lines and "[section]" headers; "#"
    starts a comment.  Unknown sections or keys raise UnknownKeyError; bad
    values raise ValueError naming the key.
    """
    out = {name: {} for name in _SCHEMAS}
    section = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMAS:
                raise UnknownKeyError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise UnknownKeyError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            prefix, key = key.split(".", 1)
        else:
            prefix = section
        if prefix not in _SCHEMAS:
            raise UnknownKeyError(f"{path}:{lineno}: key {key!r} outside any known section")
        schema = _SCHEMAS[prefix]
        if key not in schema:
            raise UnknownKeyError(f"{path}:{lineno}: unknown key {prefix}.{key}")
        try:
            out[prefix][key] = schema[key](value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {prefix}.{key}: {exc}") from exc
    return out


def _merged_configs(args, **flag_overrides):
    """defaults <- config file <- CLI flags, returning the three config objects."""
    file_map = load_config(args.config) if getattr(args, "config", None) else \
        {name: {} for name in _SCHEMAS}
    world_kv = dict(file_map["world"])
    policy_kv = dict(file_map["policy"])
    ensemble_kv = dict(file_map["ensemble"])
    for dotted, value in flag_overrides.items():
        if value is None:
            continue
        prefix, key = dotted.split(".", 1)
        {"world": world_kv, "policy": policy_kv, "ensemble": ensemble_kv}[prefix][key] = value
    world = replace(WorldConfig(), **world_kv)
    pol = replace(PolicyConfig(), **policy_kv)
    ens = replace(EnsembleConfig(), **ensemble_kv)
    return world, pol, ens


def _say(args, message):
    if not args.quiet:
        print(message)


# --- collect -----------------------------------------------------------------

def _collect_job(config, base_seed, index, noise_sigma):
    candidate = base_seed + index
    while True:
        try:
            return expert.generate_episode(config, candidate, noise_sigma)
        except ExpertFailureError:
            candidate += expert.RESEED_STRIDE


def worker_count() -> int:
    raw = os.environ.get("RCMACT_THREADS")
    if raw is None:
        return 1
    n = int(raw)
    if n < 0:
        raise ValueError("RCMACT_THREADS must be >= 0")
    return os.cpu_count() or 1 if n == 0 else n


def _cmd_collect(args) -> int:
    world, _, _ = _merged_configs(
        args,
        **{"world.drift_translation_max": args.drift_max,
           "world.drift_rotation_max": (None if args.drift_rot_deg is None
                                        else float(np.deg2rad(args.drift_rot_deg)))})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = worker_count()
    indices = list(range(args.episodes))
    if workers > 1 and args.episodes > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(
                _collect_job,
                [world] * len(indices),
                [args.seed] * len(indices),
                indices,
                [args.expert_noise] * len(indices)))
    else:
        episodes = [_collect_job(world, args.seed, i, args.expert_noise)
                    for i in indices]
    names = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.arng"
        dataset.write_episode(ep, out_dir / name)
        names.append(name)
        _say(args, f"wrote {out_dir / name} (seed={ep.seed}, T={ep.length})")
    dataset.write_manifest(out_dir, names)
    _say(args, f"collected {len(names)} episodes under {out_dir}")
    return EXIT_OK


# --- calibrate-data ----------------------------------------------------------

def _cmd_calibrate_data(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = dataset.load_dataset(in_dir)
    names = []
    realigned = []
    for i, ep in enumerate(episodes):
        if args.identity:
            # ablation pipeline: run the stage with the transform forced to
            # identity so the downstream model trains on raw-frame data
            cal = identity_calibration(ep.fiducial_reference)
        else:
            cal = estimate_transform(ep.fiducial_reference, ep.fiducial_observed)
        fixed = realign_episode(cal, ep)
        name = f"episode_{i:05d}.arng"
        dataset.write_episode(fixed, out_dir / name)
        names.append(name)
        realigned.append(fixed)
        _say(args, f"realigned seed={ep.seed} residual={cal.residual:.3e} mm")
    stats = dataset.compute_norm_stats(realigned)
    dataset.write_manifest(out_dir, names, stats)
    _say(args, f"calibrated {len(names)} episodes into {out_dir}")
    return EXIT_OK


# --- train -------------------------------------------------------------------

def _cmd_train(args) -> int:
    _, pol, _ = _merged_configs(
        args,
        **{"policy.chunk_size": args.chunk, "policy.beta": args.beta,
           "policy.epochs": args.epochs, "policy.lr": args.lr,
           "policy.seed": args.seed})
    episodes = dataset.load_dataset(args.data)
    history = []

    def on_epoch(epoch, loss, l_rec, l_reg):
        history.append((epoch, loss, l_rec, l_reg))
        if not args.quiet and (epoch % max(1, pol.epochs // 20) == 0
                               or epoch == pol.epochs - 1):
            print(f"epoch {epoch}: loss={loss:.6f} reconst={l_rec:.6f} reg={l_reg:.6f}")

    params = policy.train(episodes, pol, on_epoch=on_epoch)
    policy.save_parameters(params, args.out)
    loss_csv = Path(f"{args.out}.losses.csv")
    evaluation.write_csv(loss_csv, ["epoch", "loss", "reconst", "reg"],
                         [dict(zip(["epoch", "loss", "reconst", "reg"], row))
                          for row in history])
    _say(args, f"wrote model {args.out} and {loss_csv}")
    return EXIT_OK


# --- rollout -----------------------------------------------------------------

def _cmd_rollout(args) -> int:
    params = policy.load_parameters(args.model)
    world, _, ens = _merged_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.episodes):
        seed = args.seed + i
        rollout = run_episode(params, world, seed, args.variant, ens)
        name = f"rollout_{i:05d}.arng"
        dataset.write_episode(inference.rollout_to_episode(rollout, world),
                              out_dir / name)
        sidecar = out_dir / f"rollout_{i:05d}.outcome.txt"
        sidecar.write_text("\n".join(inference.outcome_sidecar_lines(rollout)) + "\n",
                           encoding="utf-8")
        names.append(name)
        outcome = rollout.outcome
        _say(args, f"seed={seed} variant={args.variant} success={outcome.success} "
                   f"error={outcome.final_error:.3f} mm steps={outcome.steps_used}")
    dataset.write_manifest(out_dir, names)
    return EXIT_OK


# --- eval --------------------------------------------------------------------

def _read_sidecar(path: Path) -> dict:
    kv = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            kv[key] = value
    return kv


def _cmd_eval(args) -> int:
    rollouts = sorted(Path(args.rollouts).glob("*.arng"))
    experts_by_seed = {}
    for path in sorted(Path(args.experts).glob("*.arng")):
        ep = dataset.read_episode(path)
        if not ep.calibrated:
            cal = estimate_transform(ep.fiducial_reference, ep.fiducial_observed)
            ep = realign_episode(cal, ep)
        experts_by_seed[ep.seed] = ep
    rows = []
    for path in rollouts:
        robot = dataset.read_episode(path)
        sidecar_path = path.with_suffix(".outcome.txt")
        sidecar = _read_sidecar(sidecar_path) if sidecar_path.exists() else {}
        reference = experts_by_seed.get(robot.seed)
        if reference is None:
            _say(args, f"skip seed={robot.seed}: no matched expert episode")
            continue
        cal = estimate_transform(robot.fiducial_reference, robot.fiducial_observed)
        robot_global = realign_episode(cal, robot)
        metrics = evaluation.evaluate_record_pair(robot_global, reference)
        rows.append({
            "seed": robot.seed,
            "variant": sidecar.get("variant", ""),
            "mse": metrics["mse"],
            "grasp_deviation_mm": metrics["grasp_deviation_mm"],
            "grasping_latency_frames": metrics["grasping_latency_frames"],
            "grasped": sidecar.get("grasped", ""),
            "placed": sidecar.get("placed", ""),
            "success": sidecar.get("success", ""),
            "steps_used": sidecar.get("steps_used", ""),
        })
    evaluation.write_csv(args.report, EVAL_COLUMNS, rows)
    _say(args, f"wrote {args.report} ({len(rows)} episodes)")
    return EXIT_OK


# --- ablate / sweep ----------------------------------------------------------

def _cmd_ablate(args) -> int:
    params = policy.load_parameters(args.model)
    raw_params = policy.load_parameters(args.raw_model) if args.raw_model else None
    world, _, ens = _merged_configs(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = evaluation.run_ablation(params, world, variants, args.episodes,
                                   args.seed, ens, csv_path=args.report,
                                   raw_params=raw_params)
    for row in rows:
        _say(args, f"{row['variant']}: success {row['success']}/{row['episodes']} "
                   f"mse={row['mean_mse']:.6f} "
                   f"deviation={row['mean_grasp_deviation_mm']}")
    _say(args, f"wrote {args.report}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    episodes = dataset.load_dataset(args.data)
    world, pol, ens = _merged_configs(
        args, **{"policy.epochs": args.epochs, "policy.seed": args.train_seed})
    k_values = [int(v) for v in args.chunks.split(",") if v.strip()]
    rows = evaluation.chunk_sweep(episodes, world, pol, k_values, args.episodes,
                                  args.seed, ens, csv_path=args.report)
    for row in rows:
        _say(args, f"k={row['chunk_size']}: mse={row['mse']:.6f} "
                   f"success_rate={row['success_rate']:.2f}")
    _say(args, f"wrote {args.report}")
    return EXIT_OK


# --- calibrate ---------------------------------------------------------------

def _triad_from_arg(value: str) -> FiducialTriad:
    path = Path(value)
    if path.exists():
        return _parse_triad(path.read_text(encoding="utf-8"))
    return _parse_triad(value)


def _cmd_calibrate(args) -> int:
    reference = _triad_from_arg(args.ref)
    observed = _triad_from_arg(args.obs)
    result = estimate_transform(reference, observed)
    rot = result.transform.rotation.ravel()
    print("rotation_row_major=" + ",".join(f"{v:.12g}" for v in rot))
    print("translation_mm=" + ",".join(f"{v:.12g}" for v in result.transform.translation))
    print(f"residual_mm={result.residual:.12g}")
    print(f"conditioning={result.conditioning:.12g}")
    print(f"reference_conditioning={triad_conditioning(reference):.12g}")
    print(f"observed_conditioning={triad_conditioning(observed):.12g}")
    return EXIT_OK


# --- parser / dispatch -------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcmact",
        description="Pivot-drift-calibrated action-chunking pipeline for the "
                    "ring grasp-and-place task")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="structured text config file")
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common],
                       help="record scripted-expert demonstrations")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drift-max", type=float, default=None, metavar="MM")
    p.add_argument("--drift-rot-deg", type=float, default=None, metavar="DEG")
    p.add_argument("--expert-noise", type=float, default=0.05, metavar="MM")
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("calibrate-data", parents=[common],
                       help="realign a raw dataset to the global frame")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--identity", action="store_true",
                   help="mark episodes as processed without realigning (ablation)")
    p.set_defaults(func=_cmd_calibrate_data)

    p = sub.add_parser("train", parents=[common], help="fit the chunking policy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rollout", parents=[common], help="run closed-loop episodes")
    p.add_argument("--model", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--variant", default="full", choices=inference.VARIANTS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("eval", parents=[common],
                       help="score serialized rollouts against expert episodes")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--experts", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="matched-seed inference-variant comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=10000)
    p.add_argument("--variants", default=DEFAULT_VARIANTS)
    p.add_argument("--raw-model", default=None,
                   help="model trained without calibration, used by no_calib")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", parents=[common], help="chunk-size sensitivity sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--chunks", required=True, metavar="K1,K2,...")
    p.add_argument("--report", required=True)
    p.add_argument("--episodes", type=int, default=5, help="evaluation episodes per k")
    p.add_argument("--seed", type=int, default=10000, help="evaluation seed base")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--train-seed", type=int, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("calibrate", parents=[common],
                       help="estimate one rigid transform from two triads")
    p.add_argument("--ref", required=True, help="file with 9 reals, or inline list")
    p.add_argument("--obs", required=True)
    p.set_defaults(func=_cmd_calibrate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (RcmactError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def cli_main() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    cli_main()
