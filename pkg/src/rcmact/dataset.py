"""Episode container, binary episode format, normalization, batch assembly.

Episode file layout (all integers little-endian, all floats f64 LE):

    magic   4 bytes  b"ARNG"
    version u32      1
    mlen    u32      length of the metadata block in bytes
    meta    mlen     UTF-8 "key=value" lines: seed, T, obs_dim, act_dim,
                     calibrated, plus a "config.<key>" echo of the world
                     configuration the episode was recorded under
    fiducial_reference   9  f64   rows p1, p2, p3
    fiducial_observed    9  f64
    drift_truth         12  f64   rotation row-major, then translation
    observations    T*17  f64   row-major
    actions          T*5  f64   row-major
    grasp_frame        1  i64   -1 when no grasp occurred

drift_truth is recorded for evaluation oracles only; nothing on the
training path may read it (TrainingBatch carries no episode identity).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calibration import FiducialTriad
from .errors import (
    CorruptHeaderError,
    EmptyDatasetError,
    FormatVersionMismatchError,
    TruncatedPayloadError,
    UncalibratedEpisodeError,
)
from .geometry import RigidTransform

MAGIC = b"ARNG"
FORMAT_VERSION = 1
OBS_DIM = 17
ACT_DIM = 5
PROPRIO_SLICE = slice(12, 17)
STD_FLOOR = 1e-8

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class EpisodeRecord:
    """One trajectory: fiducial readouts, per-step observations and actions."""

    seed: int
    calibrated: bool
    drift_truth: RigidTransform
    fiducial_reference: FiducialTriad
    fiducial_observed: FiducialTriad
    observations: np.ndarray  # (T, 17)
    actions: np.ndarray       # (T, 5)
    grasp_frame: int          # -1 when absent
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        act = np.asarray(self.actions, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != OBS_DIM:
            raise ValueError(f"observations must be (T, {OBS_DIM}), got {obs.shape}")
        if act.shape != (obs.shape[0], ACT_DIM):
            raise ValueError(f"actions must be (T, {ACT_DIM}), got {act.shape}")
        if not (-1 <= self.grasp_frame < obs.shape[0]):
            raise ValueError(f"grasp_frame {self.grasp_frame} outside [-1, T)")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)

    @property
    def length(self) -> int:
        return self.observations.shape[0]


def _encode_metadata(ep: EpisodeRecord) -> bytes:
    lines = [
        f"seed={ep.seed}",
        f"T={ep.length}",
        f"obs_dim={OBS_DIM}",
        f"act_dim={ACT_DIM}",
        f"calibrated={1 if ep.calibrated else 0}",
    ]
    lines.extend(f"config.{k}={ep.meta[k]}" for k in sorted(ep.meta))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_kv_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CorruptHeaderError(f"malformed metadata line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_episode(ep: EpisodeRecord, path) -> None:
    """Serialize an episode; same record always produces the same bytes."""
    meta = _encode_metadata(ep)
    parts = [
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(meta)),
        meta,
        ep.fiducial_reference.as_matrix().astype("<f8").tobytes(),
        ep.fiducial_observed.as_matrix().astype("<f8").tobytes(),
        ep.drift_truth.rotation.astype("<f8").tobytes(),
        ep.drift_truth.translation.astype("<f8").tobytes(),
        ep.observations.astype("<f8").tobytes(),
        ep.actions.astype("<f8").tobytes(),
        struct.pack("<q", ep.grasp_frame),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_episode(path) -> EpisodeRecord:
    """Parse an episode file, rejecting bad magic, versions, or short payloads."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes is not even a header")
    if blob[:4] != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {blob[:4]!r}")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    offset = 12
    if offset + mlen > len(blob):
        raise TruncatedPayloadError(f"{path}: metadata block runs past end of file")
    try:
        meta_text = blob[offset:offset + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptHeaderError(f"{path}: metadata is not UTF-8") from exc
    offset += mlen
    kv = _parse_kv_lines(meta_text)
    try:
        seed = int(kv["seed"])
        length = int(kv["T"])
        obs_dim = int(kv["obs_dim"])
        act_dim = int(kv["act_dim"])
        calibrated = kv["calibrated"] == "1"
    except KeyError as exc:
        raise CorruptHeaderError(f"{path}: missing metadata key {exc}") from exc
    if obs_dim != OBS_DIM or act_dim != ACT_DIM or length < 0:
        raise CorruptHeaderError(f"{path}: unsupported dims T={length} "
                                 f"obs={obs_dim} act={act_dim}")

    def take(count: int) -> np.ndarray:
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise TruncatedPayloadError(f"{path}: payload ends mid-array")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy()
        offset += nbytes
        return arr

    fid_ref = FiducialTriad.from_matrix(take(9).reshape(3, 3))
    fid_obs = FiducialTriad.from_matrix(take(9).reshape(3, 3))
    rotation = take(9).reshape(3, 3)
    translation = take(3)
    observations = take(length * OBS_DIM).reshape(length, OBS_DIM)
    actions = take(length * ACT_DIM).reshape(length, ACT_DIM)
    if offset + 8 > len(blob):
        raise TruncatedPayloadError(f"{path}: missing grasp_frame record")
    (grasp_frame,) = struct.unpack_from("<q", blob, offset)
    offset += 8
    if offset != len(blob):
        raise CorruptHeaderError(f"{path}: {len(blob) - offset} unexpected trailing bytes")
    if not (-1 <= grasp_frame < length):
        raise CorruptHeaderError(f"{path}: grasp_frame {grasp_frame} outside [-1, T)")
    meta = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
    return EpisodeRecord(
        seed=seed,
        calibrated=calibrated,
        drift_truth=RigidTransform(rotation, translation),
        fiducial_reference=fid_ref,
        fiducial_observed=fid_obs,
        observations=observations,
        actions=actions,
        grasp_frame=int(grasp_frame),
        meta=meta,
    )


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean and population std, std floored at 1e-8."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def denormalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs, dtype=np.float64) * self.obs_std + self.obs_mean

    def normalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return (np.asarray(actions, dtype=np.float64) - self.act_mean) / self.act_std

    def denormalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64) * self.act_std + self.act_mean

    def to_lines(self) -> list[str]:
        def fmt(name, arr):
            return f"{name}=" + ",".join(repr(v) for v in arr.tolist())
        return [fmt("obs_mean", self.obs_mean), fmt("obs_std", self.obs_std),
                fmt("act_mean", self.act_mean), fmt("act_std", self.act_std)]

    @staticmethod
    def from_mapping(kv: dict[str, str]) -> "NormStats":
        def parse(name):
            return np.array([float(v) for v in kv[name].split(",")])
        return NormStats(parse("obs_mean"), parse("obs_std"),
                         parse("act_mean"), parse("act_std"))


def _require_calibrated(episodes) -> None:
    for ep in episodes:
        if not ep.calibrated:
            raise UncalibratedEpisodeError(
                f"episode seed={ep.seed} is raw local-frame data; calibrate first")


def compute_norm_stats(episodes) -> NormStats:
    """Mean/population-std over all timesteps of all (calibrated) episodes."""
    episodes = list(episodes)
    if not episodes:
        raise EmptyDatasetError("no episodes")
    _require_calibrated(episodes)
    obs = np.concatenate([ep.observations for ep in episodes])
    act = np.concatenate([ep.actions for ep in episodes])
    return NormStats(
        obs_mean=obs.mean(axis=0),
        obs_std=np.maximum(obs.std(axis=0), STD_FLOOR),
        act_mean=act.mean(axis=0),
        act_std=np.maximum(act.std(axis=0), STD_FLOOR),
    )


@dataclass(frozen=True)
class TrainingBatch:
    observations: np.ndarray  # (B, 17) normalized
    action_chunks: np.ndarray  # (B, k, 5) normalized, zero where masked out
    chunk_mask: np.ndarray    # (B, k) bool, False marks padding


def sample_batch(episodes, stats: NormStats, k: int, batch_size: int,
                 rng: np.random.Generator) -> TrainingBatch:
    """Uniformly sample (episode, t) pairs and cut normalized k-step chunks.

    Sampling is uniform over all valid (episode, t) pairs, so longer episodes
    contribute proportionally more.  Chunks running past the episode end are
    zero-padded and masked.
    """
    episodes = list(episodes)
    if not episodes:
        raise EmptyDatasetError("no episodes")
    if k < 1:
        raise ValueError("chunk size k must be >= 1")
    _require_calibrated(episodes)

    lengths = np.array([ep.length for ep in episodes])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    total = int(offsets[-1])
    flat = rng.integers(0, total, size=batch_size)

    obs = np.empty((batch_size, OBS_DIM))
    chunks = np.zeros((batch_size, k, ACT_DIM))
    mask = np.zeros((batch_size, k), dtype=bool)
    for row, flat_idx in enumerate(flat):
        ep_idx = int(np.searchsorted(offsets, flat_idx, side="right")) - 1
        t = int(flat_idx - offsets[ep_idx])
        ep = episodes[ep_idx]
        obs[row] = stats.normalize_obs(ep.observations[t])
        avail = min(k, ep.length - t)
        chunks[row, :avail] = stats.normalize_actions(ep.actions[t:t + avail])
        mask[row, :avail] = True
    return TrainingBatch(observations=obs, action_chunks=chunks, chunk_mask=mask)


def mark_calibrated(ep: EpisodeRecord) -> EpisodeRecord:
    """Flag-only copy used by tests that build already-global episodes."""
    return replace(ep, calibrated=True)


def write_manifest(directory, filenames, stats: NormStats | None = None) -> None:
    """List episode files (and stats, when known) for a dataset directory."""
    lines = [f"file={name}" for name in filenames]
    if stats is not None:
        lines.extend(stats.to_lines())
    (Path(directory) / MANIFEST_NAME).write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")


def load_dataset(directory) -> list[EpisodeRecord]:
    """Read every episode listed in the manifest (or *.arng when absent)."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if manifest.exists():
        kv_or_files = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines()]
        names = [line[len("file="):] for line in kv_or_files if line.startswith("file=")]
        paths = [directory / name for name in names]
    else:
        paths = sorted(directory.glob("*.arng"))
    if not paths:
        raise EmptyDatasetError(f"no episode files under {directory}")
    return [read_episode(p) for p in paths]
