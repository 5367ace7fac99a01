"""Desk-scale ring grasp-and-place pipeline: drifting-pivot simulator,
fiducial calibration, chunking CVAE policy, ensembled inference, and an
ablation/metrics harness."""

__version__ = "0.1.0"

from .calibration import (  # noqa: F401
    CalibrationResult,
    FiducialTriad,
    estimate_transform,
    realign_episode,
    realign_point,
    triad_conditioning,
)
from .dataset import EpisodeRecord, NormStats, read_episode, write_episode  # noqa: F401
from .geometry import RigidTransform, vec3  # noqa: F401
from .inference import EnsembleConfig, run_episode  # noqa: F401
from .policy import PolicyConfig, PolicyParameters, train  # noqa: F401
from .simulator import WorldConfig, reset, step  # noqa: F401
