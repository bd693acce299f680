"""Conditional flow-matching trajectory generation with numpy."""

from .geo import (
    DatasetFormatError,
    InvalidTrajectoryError,
    NormalizationFrame,
    Trajectory,
    TransportMode,
    ZoneGrid,
    denormalize,
    normalize_trajectory,
    read_jsonl,
    write_jsonl,
)
from .harmonize import Method, parameterize, rdp, rdp_to_k, reconstruct
from .metrics import density_js, dtw, evaluate, frechet
from .model import TrainConfig, VectorFieldModel, load_model, prepare, save_model

__version__ = "0.1.0"
