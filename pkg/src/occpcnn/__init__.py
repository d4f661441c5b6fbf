"""Occupancy-field surface reconstruction from sparse point clouds.

Point features are extended to a continuous field with Gaussians, convolved
with learned 27-Gaussian kernels in closed form, and restricted both to the
cloud and to arbitrary query points.  A U-shaped stack of such blocks
predicts inside/outside probabilities, and meshes are extracted with
hierarchical grid evaluation and marching cubes.
"""

from .errors import (
    CheckpointError,
    DegenerateGeometry,
    DimensionMismatch,
    EmptyField,
    EmptyShape,
    InvalidSpec,
    IoError,
    NonFiniteLoss,
    NotWatertight,
    OccError,
    ParseError,
    TapeIncomplete,
)

__version__ = "0.1.0"
