"""orthosynth: generation and evaluation of paired 3D teeth point-cloud models.

The library is organized around a structured 32-slot teeth model
(:mod:`orthosynth.geometry`), voxel feature extraction
(:mod:`orthosynth.voxelize`), a small float64 autodiff engine
(:mod:`orthosynth.autodiff`, :mod:`orthosynth.layers`,
:mod:`orthosynth.optim`), the two generation stages
(:mod:`orthosynth.vqvae`, :mod:`orthosynth.diffusion`,
:mod:`orthosynth.styletransfer`), point-cloud metrics
(:mod:`orthosynth.metrics`), a procedural toy dataset
(:mod:`orthosynth.toydata`), and on-disk formats plus the command line
front end (:mod:`orthosynth.formats`, :mod:`orthosynth.cli`).
"""

from orthosynth.geometry import (
    FdiLabel,
    GridIndex,
    TeethModel,
    ToothCloud,
    ToothMask,
    TransformParams,
    RigidTransform,
    NormalizationRecord,
    fdi_to_grid,
    grid_to_fdi,
    normalize_model,
    denormalize_model,
    farthest_point_sample,
    rotation_from_6d,
    apply_transform,
    kabsch_align,
)

__all__ = [
    "FdiLabel",
    "GridIndex",
    "TeethModel",
    "ToothCloud",
    "ToothMask",
    "TransformParams",
    "RigidTransform",
    "NormalizationRecord",
    "fdi_to_grid",
    "grid_to_fdi",
    "normalize_model",
    "denormalize_model",
    "farthest_point_sample",
    "rotation_from_6d",
    "apply_transform",
    "kabsch_align",
]

__version__ = "0.1.0"
