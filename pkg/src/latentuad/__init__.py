"""Unsupervised anomaly detection in multi-channel volumes from patch latents.

A siamese patch auto-encoder learns latent codes on normal subjects; voxels
are then scored by reconstruction error, by a one-class SVM ensemble and by
a mixture of multiple-scale t-distributions fit with online EM.
"""
from . import config, container, evaluation, maps, mmst, ocsvm, patching, phantom, pipeline, sae, volume
from ._jit import USE_NUMBA

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA",
    "config",
    "container",
    "evaluation",
    "maps",
    "mmst",
    "ocsvm",
    "patching",
    "phantom",
    "pipeline",
    "sae",
    "volume",
]
