"""Keyframe interpolation of point clouds with a neural velocity field.

A space-time velocity field is trained so that advecting each keyframe
lands on its neighbours under a debiased Sinkhorn divergence, with optional
PDE regularizers along the trajectories.  In-between frames are advected
keyframes, optionally blended by a free-support barycenter step.
"""

from .core import (Frame, FrameSet, Keyframe, KeyframeError, KeyframeSequence, Normalization, PointCloud,
                   TrainConfig, load_keyframes)
from .net import VelocityNet, build_net, load_net, save_net

__all__ = [
    "Frame", "FrameSet", "Keyframe", "KeyframeError", "KeyframeSequence", "Normalization", "PointCloud",
    "TrainConfig", "load_keyframes", "VelocityNet", "build_net", "load_net", "save_net",
]
__version__ = "0.1.0"
