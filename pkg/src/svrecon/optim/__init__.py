"""Model-based optimization: volume CG, slice registration, multiscale refinement."""

from .config import ReconConfig
from .flow import flow_residual
from .refine import (finalize, multilayer_residual_loss, multiscale_refine,
                     uplift_level_field)
from .registration import PoseResult, pose_jacobian, pose_update
from .svr import SvrResult, alternating_svr
from .system import CGInfo, DivergenceError, SliceSystem, cgls, volume_update

__all__ = [
    "ReconConfig", "flow_residual", "finalize", "multilayer_residual_loss", "multiscale_refine",
    "uplift_level_field", "PoseResult", "pose_jacobian", "pose_update", "SvrResult",
    "alternating_svr", "CGInfo", "DivergenceError", "SliceSystem", "cgls", "volume_update",
]
