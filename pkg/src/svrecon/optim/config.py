from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ReconConfig:
    """Optimizer settings. Defaults: 5 outer / 3 inner iterations, 5 pyramid levels."""

    outer_iters: int = 5
    inner_recon_iters: int = 3
    cg_tol: float = 1e-6
    pose_step_tol: float = 1e-3  # degrees / mm
    pose_max_iters: int = 20
    fd_rot_step: float = 0.1  # degrees
    fd_trans_step: float = 0.1  # voxels
    max_step_deg: float = 2.0  # Gauss-Newton trust region per iteration
    max_step_vox: float = 1.0
    leave_one_out: bool = False  # register each stack against the other stacks' volume
    trajectory_smoothing: float = 0.0  # Gaussian sigma (slices) on motion along acquisition order
    stack_iters: int = 0  # leading outer iterations that move each stack as one rigid body
    translation_iters: int = 0  # leading outer iterations that register translation only
    pose_smoothing: tuple = ()  # optional Gaussian sigmas (voxels) for coarse-to-fine registration
    pyramid_levels: int = 5
    refine_iters_per_level: int = 2
    flow_window: int = 5
    flow_damping: float = 1e-3
    flow_smoothing: float = 1.0  # Gaussian sigma (level pixels) applied before the flow solve
    max_disp: float = 2.0  # level voxels per update
    rigid_updates: bool = True
    psf: str = "boxcar"
    indicator: bool = False
    volume_dims: tuple | None = None
    volume_spacing: float | None = None
    deterministic: bool = True

    def __post_init__(self):
        for name in ("outer_iters", "inner_recon_iters", "pose_max_iters", "pyramid_levels",
                     "refine_iters_per_level", "flow_window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("cg_tol", "pose_step_tol", "fd_rot_step", "fd_trans_step", "max_disp",
                     "max_step_deg", "max_step_vox"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("stack_iters", "translation_iters"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.trajectory_smoothing < 0:
            raise ValueError("trajectory_smoothing must be nonnegative")
        if self.flow_smoothing < 0:
            raise ValueError("flow_smoothing must be nonnegative")
        if self.flow_damping < 0:
            raise ValueError("flow_damping must be nonnegative")
        self.pose_smoothing = tuple(float(s) for s in self.pose_smoothing)
        if self.volume_dims is not None:
            self.volume_dims = tuple(int(d) for d in self.volume_dims)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ReconConfig keys: {sorted(unknown)}")
        return cls(**d)
