"""Black boxes: the parameter space, the simulated denoiser and toys."""

from .simbm3d import SimBM3D, sim_bm3d
from .space import ParamDim, ParamSpace, bm3d_space, grid_points, normalize, quantize
from .toys import IdentityBlackBox, ShiftBlackBox

__all__ = ["SimBM3D", "sim_bm3d", "ParamDim", "ParamSpace", "bm3d_space", "grid_points",
           "normalize", "quantize", "IdentityBlackBox", "ShiftBlackBox"]
