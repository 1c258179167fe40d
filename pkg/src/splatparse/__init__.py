"""Parse Gaussian-splat scenes into complete, movable objects.

Submodules: ``raster`` (splat rendering), ``viewgen`` (camera grids),
``seglift`` (contrastive feature lifting), ``sceneparse`` (object extraction
and occlusion analysis), ``amodal`` (transition clips, lighting, mIoU),
``voxels`` and ``flow`` (structure latents and prior-injected sampling),
``pipeline`` and ``cli`` (orchestration).
"""

from .camera import CameraPose
from .gaussians import Gaussian, GaussianScene
from .io import read_ply, write_ply
from .raster import RenderOutput, render

__version__ = "0.1.0"

__all__ = ["CameraPose", "Gaussian", "GaussianScene", "RenderOutput", "read_ply", "render", "write_ply",
           "__version__"]
