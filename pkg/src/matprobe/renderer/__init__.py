"""Novel-view rendering: depth -> mesh -> pose -> thin-lens raytrace ->
pixel-area integration -> lattice sampling -> sensor noise -> crop/resize."""

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Mesh,
    RenderError,
    SpatialTransform,
    apply_transform,
    depth_to_mesh,
)
from .filters import finalize, lanczos3, mitchell_netravali, resample_image
from .sensor import SensorModel, ThinLens, add_noise, pixel_integrate, sample_grid
from .pipeline import NovelView, RenderSample, load_recipe, render_novel_view
from .trace import raytrace

__all__ = [
    "RenderError",
    "DepthMap",
    "CameraIntrinsics",
    "Mesh",
    "SpatialTransform",
    "ThinLens",
    "SensorModel",
    "NovelView",
    "RenderSample",
    "depth_to_mesh",
    "apply_transform",
    "raytrace",
    "pixel_integrate",
    "sample_grid",
    "add_noise",
    "finalize",
    "render_novel_view",
    "load_recipe",
    "resample_image",
    "mitchell_netravali",
    "lanczos3",
]
