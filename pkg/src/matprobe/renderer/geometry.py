"""Camera geometry, depth-map meshing, and rigid transforms.

Conventions: camera at the origin looking down +z, x right, y down. Pixel
(i, j) has continuous image coordinates (j + 0.5, i + 0.5). Depth is the z
distance in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "RenderError",
    "DepthMap",
    "CameraIntrinsics",
    "SpatialTransform",
    "Mesh",
    "depth_to_mesh",
    "apply_transform",
]


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray  # (H, W) meters, float32

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        if d.ndim != 2:
            raise RenderError("depth map must be 2-D")
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length: float  # pixels
    principal_point: tuple[float, float]  # (cx, cy) pixels
    field_of_view: float  # horizontal, degrees (informational)

    def __post_init__(self):
        if self.focal_length <= 0:
            raise RenderError("focal length must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        f = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(focal_length=f, principal_point=(width / 2.0, height / 2.0),
                   field_of_view=fov_deg)


@dataclass(frozen=True)
class SpatialTransform:
    """Vertices map by scale -> rotate -> translate."""

    rotation: np.ndarray  # (3,3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise RenderError("rotation must be 3x3 and translation 3-vector")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-8
        ):
            raise RenderError("rotation must be orthonormal with determinant +1")
        if self.scale <= 0:
            raise RenderError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SpatialTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_euler(cls, rx_deg=0.0, ry_deg=0.0, rz_deg=0.0,
                   translation=(0.0, 0.0, 0.0), scale=1.0) -> "SpatialTransform":
        ax, ay, az = np.deg2rad([rx_deg, ry_deg, rz_deg])
        cx, sx = np.cos(ax), np.sin(ax)
        cy, sy = np.cos(ay), np.sin(ay)
        cz, sz = np.cos(az), np.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return cls(rz @ ry @ rx, np.asarray(translation, dtype=np.float64), scale)

    def compose(self, other: "SpatialTransform") -> "SpatialTransform":
        """self after other: apply(self.compose(other), v) == apply(self, apply(other, v))."""
        return SpatialTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.scale * (self.rotation @ other.translation) + self.translation,
            scale=self.scale * other.scale,
        )


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (T, 3) vertex indices
    texture_coords: np.ndarray  # (V, 2) in [0,1]^2
    radiance_texture: np.ndarray  # (Ht, Wt, 3) linear radiance

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.texture_coords = np.ascontiguousarray(self.texture_coords, dtype=np.float64)
        self.radiance_texture = np.ascontiguousarray(self.radiance_texture, dtype=np.float64)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise RenderError("triangle indices out of range")

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)


def depth_to_mesh(
    d: DepthMap,
    k: CameraIntrinsics,
    appearance: np.ndarray,
    discontinuity_ratio: float = 1.2,
) -> Mesh:
    """Unproject one vertex per pixel, two triangles per pixel quad.

    Triangles whose vertex depths span more than `discontinuity_ratio`
    (max/min) are dropped so depth steps do not produce rubber sheets.
    NaN depths mark invalid pixels; their triangles are dropped too.
    """
    appearance = np.asarray(appearance, dtype=np.float64)
    if appearance.ndim == 2:
        appearance = appearance[:, :, None].repeat(3, axis=2)
    h, w = d.height, d.width
    if appearance.shape[:2] != (h, w):
        raise RenderError(
            f"appearance {appearance.shape[:2]} and depth {(h, w)} dimensions differ"
        )
    z = d.depth.astype(np.float64)
    invalid = ~np.isfinite(z)
    if np.any(z[~invalid] <= 0):
        raise RenderError("depth values must be positive")

    cx, cy = k.principal_point
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = jj + 0.5
    v = ii + 0.5
    x = (u - cx) / k.focal_length * z
    y = (v - cy) / k.focal_length * z
    vertices = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    tex = np.stack([u / w, v / h], axis=-1).reshape(-1, 2)

    idx = np.arange(h * w).reshape(h, w)
    v00 = idx[:-1, :-1].ravel()
    v01 = idx[:-1, 1:].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    tris = np.concatenate(
        [np.stack([v00, v10, v11], axis=1), np.stack([v00, v11, v01], axis=1)]
    )

    depth_flat = np.where(invalid, np.nan, z).ravel()
    tri_depth = depth_flat[tris]
    ok = np.all(np.isfinite(tri_depth), axis=1)
    with np.errstate(invalid="ignore"):
        ratio = np.nanmax(tri_depth, axis=1) / np.nanmin(tri_depth, axis=1)
    ok &= ~(ratio > discontinuity_ratio)
    return Mesh(
        vertices=vertices,
        triangles=tris[ok],
        texture_coords=tex,
        radiance_texture=appearance,
    )


def apply_transform(m: Mesh, h: SpatialTransform) -> Mesh:
    verts = (h.scale * m.vertices) @ h.rotation.T + h.translation
    return Mesh(
        vertices=verts,
        triangles=m.triangles,
        texture_coords=m.texture_coords,
        radiance_texture=m.radiance_texture,
    )
