"""Pinhole projection and closed-form global root alignment.

Conventions: camera frame is x right, y down, z forward. 3D coordinates are
millimetres, 2D coordinates are pixels. Poses are arrays shaped ``(..., J, 3)``
or ``(..., J, 2)``; every function broadcasts over leading batch axes, and a
camera whose fields are arrays of shape ``(B,)`` pairs one camera with each
batch element.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BadConfig,
    DegenerateSource,
    DegenerateTarget,
    DepthBehindCamera,
)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        fx, fy = np.asarray(self.fx), np.asarray(self.fy)
        cx, cy = np.asarray(self.cx), np.asarray(self.cy)
        w, h = np.asarray(self.width), np.asarray(self.height)
        if not (np.all(fx > 0) and np.all(fy > 0)):
            raise BadConfig(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (np.all(0 < cx) and np.all(cx < w) and np.all(0 < cy) and np.all(cy < h)):
            raise BadConfig("principal point must lie strictly inside the image")

    @classmethod
    def stack(cls, cams: Sequence["CameraIntrinsics"]) -> "CameraIntrinsics":
        """Batch several cameras into one whose fields are ``(B,)`` arrays."""
        return cls(*(np.array([getattr(c, f) for c in cams], dtype=float)
                     for f in ("fx", "fy", "cx", "cy", "width", "height")))

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


class BoxExtent(NamedTuple):
    dx: np.ndarray
    dy: np.ndarray


def _field(value) -> np.ndarray:
    # (B,) camera fields broadcast against (B, J) joint arrays
    return np.asarray(value, dtype=float)[..., None]


def project_pose(pose, root, cam: CameraIntrinsics) -> np.ndarray:
    """Exact perspective projection of a root-relative pose translated by ``root``."""
    pose = np.asarray(pose, dtype=float)
    root = np.asarray(root, dtype=float)
    p = pose + root[..., None, :]
    z = p[..., 2]
    if np.any(z <= 0):
        raise DepthBehindCamera(f"joint depth must be positive, min depth {z.min():.6g} mm")
    x = _field(cam.fx) * p[..., 0] / z + _field(cam.cx)
    y = _field(cam.fy) * p[..., 1] / z + _field(cam.cy)
    return np.stack([x, y], axis=-1)


def project_pose_approx(pose, root, cam: CameraIntrinsics) -> np.ndarray:
    """Projection with every joint depth replaced by the root depth."""
    pose = np.asarray(pose, dtype=float)
    root = np.asarray(root, dtype=float)
    zr = root[..., 2]
    if np.any(zr <= 0):
        raise DepthBehindCamera(f"root depth must be positive, got {zr.min():.6g} mm")
    p = pose + root[..., None, :]
    x = _field(cam.fx) * p[..., 0] / zr[..., None] + _field(cam.cx)
    y = _field(cam.fy) * p[..., 1] / zr[..., None] + _field(cam.cy)
    return np.stack([x, y], axis=-1)


def box_extent(pose2d) -> BoxExtent:
    pose2d = np.asarray(pose2d, dtype=float)
    span = pose2d.max(axis=-2) - pose2d.min(axis=-2)
    return BoxExtent(span[..., 0], span[..., 1])


def gpa_solve(target2d, source3d, cam: CameraIntrinsics, root_index: int = 0) -> np.ndarray:
    """Root translation placing ``source3d`` onto the scale and root of ``target2d``.

    Depth comes from matching the box perimeter under the approximate
    projection; lateral position from pinning the projected root to the
    target root. Returns ``(..., 3)`` in mm.
    """
    target2d = np.asarray(target2d, dtype=float)
    source3d = np.asarray(source3d, dtype=float)
    fx, fy = np.asarray(cam.fx, float), np.asarray(cam.fy, float)
    cx, cy = np.asarray(cam.cx, float), np.asarray(cam.cy, float)

    tar = box_extent(target2d)
    tar_sum = tar.dx + tar.dy
    if np.any(tar_sum <= 0):
        raise DegenerateTarget("target 2D box has zero extent")
    span = source3d.max(axis=-2) - source3d.min(axis=-2)
    src_sum = fx * span[..., 0] + fy * span[..., 1]
    if np.any(src_sum <= 0):
        raise DegenerateSource("source 3D pose has zero lateral extent")

    z = src_sum / tar_sum
    root2d = target2d[..., root_index, :]
    x = z * (root2d[..., 0] - cx) / fx
    y = z * (root2d[..., 1] - cy) / fy
    return np.stack([x, y, z], axis=-1)


def normalize_screen(pose2d, cam: CameraIntrinsics) -> np.ndarray:
    """Map pixels to screen coordinates; both axes are divided by half the width."""
    pose2d = np.asarray(pose2d, dtype=float)
    half_w = _field(cam.width) / 2.0
    half_h = _field(cam.height) / 2.0
    u = (pose2d[..., 0] - half_w) / half_w
    v = (pose2d[..., 1] - half_h) / half_w
    return np.stack([u, v], axis=-1)


def perimeter_bound(source3d, root) -> np.ndarray:
    """``zeta / (1 - zeta)`` with ``zeta`` the largest relative joint depth offset."""
    source3d = np.asarray(source3d, dtype=float)
    zr = np.asarray(root, dtype=float)[..., 2]
    zeta = np.abs(source3d[..., 2]).max(axis=-1) / zr
    return zeta / (1.0 - zeta)


def perimeter_residual(projected2d, target2d) -> np.ndarray:
    """Relative deviation of box perimeters ``|(dx+dy) - (dx'+dy')| / (dx'+dy')``."""
    a = box_extent(projected2d)
    b = box_extent(target2d)
    ref = b.dx + b.dy
    return np.abs((a.dx + a.dy) - ref) / ref
