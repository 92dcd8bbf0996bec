"""Camera projection, voxel indexing, frustum generation and voxelization.

Conventions: the ego frame is right-handed with z up. Camera frames are
z-forward, x-right, y-down. Pixel ``(col, row)`` covers ``[col, col + 1)``
along u, so the centre of the top-left pixel sits at ``(0.5, 0.5)``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

GRID_MAGIC = b"OCCV1"
PAYLOAD_LABELS = 0
PAYLOAD_SCORES = 1


class ContractError(ValueError):
    """Raised when an operation is called with inputs that violate its contract."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, ego -> camera
    translation: np.ndarray  # 3, metres
    image_h: int
    image_w: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if self.image_h < 1 or self.image_w < 1:
            raise ContractError("image size must be at least 1x1")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ContractError("rotation must be orthonormal with determinant +1")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def looking_along(cls, yaw: float, position: Sequence[float], fx: float, fy: float,
                      image_h: int, image_w: int, pitch: float = 0.0) -> "CameraModel":
        """Camera at ``position`` looking along ego heading ``yaw`` (radians), tilted down by ``pitch``."""
        cy_, sy_ = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        forward = np.array([cy_ * cp, sy_ * cp, -sp])
        right = np.array([sy_, -cy_, 0.0])
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        trans = -rot @ np.asarray(position, dtype=np.float64)
        return cls(fx, fy, image_w / 2.0, image_h / 2.0, rot, trans, image_h, image_w)


CameraRig = Sequence[CameraModel]


@dataclass(frozen=True)
class GridSpec:
    origin: Tuple[float, float, float]
    voxel_size: float
    dims: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.voxel_size <= 0:
            raise ContractError("voxel_size must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ContractError("dims must be three positive integers")

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * np.asarray(self.dims)

    def centers(self) -> np.ndarray:
        """Voxel centres as an ``X x Y x Z x 3`` array."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class VoxelGrid:
    """A grid spec plus a payload: ``X x Y x Z`` integer labels or ``X x Y x Z x K`` scores."""

    spec: GridSpec
    payload: np.ndarray

    def __post_init__(self):
        shape = tuple(self.payload.shape)
        if shape[:3] != self.spec.dims or len(shape) not in (3, 4):
            raise ContractError(f"payload shape {shape} does not match grid dims {self.spec.dims}")

    @property
    def is_labels(self) -> bool:
        return self.payload.ndim == 3

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(GRID_MAGIC)
        buf.write(struct.pack("<3i", *self.spec.dims))
        buf.write(struct.pack("<d", self.spec.voxel_size))
        buf.write(struct.pack("<3d", *self.spec.origin))
        if self.is_labels:
            buf.write(struct.pack("<B", PAYLOAD_LABELS))
            buf.write(np.ascontiguousarray(self.payload, dtype="<u1").tobytes())
        else:
            buf.write(struct.pack("<B", PAYLOAD_SCORES))
            buf.write(struct.pack("<I", self.payload.shape[3]))
            buf.write(np.ascontiguousarray(self.payload, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "VoxelGrid":
        if data[:5] != GRID_MAGIC:
            raise ContractError("not an OCCV1 grid container")
        off = 5
        dims = struct.unpack_from("<3i", data, off)
        off += 12
        (voxel_size,) = struct.unpack_from("<d", data, off)
        off += 8
        origin = struct.unpack_from("<3d", data, off)
        off += 24
        (kind,) = struct.unpack_from("<B", data, off)
        off += 1
        spec = GridSpec(origin, voxel_size, dims)
        if kind == PAYLOAD_LABELS:
            payload = np.frombuffer(data, dtype="<u1", count=int(np.prod(dims)), offset=off)
            payload = payload.reshape(dims).astype(np.int64)
        elif kind == PAYLOAD_SCORES:
            (k,) = struct.unpack_from("<I", data, off)
            off += 4
            payload = np.frombuffer(data, dtype="<f4", count=int(np.prod(dims)) * k, offset=off)
            payload = payload.reshape(*dims, k).copy()
        else:
            raise ContractError(f"unknown payload kind {kind}")
        return cls(spec, payload)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VoxelGrid":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class LabeledPointSet:
    locations: np.ndarray  # N x 3
    labels: np.ndarray  # N ints in [1, C], or N x C scores

    def __len__(self):
        return len(self.locations)


def project_points(
    camera: CameraModel, points: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project ``(..., 3)`` ego points into ``camera``.

    Returns ``(u, v, depth, in_view)``; u/v are undefined where ``in_view`` is False.
    """
    rot = torch.as_tensor(camera.rotation, dtype=points.dtype, device=points.device)
    trans = torch.as_tensor(camera.translation, dtype=points.dtype, device=points.device)
    cam = points @ rot.T + trans
    depth = cam[..., 2]
    safe = torch.where(depth > 0, depth, torch.ones_like(depth))
    u = camera.fx * cam[..., 0] / safe + camera.cx
    v = camera.fy * cam[..., 1] / safe + camera.cy
    in_view = (depth > 0) & (u >= 0) & (u < camera.image_w) & (v >= 0) & (v < camera.image_h)
    return u, v, depth, in_view


def project_point(camera: CameraModel, p_ego: Sequence[float]) -> Optional[Tuple[float, float, float]]:
    """Project a single ego point; ``None`` when it is behind the camera or off-image."""
    p = np.asarray(p_ego, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ContractError("point must be finite")
    u, v, d, ok = project_points(camera, torch.from_numpy(p))
    if not bool(ok):
        return None
    return float(u), float(v), float(d)


def voxel_index(grid: GridSpec, p: Sequence[float]) -> Optional[Tuple[int, int, int]]:
    p = np.asarray(p, dtype=np.float64)
    idx = np.floor((p - np.asarray(grid.origin)) / grid.voxel_size).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


def voxel_indices(grid: GridSpec, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Vectorised :func:`voxel_index`: ``(..., 3)`` points to flat indices plus a validity mask."""
    origin = torch.as_tensor(grid.origin, dtype=points.dtype, device=points.device)
    dims = torch.as_tensor(grid.dims, device=points.device)
    ijk = torch.floor((points - origin) / grid.voxel_size).long()
    valid = ((ijk >= 0) & (ijk < dims)).all(dim=-1)
    ijk = torch.where(valid[..., None], ijk, torch.zeros_like(ijk))
    flat = (ijk[..., 0] * dims[1] + ijk[..., 1]) * dims[2] + ijk[..., 2]
    return flat, valid


def voxelize(points: torch.Tensor, scores: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Scatter-add per-point class scores into an ``X x Y x Z x (C+1)`` volume.

    ``points`` is ``(N, 3)`` or ``(B, N, 3)``; ``scores`` has ``C`` semantic
    channels per point. Channel 0 (free) of the output stays zero and points
    outside the grid are dropped. Differentiable with respect to ``scores``.
    """
    batched = points.dim() == 3
    if not batched:
        points, scores = points[None], scores[None]
    if scores.shape[:2] != points.shape[:2]:
        raise ContractError("points and scores disagree on the number of points")
    n_batch, _, n_cls = scores.shape
    n_vox = int(np.prod(grid.dims))
    flat, valid = voxel_indices(grid, points)
    contrib = scores * valid[..., None].to(scores.dtype)
    out = scores.new_zeros(n_batch, n_vox, n_cls)
    out = out.scatter_add(1, flat[..., None].expand(-1, -1, n_cls), contrib)
    out = torch.cat([out.new_zeros(n_batch, n_vox, 1), out], dim=-1)
    out = out.view(n_batch, *grid.dims, n_cls + 1)
    return out if batched else out[0]


def frustum_points(camera: CameraModel, feat_h: int, feat_w: int, depth_bins: Sequence[float]) -> np.ndarray:
    """Back-project every feature cell centre at every depth bin into the ego frame.

    Returns an ``feat_h x feat_w x D x 3`` array.
    """
    depth = np.asarray(depth_bins, dtype=np.float64)
    if depth.size == 0:
        raise ContractError("depth_bins must not be empty")
    if np.any(depth <= 0) or np.any(np.diff(depth) <= 0):
        raise ContractError("depth_bins must be positive and strictly increasing")
    stride_v = camera.image_h / feat_h
    stride_u = camera.image_w / feat_w
    v = (np.arange(feat_h) + 0.5) * stride_v
    u = (np.arange(feat_w) + 0.5) * stride_u
    vv, uu, dd = np.meshgrid(v, u, depth, indexing="ij")
    cam = np.stack([(uu - camera.cx) / camera.fx * dd, (vv - camera.cy) / camera.fy * dd, dd], axis=-1)
    # ego = R^T (cam - t)
    return (cam - camera.translation) @ camera.rotation
