"""Procedural scenes, exact ground-truth grids and ray-cast multi-camera renders."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .geometry import CameraModel, ContractError, GridSpec, LabeledPointSet, VoxelGrid

GROUND, BUILDING, CAR, BARRIER, POLE, PEDESTRIAN = 1, 2, 3, 4, 5, 6
CLASS_NAMES = {0: "free", 1: "ground", 2: "building", 3: "car", 4: "barrier", 5: "pole", 6: "pedestrian"}
THIN_CLASSES = (POLE, PEDESTRIAN)
LARGE_CLASSES = (BUILDING, CAR, BARRIER)

PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],  # free (unused)
        [0.45, 0.45, 0.40],  # ground
        [0.80, 0.35, 0.20],  # building
        [0.15, 0.35, 0.85],  # car
        [0.90, 0.80, 0.15],  # barrier
        [0.85, 0.20, 0.75],  # pole
        [0.10, 0.80, 0.30],  # pedestrian
    ]
)
SKY = np.array([0.55, 0.75, 0.95])

IMAGE_MAGIC = b"IMGS1"

# (lx, ly, lz) ranges per large-box class, metres
_BOX_SIZES = {
    BUILDING: ((1.2, 2.8), (1.2, 2.8), (2.0, 2.8)),
    CAR: ((1.6, 2.0), (0.8, 1.0), (0.8, 1.2)),
    BARRIER: ((1.2, 2.4), (0.3, 0.5), (0.6, 1.0)),
}


@dataclass(frozen=True)
class Primitive:
    kind: str  # ground_plane | box | cylinder | pole
    position: Tuple[float, float, float]  # footprint centre x, y and base z
    yaw: float
    size: Tuple[float, ...]  # box: (lx, ly, lz); cylinder/pole: (radius, height); ground: (thickness,)
    class_id: int


@dataclass(frozen=True)
class Scene:
    seed: int
    primitives: Tuple[Primitive, ...]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "primitives": [asdict(p) for p in self.primitives]}, sort_keys=True)


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 6
    large_density: float = 1.0  # 1.0 -> 2..8 large boxes
    thin_density: float = 1.0  # 1.0 -> 1..6 thin primitives
    grid: GridSpec = field(default_factory=lambda: GridSpec((-6.4, -6.4, 0.0), 0.4, (32, 32, 8)))
    clear_radius: float = 1.6  # keeps the cameras outside every object


@dataclass
class RenderedFrame:
    images: np.ndarray  # N_C x H x W x 3, float32 in [0, 1]
    cameras: List[CameraModel]


_MAX_PLACEMENT_TRIES = 10000


def _sample_footprint_center(rng: np.random.Generator, cfg: SceneConfig, half_extent: float) -> Tuple[float, float]:
    lo = np.asarray(cfg.grid.origin[:2]) + half_extent
    hi = cfg.grid.upper[:2] - half_extent
    for _ in range(_MAX_PLACEMENT_TRIES):
        xy = rng.uniform(lo, hi)
        if np.hypot(*xy) - half_extent >= cfg.clear_radius:
            return float(xy[0]), float(xy[1])
    raise ContractError(f"no footprint of half-extent {half_extent} fits outside clear radius {cfg.clear_radius}")


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    if config.num_classes < 1:
        raise ContractError("scene config needs at least one semantic class")
    rng = np.random.default_rng(seed)
    grid = config.grid
    vs = grid.voxel_size
    ground_top = grid.origin[2] + vs
    prims: List[Primitive] = [Primitive("ground_plane", (0.0, 0.0, grid.origin[2]), 0.0, (vs,), GROUND)]
    height_cap = grid.upper[2] - ground_top
    # largest half-diagonal that still fits between the camera keep-out disc and the grid border
    half_range = min(grid.upper[0] - grid.origin[0], grid.upper[1] - grid.origin[1]) / 2
    half_cap = 0.8 * (np.sqrt(2) * half_range - config.clear_radius) / (np.sqrt(2) + 1)
    if half_cap <= 0:
        raise ContractError(f"grid too small for clear radius {config.clear_radius}")

    n_large = 0
    if config.large_density > 0:
        n_large = int(rng.integers(2, 2 + round(6 * min(config.large_density, 1.0)) + 1))
    for _ in range(n_large):
        cls = int(rng.choice(LARGE_CLASSES, p=[0.4, 0.4, 0.2]))
        lx, ly, lz = (float(rng.uniform(*r)) for r in _BOX_SIZES[cls])
        lz = min(lz, height_cap)
        shrink = min(1.0, half_cap / (0.5 * np.hypot(lx, ly)))
        lx, ly = lx * shrink, ly * shrink
        yaw = float(rng.uniform(-np.pi / 2, np.pi / 2))
        x, y = _sample_footprint_center(rng, config, 0.5 * np.hypot(lx, ly))
        prims.append(Primitive("box", (x, y, ground_top), yaw, (lx, ly, lz), cls))

    n_thin = 0
    if config.thin_density > 0:
        n_thin = int(rng.integers(1, 1 + round(5 * min(config.thin_density, 1.0)) + 1))
    for _ in range(n_thin):
        if rng.random() < 0.5:
            kind, cls = "pole", POLE
            radius, height = float(rng.uniform(0.08, 0.15)), float(rng.uniform(min(2.0, height_cap), height_cap))
        else:
            kind, cls = "cylinder", PEDESTRIAN
            radius, height = float(rng.uniform(0.2, 0.3)), float(rng.uniform(1.4, 1.8))
        x, y = _sample_footprint_center(rng, config, vs)
        # snap to a voxel column centre so the column centre is inside the primitive
        x = grid.origin[0] + (np.floor((x - grid.origin[0]) / vs) + 0.5) * vs
        y = grid.origin[1] + (np.floor((y - grid.origin[1]) / vs) + 0.5) * vs
        prims.append(Primitive(kind, (float(x), float(y), ground_top), 0.0, (radius, height), cls))

    prims = [p for p in prims if p.class_id <= config.num_classes]
    return Scene(seed, tuple(prims))


def _inside(prim: Primitive, pts: np.ndarray, grid: GridSpec) -> np.ndarray:
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    px, py, pz = prim.position
    if prim.kind == "ground_plane":
        return (z >= pz) & (z <= pz + prim.size[0])
    if prim.kind == "box":
        c, s = np.cos(prim.yaw), np.sin(prim.yaw)
        lx = c * (x - px) + s * (y - py)
        ly = -s * (x - px) + c * (y - py)
        hx, hy, lz = prim.size[0] / 2, prim.size[1] / 2, prim.size[2]
        return (np.abs(lx) <= hx) & (np.abs(ly) <= hy) & (z >= pz) & (z <= pz + lz)
    radius, height = prim.size
    return ((x - px) ** 2 + (y - py) ** 2 <= radius**2) & (z >= pz) & (z <= pz + height)


def ground_truth_grid(scene: Scene, grid: GridSpec) -> VoxelGrid:
    """Label every voxel by testing its centre against the primitives; later primitives win."""
    centers = grid.centers()
    labels = np.zeros(grid.dims, dtype=np.int64)
    for prim in scene.primitives:
        labels[_inside(prim, centers, grid)] = prim.class_id
    return VoxelGrid(grid, labels)


def occupied_point_set(gt: VoxelGrid) -> LabeledPointSet:
    if not gt.is_labels:
        raise ContractError("occupied_point_set needs a label payload")
    idx = np.argwhere(gt.payload > 0)
    locations = np.asarray(gt.spec.origin) + (idx + 0.5) * gt.spec.voxel_size
    return LabeledPointSet(locations.astype(np.float64), gt.payload[tuple(idx.T)].astype(np.int64))


# ---------------------------------------------------------------------------
# rendering

def _ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (tmax >= np.maximum(tmin, 0.0))
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


def _ray_cylinder(origins, dirs, center, radius, z0, z1) -> np.ndarray:
    ox, oy = origins[..., 0] - center[0], origins[..., 1] - center[1]
    dx, dy = dirs[..., 0], dirs[..., 1]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius**2
    disc = b * b - 4 * a * c
    best = np.full(a.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = origins[..., 2] + t * dirs[..., 2]
            ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= z0) & (z <= z1)
            best = np.where(ok & (t < best), t, best)
        for zc in (z0, z1):
            t = (zc - origins[..., 2]) / dirs[..., 2]
            px, py = ox + t * dx, oy + t * dy
            ok = np.isfinite(t) & (t > 0) & (px * px + py * py <= radius**2)
            best = np.where(ok & (t < best), t, best)
    return best


def _ray_hit(prim: Primitive, origins: np.ndarray, dirs: np.ndarray, grid: GridSpec) -> np.ndarray:
    px, py, pz = prim.position
    if prim.kind == "ground_plane":
        lo = np.array([grid.origin[0], grid.origin[1], pz])
        hi = np.array([grid.upper[0], grid.upper[1], pz + prim.size[0]])
        return _ray_box(origins, dirs, lo, hi)
    if prim.kind == "box":
        c, s = np.cos(prim.yaw), np.sin(prim.yaw)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # ego -> box frame
        o = (origins - np.array([px, py, pz])) @ rot.T
        d = dirs @ rot.T
        hx, hy, lz = prim.size[0] / 2, prim.size[1] / 2, prim.size[2]
        return _ray_box(o, d, np.array([-hx, -hy, 0.0]), np.array([hx, hy, lz]))
    radius, height = prim.size
    return _ray_cylinder(origins, dirs, (px, py), radius, pz, pz + height)


def render(scene: Scene, rig: Sequence[CameraModel], grid: GridSpec = SceneConfig().grid,
           max_shade_distance: float = 20.0) -> RenderedFrame:
    """Ray-cast every pixel centre; colour = class palette dimmed with hit distance."""
    images = []
    for cam in rig:
        v, u = np.meshgrid(np.arange(cam.image_h) + 0.5, np.arange(cam.image_w) + 0.5, indexing="ij")
        d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
        dirs = d_cam @ cam.rotation  # R^T d
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origin = -cam.rotation.T @ cam.translation
        origins = np.broadcast_to(origin, dirs.shape)
        depth = np.full(dirs.shape[:2], np.inf)
        cls = np.zeros(dirs.shape[:2], dtype=np.int64)
        for prim in scene.primitives:
            t = _ray_hit(prim, origins, dirs, grid)
            closer = t < depth
            depth = np.where(closer, t, depth)
            cls = np.where(closer, prim.class_id, cls)
        hit = np.isfinite(depth)
        shade = np.clip(1.0 - np.where(hit, depth, 0.0) / max_shade_distance, 0.25, 1.0)
        img = np.where(hit[..., None], PALETTE[cls] * shade[..., None], SKY)
        images.append(np.clip(img, 0.0, 1.0))
    return RenderedFrame(np.stack(images).astype(np.float32), list(rig))


def default_rig(num_cameras: int = 4, image_h: int = 64, image_w: int = 128, height: float = 1.6,
                fov_deg: float = 90.0, pitch_deg: float = 0.0) -> List[CameraModel]:
    """Cameras evenly spaced in yaw at the ego origin."""
    f = (image_w / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return [
        CameraModel.looking_along(2 * np.pi * k / num_cameras, (0.0, 0.0, height), f, f, image_h, image_w,
                                  pitch=np.deg2rad(pitch_deg))
        for k in range(num_cameras)
    ]


# ---------------------------------------------------------------------------
# containers

def write_images(path: Union[str, Path], images: np.ndarray) -> None:
    n, h, w, _ = images.shape
    header = IMAGE_MAGIC + b"\x00" + struct.pack("<HII", n, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_images(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != IMAGE_MAGIC:
        raise ContractError(f"{path}: not an IMGS1 image container")
    n, h, w = struct.unpack_from("<HII", data, 6)
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(n, h, w, 3).copy()


@dataclass
class ManifestEntry:
    seed: int
    split: str
    grid_path: str
    image_path: str

    def line(self) -> str:
        return f"{self.seed} {self.split} {self.grid_path} {self.image_path}"

    @classmethod
    def parse(cls, line: str) -> "ManifestEntry":
        seed, split, grid_path, image_path = line.split()
        return cls(int(seed), split, grid_path, image_path)


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    lines = Path(path).read_text().splitlines()
    return [ManifestEntry.parse(l) for l in lines if l.strip()]


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry]) -> None:
    Path(path).write_text("".join(e.line() + "\n" for e in entries))


def class_counts(gt: VoxelGrid) -> Dict[int, int]:
    vals, counts = np.unique(gt.payload, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}
