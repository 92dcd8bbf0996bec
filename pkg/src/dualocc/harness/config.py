"""Run configuration: a flat dataclass readable from ``key=value`` text files."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence, Tuple, Union

from ..geometry import GridSpec
from ..scenegen import SceneConfig, default_rig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # grid
    grid_origin: Tuple[float, float, float] = (-6.4, -6.4, 0.0)
    voxel_size: float = 0.4
    grid_dims: Tuple[int, int, int] = (32, 32, 8)
    # cameras
    num_cameras: int = 4
    image_h: int = 64
    image_w: int = 128
    camera_height: float = 1.6
    camera_fov_deg: float = 90.0
    camera_pitch_deg: float = 0.0
    # scenes
    num_classes: int = 6
    large_density: float = 1.0
    thin_density: float = 1.0
    num_train: int = 200
    num_val: int = 50
    val_seed_offset: int = 100000
    # backbone
    backbone_width: int = 32
    backbone_stages: int = 4
    backbone_scales: Tuple[int, ...] = (2, 3)
    # bev branch
    bev_scale: int = 2
    depth_bins: int = 16
    depth_near: float = 0.4
    depth_far: float = 12.8
    bev_channels: int = 64
    bev_layers: int = 3
    # points branch
    num_queries: int = 64
    query_dim: int = 64
    schedule: Tuple[int, ...] = (1, 2, 4)
    init_points: int = 1
    num_samples: int = 4
    query_heads: int = 4
    # bridge
    ca_heads: int = 4
    ca_position: str = "post_encoder"  # post_encoder | pre_encoder
    # losses
    alpha: float = 0.1
    focal_gamma: float = 2.0
    focal_weight: float = 0.25
    lovasz_classes: str = "present"
    # optimisation
    lr: float = 1e-3  # from-scratch training over ~500 steps needs more than the usual 2e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    cosine_steps: int = 0  # 0 -> total training steps
    grad_clip: float = 10.0
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 1
    # ablation flags
    cross_attention: bool = True
    bev_branch: bool = True
    point_branch: bool = True
    residual_ca: bool = True
    supervise_init: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.bev_branch or self.point_branch):
            raise ConfigError("at least one branch must be enabled")
        if self.bev_scale not in self.backbone_scales:
            raise ConfigError(f"bev_scale {self.bev_scale} is not an exposed backbone scale {self.backbone_scales}")
        div = 2 ** max(self.backbone_scales)
        if self.image_h % div or self.image_w % div:
            raise ConfigError(f"image size must be divisible by {div}")
        if self.ca_position not in ("post_encoder", "pre_encoder"):
            raise ConfigError(f"unknown ca_position {self.ca_position!r}")
        if self.bev_channels % self.ca_heads or self.query_dim % self.query_heads:
            raise ConfigError("channel widths must be divisible by head counts")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")

    # -- derived objects ---------------------------------------------------
    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_origin, self.voxel_size, self.grid_dims)

    def rig(self):
        return default_rig(self.num_cameras, self.image_h, self.image_w, self.camera_height,
                           self.camera_fov_deg, self.camera_pitch_deg)

    def scene_config(self) -> SceneConfig:
        # camera keep-out radius: 1.6 m, shrunk to a quarter of the half-extent on small grids
        half = min(d * self.voxel_size for d in self.grid_dims[:2]) / 2
        return SceneConfig(self.num_classes, self.large_density, self.thin_density, self.grid,
                           clear_radius=min(1.6, half / 4))

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self, keys: Iterable[str] = None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def dataset_hash(self) -> str:
        return self.hash(DATASET_KEYS)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.to_dict().items())

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, pairs: Sequence[str]) -> "RunConfig":
        return self.replace(**parse_pairs(pairs))

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Sequence[str] = ()) -> "RunConfig":
        lines = [l.split("#", 1)[0].strip() for l in Path(path).read_text().splitlines()]
        return cls(**parse_pairs([l for l in lines if l]))._apply(overrides)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    def _apply(self, overrides: Sequence[str]) -> "RunConfig":
        return self.with_overrides(overrides) if overrides else self


DATASET_KEYS = (
    "grid_origin", "voxel_size", "grid_dims", "num_cameras", "image_h", "image_w", "camera_height",
    "camera_fov_deg", "camera_pitch_deg", "num_classes", "large_density", "thin_density",
)

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(key: str, raw: str) -> Any:
    typ = str(_FIELD_TYPES[key])
    raw = raw.strip()
    if "Tuple" in typ:
        elem = float if "float" in typ else int
        return tuple(elem(x) for x in raw.split(",") if x.strip())
    if typ == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_pairs(pairs: Sequence[str]) -> Dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return out


def tiny_config(**kw) -> RunConfig:
    """Gradient-check scale: 2 cameras at 16x32, 8x8x4 grid, 2 queries, 2 stages."""
    base = dict(
        grid_origin=(-1.6, -1.6, 0.0), grid_dims=(8, 8, 4), num_cameras=2, image_h=16, image_w=32,
        camera_height=0.8, backbone_width=4, depth_bins=4, depth_near=0.4, depth_far=3.2, bev_channels=8,
        bev_layers=1, num_queries=2, query_dim=8, schedule=(1, 2), num_samples=2, query_heads=2, ca_heads=2,
    )
    base.update(kw)
    return RunConfig(**base)
