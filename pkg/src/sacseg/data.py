"""Synthetic labelled LiDAR scenes, SemanticKITTI reading and scan datasets.

Cloud cache format (little-endian)::

    bytes 0-3    magic b"SPCL"
    bytes 4-7    uint32 version (1)
    bytes 8-15   uint64 point count N
    byte  16     uint8 has_labels (0 or 1)
    bytes 17-19  zero padding
    then N packed records: float64 x, y, z, intensity [+ uint32 label]
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .projection import PointCloud, ProjectionConfig, build_lidar_image

log = logging.getLogger(__name__)

IGNORE = 0
CLASSES = {"ground": 1, "building": 2, "vehicle": 3, "pole": 4, "vegetation": 5}
CLASS_NAMES = {v: k for k, v in CLASSES.items()}
NUM_CLASSES = 1 + len(CLASSES)

# per-class intensity mean; noise is added on top
_INTENSITY = {1: 0.30, 2: 0.45, 3: 0.60, 4: 0.40, 5: 0.50}


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    num_beams: int = 64
    azimuth_steps: int = 512
    fov_up_deg: float = 3.0
    fov_down_deg: float = 25.0
    sensor_height: float = 1.73
    max_range: float = 50.0
    buildings: tuple[int, int] = (2, 5)
    vehicles: tuple[int, int] = (3, 8)
    poles: tuple[int, int] = (4, 10)
    vegetation: tuple[int, int] = (3, 8)
    # std of beam angle jitter, in pixels
    angle_jitter: float = 0.2
    intensity_noise: float = 0.15

    def __post_init__(self):
        if self.num_beams <= 0 or self.azimuth_steps <= 0:
            raise ValueError("beam and azimuth counts must be positive")
        for name in ("buildings", "vehicles", "poles", "vegetation"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"bad object count range for {name}: {(lo, hi)}")

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(self.num_beams, self.azimuth_steps, self.fov_up_deg,
                                self.fov_down_deg)


# -- ray casting ------------------------------------------------------------

def _rays(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    up, down = math.radians(cfg.fov_up_deg), math.radians(cfg.fov_down_deg)
    fov = up + down
    beam = np.arange(cfg.num_beams) + 0.5
    col = np.arange(cfg.azimuth_steps) + 0.5
    elev = up - beam * fov / cfg.num_beams
    azim = np.pi * (1.0 - 2.0 * col / cfg.azimuth_steps)
    el, az = np.meshgrid(elev, azim, indexing="ij")
    el = el + rng.normal(0.0, cfg.angle_jitter, el.shape) * fov / cfg.num_beams
    az = az + rng.normal(0.0, cfg.angle_jitter, az.shape) * 2 * np.pi / cfg.azimuth_steps
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return d.reshape(-1, 3)


def _hit_ground(d, z0):
    t = np.full(len(d), np.inf)
    down = d[:, 2] < 0
    t[down] = z0 / d[down, 2]
    return t


def _hit_box(d, cx, cy, yaw, hx, hy, z_lo, z_hi):
    c, s = math.cos(yaw), math.sin(yaw)
    # ray origin is the sensor at (0, 0, 0); move to the box frame
    ox, oy = -(c * cx + s * cy), -(-s * cx + c * cy)
    dx, dy = c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_near = np.full(len(d), -np.inf)
        t_far = np.full(len(d), np.inf)
        for o, dd, lo, hi in ((ox, dx, -hx, hx), (oy, dy, -hy, hy), (0.0, dz, z_lo, z_hi)):
            t1, t2 = (lo - o) / dd, (hi - o) / dd
            parallel = dd == 0
            inside = (o >= lo) & (o <= hi)
            t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
            t_near = np.maximum(t_near, np.minimum(t1, t2))
            t_far = np.minimum(t_far, np.maximum(t1, t2))
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _hit_cylinder(d, cx, cy, radius, z_lo, z_hi):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(len(d), np.inf)
    ok = (disc >= 0) & (a > 0)
    t_ok = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    z = t_ok * d[ok, 2]
    good = (t_ok > 0) & (z >= z_lo) & (z <= z_hi)
    t[np.flatnonzero(ok)[good]] = t_ok[good]
    return t


def _hit_sphere(d, center, radius):
    b = -2.0 * d @ center
    c = center @ center - radius * radius
    disc = b * b - 4 * c
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    t_ok = (-b[ok] - np.sqrt(disc[ok])) / 2
    t[np.flatnonzero(ok)[t_ok > 0]] = t_ok[t_ok > 0]
    return t


def _polar(rng, lo, hi):
    dist = rng.uniform(lo, hi)
    ang = rng.uniform(-np.pi, np.pi)
    return dist * math.cos(ang), dist * math.sin(ang)


def generate_scene(cfg: SceneConfig) -> PointCloud:
    """Ray-cast one labelled scan: ground plane plus random boxes, cylinders and blobs."""
    rng = np.random.default_rng(cfg.seed)
    d = _rays(cfg, rng)
    ground_z = -cfg.sensor_height
    hits = [(_hit_ground(d, ground_z), CLASSES["ground"])]

    for _ in range(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1)):
        cx, cy = _polar(rng, 18.0, 40.0)
        hx, hy = rng.uniform(3.0, 8.0, size=2)
        hits.append((_hit_box(d, cx, cy, rng.uniform(0, np.pi), hx, hy, ground_z,
                              ground_z + rng.uniform(4.0, 12.0)), CLASSES["building"]))
    for _ in range(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1)):
        cx, cy = _polar(rng, 5.0, 25.0)
        hits.append((_hit_box(d, cx, cy, rng.uniform(0, np.pi), 2.25, 0.95, ground_z + 0.2,
                              ground_z + rng.uniform(1.4, 1.8)), CLASSES["vehicle"]))
    for _ in range(rng.integers(cfg.poles[0], cfg.poles[1] + 1)):
        cx, cy = _polar(rng, 4.0, 25.0)
        hits.append((_hit_cylinder(d, cx, cy, rng.uniform(0.1, 0.25), ground_z,
                                   ground_z + rng.uniform(3.0, 7.0)), CLASSES["pole"]))
    for _ in range(rng.integers(cfg.vegetation[0], cfg.vegetation[1] + 1)):
        cx, cy = _polar(rng, 6.0, 30.0)
        radius = rng.uniform(1.0, 3.0)
        center = np.array([cx, cy, ground_z + radius * rng.uniform(0.9, 1.6)])
        t = _hit_sphere(d, center, radius)
        # rough foliage: returns scatter up to 30% of the radius behind the surface
        t = t + rng.uniform(0.0, 0.3 * radius, size=len(t))
        hits.append((t, CLASSES["vegetation"]))

    ts = np.stack([t for t, _ in hits])
    labels_of = np.array([c for _, c in hits])
    first = ts.argmin(axis=0)
    t_min = ts[first, np.arange(len(d))]
    valid = np.isfinite(t_min) & (t_min <= cfg.max_range)
    xyz = d[valid] * t_min[valid, None]
    # keep the ground plane exact up to rounding of t * d
    labels = labels_of[first[valid]]
    ground = labels == CLASSES["ground"]
    xyz[ground, 2] = ground_z
    base = np.vectorize(_INTENSITY.get)(labels) if len(labels) else np.zeros(0)
    intensity = np.clip(base + rng.normal(0.0, cfg.intensity_noise, size=len(labels)), 0.0, 1.0)
    return PointCloud(np.column_stack([xyz, intensity]), labels)


# -- SemanticKITTI ------------------------------------------------------------

class KittiFormatError(ValueError):
    pass


def read_kitti_scan(points_path, labels_path=None) -> PointCloud:
    """Parse a velodyne ``.bin`` (float32 x, y, z, remission) and optional ``.label``."""
    raw = Path(points_path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) // 16 * 16
        raise KittiFormatError(f"{points_path}: {len(raw)} bytes is not a multiple of 16; "
                               f"truncated record at byte offset {whole}")
    if not raw:
        log.warning("%s: empty scan", points_path)
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    labels = None
    if labels_path is not None:
        lraw = Path(labels_path).read_bytes()
        if len(lraw) % 4:
            raise KittiFormatError(f"{labels_path}: {len(lraw)} bytes is not a multiple of 4; "
                                   f"truncated label at byte offset {len(lraw) // 4 * 4}")
        words = np.frombuffer(lraw, dtype="<u4")
        if len(words) != len(pts):
            n = min(len(words), len(pts))
            raise KittiFormatError(f"{labels_path}: {len(words)} labels for {len(pts)} points; "
                                   f"mismatch from label byte offset {4 * n}")
        labels = (words & 0xFFFF).astype(np.int64)
    return PointCloud(pts, labels)


KITTI_SPLITS = {
    "train": ["00", "01", "02", "03", "04", "05", "06", "07", "09", "10"],
    "val": ["08"],
    "test": [f"{s:02d}" for s in range(11, 22)],
}


def kitti_split_of(sequence: str) -> str:
    for split, seqs in KITTI_SPLITS.items():
        if sequence in seqs:
            return split
    raise ValueError(f"unknown SemanticKITTI sequence {sequence!r}")


# -- cloud cache --------------------------------------------------------------

_CACHE_HEADER = struct.Struct("<4sIQB3x")
_MAGIC = b"SPCL"


def _record_dtype(has_labels: bool) -> np.dtype:
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("intensity", "<f8")]
    if has_labels:
        fields.append(("label", "<u4"))
    return np.dtype(fields)


def save_cloud(path, cloud: PointCloud) -> None:
    has = cloud.labels is not None
    rec = np.zeros(len(cloud), dtype=_record_dtype(has))
    for k, name in enumerate(("x", "y", "z", "intensity")):
        rec[name] = cloud.points[:, k]
    if has:
        rec["label"] = cloud.labels
    Path(path).write_bytes(_CACHE_HEADER.pack(_MAGIC, 1, len(cloud), int(has)) + rec.tobytes())


def load_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, has = _CACHE_HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a version-1 cloud cache")
    dt = _record_dtype(bool(has))
    need = _CACHE_HEADER.size + count * dt.itemsize
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=_CACHE_HEADER.size)
    pts = np.column_stack([rec[n] for n in ("x", "y", "z", "intensity")])
    return PointCloud(pts, rec["label"].astype(np.int64) if has else None)


def load_any(path) -> PointCloud:
    """Read a cloud cache, or a KITTI ``.bin`` with a sibling ``labels/*.label`` if present."""
    path = Path(path)
    if path.read_bytes()[:4] == _MAGIC:
        return load_cloud(path)
    label = path.parent.parent / "labels" / (path.stem + ".label")
    return read_kitti_scan(path, label if label.exists() else None)


# -- datasets -----------------------------------------------------------------

@dataclass
class DatasetSpec:
    """Where scans come from: ``synthetic`` seeds or ``kitti`` sequences."""

    source: str = "synthetic"
    count: int = 0
    base_seed: int = 0
    root: str | None = None
    sequences: list[str] = field(default_factory=list)
    scene: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synthetic", "kitti"):
            raise ValueError(f"unknown dataset source {self.source!r}")

    @property
    def seeds(self) -> range:
        return range(self.base_seed, self.base_seed + self.count)

    def to_dict(self) -> dict:
        return asdict(self)


def check_disjoint(*specs: DatasetSpec) -> None:
    seen: list[tuple[DatasetSpec, set]] = []
    for spec in specs:
        keys = set(spec.seeds) if spec.source == "synthetic" else set(spec.sequences)
        for other, other_keys in seen:
            if other.source == spec.source and keys & other_keys:
                raise ValueError(f"dataset splits overlap on {sorted(keys & other_keys)[:5]}")
        seen.append((spec, keys))


def iter_clouds(spec: DatasetSpec) -> Iterator[tuple[str, PointCloud]]:
    if spec.source == "synthetic":
        for seed in spec.seeds:
            yield f"synthetic-{seed}", generate_scene(SceneConfig(seed=seed, **spec.scene))
        return
    root = Path(spec.root)
    for seq in spec.sequences:
        vel = root / "sequences" / seq / "velodyne"
        for bin_path in sorted(vel.glob("*.bin")):
            label = root / "sequences" / seq / "labels" / (bin_path.stem + ".label")
            yield f"{seq}/{bin_path.stem}", read_kitti_scan(bin_path, label if label.exists() else None)


def kitti_dataset(root, split: str) -> DatasetSpec:
    return DatasetSpec(source="kitti", root=str(root), sequences=list(KITTI_SPLITS[split]))


@dataclass
class Scan:
    name: str
    cloud: PointCloud
    image: object  # LidarImage


def dataset(spec: DatasetSpec, proj: ProjectionConfig | None = None) -> list[Scan]:
    """Materialise a split as projected scans, in deterministic order."""
    if proj is None:
        proj = SceneConfig(**spec.scene).projection() if spec.source == "synthetic" else ProjectionConfig()
    return [Scan(name, cloud, build_lidar_image(cloud, proj)) for name, cloud in iter_clouds(spec)]
