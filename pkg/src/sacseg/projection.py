"""Spherical projection of LiDAR point clouds into (h, w, 5) images."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

log = logging.getLogger(__name__)

CHANNELS = ("x", "y", "z", "r", "intensity")


@dataclass
class PointCloud:
    """Points as an (N, 4) array of x, y, z [m] and intensity; optional labels."""

    points: np.ndarray
    labels: np.ndarray | None = None
    dropped_zero: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        labels = None if self.labels is None else np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels is not None and len(labels) != len(pts):
            raise ValueError(f"{len(labels)} labels for {len(pts)} points")
        zero = np.all(pts[:, :3] == 0.0, axis=1)
        if zero.any():
            log.debug("dropping %d zero-range points", int(zero.sum()))
            pts = pts[~zero]
            if labels is not None:
                labels = labels[~zero]
        self.points = pts
        self.labels = labels
        self.dropped_zero += int(zero.sum())

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class ProjectionConfig:
    h: int = 64
    w: int = 2048
    fov_up_deg: float = 3.0
    fov_down_deg: float = 25.0
    # use the offset exactly as printed: (asin(z/r) + f_up) / f
    literal_offset: bool = False
    # which point a pixel keeps when several land on it
    keep: str = "farthest"

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0:
            raise ValueError("image size must be positive")
        if self.fov_up_deg + self.fov_down_deg <= 0:
            raise ValueError("vertical field of view must be positive")
        if self.keep not in ("farthest", "nearest"):
            raise ValueError(f"keep must be 'farthest' or 'nearest', got {self.keep!r}")

    @property
    def f_up(self) -> float:
        return math.radians(self.fov_up_deg)

    @property
    def f_down(self) -> float:
        return math.radians(self.fov_down_deg)

    @property
    def f(self) -> float:
        return self.f_up + self.f_down

    def to_dict(self) -> dict:
        return dict(h=self.h, w=self.w, fov_up_deg=self.fov_up_deg, fov_down_deg=self.fov_down_deg,
                    literal_offset=self.literal_offset, keep=self.keep)


@dataclass
class LidarImage:
    features: np.ndarray            # (1, 5, h, w): x, y, z, r, intensity
    mask: np.ndarray                # (h, w) bool
    index_map: np.ndarray           # (h, w) int, -1 where empty
    coord_map: np.ndarray           # (1, 3, h, w)
    label_map: np.ndarray | None = None   # (h, w), 0 where empty
    summary: dict = field(default_factory=dict)

    @property
    def hw(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def fill_rate(self) -> float:
        return float(self.mask.mean())


def project_points(xyz: np.ndarray, cfg: ProjectionConfig):
    """Vectorised projection: returns (p column, q row, r range, clamped mask)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(r <= 0):
        raise ValueError("zero-range point cannot be projected")
    pf = 0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.w
    offset = cfg.f_up if cfg.literal_offset else cfg.f_down
    qf = (1.0 - (np.arcsin(np.clip(z / r, -1.0, 1.0)) + offset) / cfg.f) * cfg.h
    p = np.floor(pf).astype(np.int64)
    q = np.floor(qf).astype(np.int64)
    clamped = (p < 0) | (p >= cfg.w) | (q < 0) | (q >= cfg.h)
    return np.clip(p, 0, cfg.w - 1), np.clip(q, 0, cfg.h - 1), r, clamped


def project_point(point, cfg: ProjectionConfig) -> tuple[int, int, float]:
    """(p column, q row, r) for a single (x, y, z[, intensity]) point."""
    p, q, r, _ = project_points(np.asarray(point, dtype=np.float64)[:3], cfg)
    return int(p[0]), int(q[0]), float(r[0])


def build_lidar_image(cloud: PointCloud, cfg: ProjectionConfig) -> LidarImage:
    """Rasterise a cloud; each pixel keeps the farthest point by default.

    Ties in range go to the larger point index.
    """
    if len(cloud) == 0:
        raise ValueError("cannot project an empty point cloud")
    h, w = cfg.h, cfg.w
    p, q, r, clamped = project_points(cloud.xyz, cfg)
    key = q * w + p
    idx = np.arange(len(cloud))
    rank = r if cfg.keep == "farthest" else -r
    order = np.lexsort((idx, rank, key))
    ks = key[order]
    last = np.r_[ks[1:] != ks[:-1], True]
    winners = order[last]
    wq, wp = q[winners], p[winners]

    features = np.zeros((1, 5, h, w), dtype=np.float64)
    grid = features[0]
    grid[:3, wq, wp] = cloud.xyz[winners].T
    grid[3, wq, wp] = r[winners]
    grid[4, wq, wp] = cloud.intensity[winners]
    mask = np.zeros((h, w), dtype=bool)
    mask[wq, wp] = True
    index_map = np.full((h, w), -1, dtype=np.int64)
    index_map[wq, wp] = winners
    label_map = None
    if cloud.labels is not None:
        label_map = np.zeros((h, w), dtype=np.int64)
        label_map[wq, wp] = cloud.labels[winners]
    summary = {
        "points": len(cloud),
        "masked_pixels": int(mask.sum()),
        "fill_rate": float(mask.mean()),
        "collisions": int(len(cloud) - len(winners)),
        "clamped": int(clamped.sum()),
        "dropped_zero": int(cloud.dropped_zero),
    }
    return LidarImage(features, mask, index_map, features[:, :3].copy(), label_map, summary)


def restore_labels(pred: np.ndarray, cloud: PointCloud, cfg: ProjectionConfig) -> np.ndarray:
    """Give every point the 2D prediction at its own pixel (occluded points included)."""
    pred = np.asarray(pred)
    if pred.shape != (cfg.h, cfg.w):
        raise ValueError(f"prediction shape {pred.shape} does not match image {(cfg.h, cfg.w)}")
    p, q, _, _ = project_points(cloud.xyz, cfg)
    return pred[q, p]


# -- per-pixel feature statistics ---------------------------------------------

@dataclass
class ChannelStats:
    mean_maps: np.ndarray          # (5, h, w), NaN where never masked
    count_map: np.ndarray          # (h, w)
    pixels: dict                   # (q, p) -> {channel: dict(mean, count, hist, edges)}


def channel_stats(scans, sample_pixels, bins: int = 20) -> ChannelStats:
    """Accumulate per-pixel channel means and histograms over masked occurrences."""
    scans = list(scans)
    if not scans:
        raise ValueError("channel_stats needs at least one scan")
    h, w = scans[0].hw
    for q, p in sample_pixels:
        if not (0 <= q < h and 0 <= p < w):
            raise ValueError(f"sample pixel {(q, p)} outside {h}x{w} image")
    total = np.zeros((5, h, w))
    count = np.zeros((h, w), dtype=np.int64)
    samples = {tuple(px): [] for px in sample_pixels}
    for scan in scans:
        feats = scan.features[0]
        total += np.where(scan.mask, feats, 0.0)
        count += scan.mask
        for (q, p), acc in samples.items():
            if scan.mask[q, p]:
                acc.append(feats[:, q, p])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_maps = np.where(count > 0, total / count, np.nan)
    pixels = {}
    for px, acc in samples.items():
        values = np.array(acc).reshape(-1, 5)
        entry = {}
        for c, name in enumerate(CHANNELS):
            v = values[:, c]
            if len(v):
                hist, edges = np.histogram(v, bins=bins)
                entry[name] = dict(mean=float(v.mean()), count=len(v), hist=hist, edges=edges)
            else:
                entry[name] = dict(mean=float("nan"), count=0, hist=np.zeros(bins, dtype=np.int64),
                                   edges=np.zeros(bins + 1))
        pixels[px] = entry
    return ChannelStats(mean_maps, count, pixels)


def default_sample_pixels(h: int, w: int) -> list[tuple[int, int]]:
    """Nine pixels on a 3x3 grid at the quarter points of the image."""
    return [(h * a // 4, w * b // 4) for a in (1, 2, 3) for b in (1, 2, 3)]


def write_stats(stats: ChannelStats, out_dir) -> list[Path]:
    """Emit stats.csv, one histogram CSV per sampled pixel and x/y/z mean maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "stats.csv"]
    with open(written[0], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["q", "p", "channel", "mean", "count"])
        for (q, p), entry in stats.pixels.items():
            for name in CHANNELS:
                e = entry[name]
                wr.writerow([q, p, name, "" if e["count"] == 0 else repr(e["mean"]), e["count"]])
    for (q, p), entry in stats.pixels.items():
        path = out / f"hist_q{q}_p{p}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["channel", "bin_lo", "bin_hi", "count"])
            for name in CHANNELS:
                e = entry[name]
                for lo, hi, n in zip(e["edges"][:-1], e["edges"][1:], e["hist"]):
                    wr.writerow([name, repr(float(lo)), repr(float(hi)), int(n)])
        written.append(path)
    for c, name in enumerate(CHANNELS[:3]):
        path = out / f"mean_{name}.csv"
        np.savetxt(path, stats.mean_maps[c], delimiter=",", fmt="%.6g")
        written.append(path)
    return written


def spatial_prior_scores(stats: ChannelStats) -> dict:
    """How strongly the mean maps follow the projection's geometric prior.

    ``row_z_spearman``: rank correlation of row index vs. row-mean z (expect
    strongly negative). ``col_x_pearson``: correlation of column-mean x with
    cos(2 pi p / w) (expect |r| near 1). ``row_x_pearson``: the same per row,
    for rows with full coverage.
    """
    h, w = stats.count_map.shape
    counts = stats.count_map
    z_tot = np.nansum(stats.mean_maps[2] * counts, axis=1)
    n_row = counts.sum(axis=1)
    rows = np.flatnonzero(n_row > 0)
    row_z = z_tot[rows] / n_row[rows]
    spearman = float(sps.spearmanr(rows, row_z).statistic) if len(rows) > 2 else float("nan")

    x_tot = np.nansum(stats.mean_maps[0] * counts, axis=0)
    n_col = counts.sum(axis=0)
    cols = np.flatnonzero(n_col > 0)
    col_x = x_tot[cols] / n_col[cols]
    basis = np.cos(2 * np.pi * (cols + 0.5) / w)
    col_pearson = float(np.corrcoef(col_x, basis)[0, 1]) if len(cols) > 2 else float("nan")

    row_pearson = []
    full = np.cos(2 * np.pi * (np.arange(w) + 0.5) / w)
    for q in range(h):
        if np.all(counts[q] > 0):
            row_pearson.append(float(np.corrcoef(stats.mean_maps[0, q], full)[0, 1]))
    return {"row_z_spearman": spearman, "col_x_pearson": col_pearson,
            "row_x_pearson": np.array(row_pearson)}
