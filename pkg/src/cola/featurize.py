"""Sparse voxelization and per-voxel geometric features.

Points are floor-quantized into a sparse integer grid. Each occupied voxel
yields a fixed 14-column feature row: point-count mass, height statistics,
intensity statistics, covariance eigen-shape descriptors and the occupancy
of the six face-adjacent voxels. These rows are the classifier input; they
stand in for a learned sparse-convolution front end.

Rows are keyed by voxel coordinate and emitted in lexicographic coordinate
order. Member points are reduced in a value-canonical order so the output
is bitwise independent of the input point permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .lidar_io import LabelArray, PointScan
from .seeding import rng_from

FEATURE_COLUMNS = (
    "log_count",
    "centroid_z",
    "z_extent",
    "intensity_mean",
    "intensity_std",
    "linearity",
    "planarity",
    "sphericity",
    "occ_x_neg",
    "occ_x_pos",
    "occ_y_neg",
    "occ_y_pos",
    "occ_z_neg",
    "occ_z_pos",
)
FEATURE_DIM = len(FEATURE_COLUMNS)

_NEIGHBOR_OFFSETS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]],
    dtype=np.int64,
)

_EIG_EPS = 1e-12


class InvalidVoxelSize(DataError):
    """Voxel size must be strictly positive."""


@dataclass
class VoxelGrid:
    """Sparse occupancy: voxel coordinates and their member point indices.

    ``coords`` has one row per occupied voxel in lexicographic (i, j, k)
    order; ``order``/``offsets`` slice the member point indices of voxel ``v``
    as ``order[offsets[v]:offsets[v + 1]]``.
    """

    voxel_size: float
    coords: np.ndarray
    order: np.ndarray
    offsets: np.ndarray

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.order.shape[0]

    def members(self, v: int) -> np.ndarray:
        return self.order[self.offsets[v]:self.offsets[v + 1]]

    @property
    def cells(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(int(c) for c in self.coords[v]): self.members(v) for v in range(self.n_voxels)}


def voxelize(scan: PointScan, voxel_size: float) -> VoxelGrid:
    """Floor-quantize points into voxel_size cells."""
    if not voxel_size > 0:
        raise InvalidVoxelSize(f"voxel size must be > 0, got {voxel_size}")
    pts = np.asarray(scan.points, dtype=np.float64)
    if pts.shape[0] == 0:
        return VoxelGrid(voxel_size, np.empty((0, 3), np.int64), np.empty(0, np.int64),
                         np.zeros(1, np.int64))
    keys = np.floor(pts[:, :3] / voxel_size).astype(np.int64)
    # Primary sort on (i, j, k), then on point values so member order does not
    # depend on the input permutation.
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0],
                        keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    new_cell = np.empty(order.shape[0], dtype=bool)
    new_cell[0] = True
    new_cell[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    starts = np.flatnonzero(new_cell)
    offsets = np.append(starts, order.shape[0]).astype(np.int64)
    coords = sorted_keys[starts]
    return VoxelGrid(voxel_size, coords, order.astype(np.int64), offsets)


def _eigen_shape(cov: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Linearity/planarity/sphericity from batched 3x3 covariances.

    Degenerate voxels (fewer than 3 points, or a vanishing largest
    eigenvalue) get all-zero shape features.
    """
    n = cov.shape[0]
    out = np.zeros((n, 3), dtype=np.float64)
    usable = counts >= 3
    if usable.any():
        lam = np.linalg.eigvalsh(cov[usable])  # ascending
        lam = np.clip(lam[:, ::-1], 0.0, None)  # descending, non-negative
        l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
        good = l1 > _EIG_EPS
        shape = np.zeros((lam.shape[0], 3), dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            shape[good, 0] = (l1[good] - l2[good]) / l1[good]
            shape[good, 1] = (l2[good] - l3[good]) / l1[good]
            shape[good, 2] = l3[good] / l1[good]
        out[usable] = shape
    return out


@dataclass
class FeatureMatrix:
    """One row of d features per occupied voxel, keyed by voxel coordinate."""

    coords: np.ndarray
    values: np.ndarray
    columns: tuple[str, ...] = FEATURE_COLUMNS

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


def compute_features(scan: PointScan, grid: VoxelGrid) -> FeatureMatrix:
    """Per-voxel geometric feature rows in the grid's row order."""
    if grid.n_points != len(scan):
        raise DataError("grid was not built from this scan (point count differs)")
    n = grid.n_voxels
    feats = np.zeros((n, FEATURE_DIM), dtype=np.float64)
    if n == 0:
        return FeatureMatrix(grid.coords.copy(), feats)
    pts = np.asarray(scan.points, dtype=np.float64)[grid.order]
    xyz = pts[:, :3]
    inten = pts[:, 3]
    starts = grid.offsets[:-1]
    counts = np.diff(grid.offsets).astype(np.float64)

    feats[:, 0] = np.log1p(counts)
    zsum = np.add.reduceat(xyz[:, 2], starts)
    feats[:, 1] = zsum / counts
    zmax = np.maximum.reduceat(xyz[:, 2], starts)
    zmin = np.minimum.reduceat(xyz[:, 2], starts)
    feats[:, 2] = zmax - zmin
    isum = np.add.reduceat(inten, starts)
    imean = isum / counts
    isq = np.add.reduceat(inten * inten, starts)
    feats[:, 3] = imean
    feats[:, 4] = np.sqrt(np.clip(isq / counts - imean * imean, 0.0, None))

    # Batched population covariance: E[xx^T] - mu mu^T.
    mu = np.add.reduceat(xyz, starts, axis=0) / counts[:, None]
    prods = xyz[:, :, None] * xyz[:, None, :]
    second = np.add.reduceat(prods.reshape(-1, 9), starts, axis=0) / counts[:, None]
    cov = second.reshape(-1, 3, 3) - mu[:, :, None] * mu[:, None, :]
    feats[:, 5:8] = _eigen_shape(cov, counts)

    occupied = {tuple(int(c) for c in row) for row in grid.coords}
    for col, off in enumerate(_NEIGHBOR_OFFSETS):
        neigh = grid.coords + off
        feats[:, 8 + col] = [1.0 if tuple(int(c) for c in row) in occupied else 0.0
                             for row in neigh]
    return FeatureMatrix(grid.coords.copy(), feats)


def voxel_labels(grid: VoxelGrid, labels: LabelArray) -> np.ndarray:
    """Majority label per voxel, aligned with the grid's row order.

    Ignore-labeled points (id 0) do not vote; ties break toward the smallest
    class id; voxels whose members are all ignore get 0.
    """
    semantic = np.asarray(labels.semantic, dtype=np.int64)
    if semantic.shape[0] != grid.n_points:
        raise DataError("labels are not paired with the voxelized scan")
    out = np.zeros(grid.n_voxels, dtype=np.int64)
    if grid.n_voxels == 0:
        return out
    sem_sorted = semantic[grid.order]
    voxel_of_point = np.repeat(np.arange(grid.n_voxels), np.diff(grid.offsets))
    keep = sem_sorted != 0
    if not keep.any():
        return out
    pairs = np.stack([voxel_of_point[keep], sem_sorted[keep]], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    # Order runs by voxel, then count descending, then label ascending, and
    # keep the first run per voxel.
    rank = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
    uniq = uniq[rank]
    first = np.ones(uniq.shape[0], dtype=bool)
    first[1:] = uniq[1:, 0] != uniq[:-1, 0]
    out[uniq[first, 0]] = uniq[first, 1]
    return out


@dataclass
class AugmentConfig:
    """Rigid-ish training-time augmentation: yaw, isotropic scale, jitter."""

    yaw_range_deg: float = 180.0
    scale_range: tuple[float, float] = (0.95, 1.05)
    jitter_sigma: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi < 2.0):
            raise ValueError(f"scale_range must lie within (0, 2), got {self.scale_range}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.yaw_range_deg < 0:
            raise ValueError("yaw_range_deg must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.yaw_range_deg == 0 and self.scale_range == (1.0, 1.0) and self.jitter_sigma == 0


def augment(scan: PointScan, cfg: AugmentConfig, seed: int) -> PointScan:
    """Yaw-rotate, scale about the origin, then jitter; labels stay paired.

    Deterministic per (scan, cfg, seed). Geometry is transformed in float64;
    intensity is untouched.
    """
    rng = rng_from(seed, "augment")
    pts = np.asarray(scan.points, dtype=np.float64).copy()
    angle = np.deg2rad(rng.uniform(-cfg.yaw_range_deg, cfg.yaw_range_deg))
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = pts[:, :3] @ rot.T
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    xyz = xyz * scale
    if cfg.jitter_sigma > 0:
        xyz = xyz + rng.normal(0.0, cfg.jitter_sigma, size=xyz.shape)
    pts[:, :3] = xyz
    return PointScan(points=pts, scan_id=scan.scan_id)


def features_to_csv(matrix: FeatureMatrix, labels: np.ndarray | None = None) -> str:
    """CSV export with a header row; consumed by external analysis tools."""
    header = ["i", "j", "k"]
    if labels is not None:
        header.append("label")
    header += list(matrix.columns)
    lines = [",".join(header)]
    for r in range(matrix.n_rows):
        row = [str(int(v)) for v in matrix.coords[r]]
        if labels is not None:
            row.append(str(int(labels[r])))
        row += [format(v, ".17g") for v in matrix.values[r]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
