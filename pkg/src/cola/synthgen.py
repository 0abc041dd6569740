"""Procedural generation of a heterogeneous multi-dataset LiDAR corpus.

Scenes are built from a small catalogue of analytic archetypes (ground
strips, boxes for vehicles and street furniture, vertical cylinders for
poles and trunks, ellipsoids for people and bushes, walls and buildings)
placed without overlap and sampled by a rotating-beam sensor model:
``n_beams`` elevation rings swept over azimuth, nearest analytic
ray-primitive hit per ray, Bernoulli dropout.

Each generated dataset gets its own fine vocabulary (different ids and
granularity per dataset) while every archetype carries a canonical coarse
category, so the generator doubles as its own labeling oracle: remapping a
dataset's fine labels must reproduce the archetype's coarse category at
every point.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import taxonomy
from .errors import DataError
from .lidar_io import (
    DatasetIndex,
    LabelArray,
    PointScan,
    index_dataset,
    write_label_file,
    write_manifest,
    write_point_scan,
)
from .seeding import derive_seed, rng_from
from .taxonomy import EIGHT_TO_FIVE, LabelMap, Variant

CURB_HEIGHT = 0.15
INTENSITY_NOISE = 0.06
MIN_ORIGIN_CLEARANCE = 2.5
PLACEMENT_RETRIES = 200


class PlacementFailure(DataError):
    """Objects could not be placed without overlap within the extent."""


class IoFailure(DataError):
    """Writing the corpus to disk failed."""


@dataclass(frozen=True)
class Archetype:
    """Geometry family plus its canonical coarse category per variant."""

    name: str
    kind: str  # ground_road | ground_side | box | cylinder | ellipsoid
    size_lo: tuple[float, ...]
    size_hi: tuple[float, ...]
    base_intensity: float
    eight: str
    ten: str
    z_base: float = 0.0

    def coarse_id(self, variant: Variant) -> int:
        eight_id = taxonomy.coarse_set(Variant.EIGHT).id_of(self.eight)
        if variant == Variant.EIGHT:
            return eight_id
        if variant == Variant.FIVE:
            return EIGHT_TO_FIVE[eight_id]
        return taxonomy.coarse_set(Variant.TEN).id_of(self.ten)


# box sizes are (lx, ly, lz); cylinders (radius, height); ellipsoids
# (horizontal semi-axis, vertical semi-axis).
ARCHETYPES: dict[str, Archetype] = {
    a.name: a
    for a in (
        Archetype("road", "ground_road", (), (), 0.20, "driveable_ground", "driveable_ground"),
        Archetype("sidewalk", "ground_side", (), (), 0.38, "other_ground", "other_ground"),
        Archetype("building", "box", (5.0, 4.0, 5.0), (8.0, 6.0, 9.0), 0.45,
                  "structure", "structure"),
        Archetype("wall", "box", (3.0, 0.3, 1.8), (6.0, 0.5, 2.8), 0.42,
                  "structure", "structure"),
        Archetype("car", "box", (4.0, 1.7, 1.4), (4.8, 2.0, 1.7), 0.68,
                  "vehicles", "four_wheeled_vehicles"),
        Archetype("truck", "box", (6.0, 2.2, 2.5), (7.5, 2.6, 3.2), 0.60,
                  "vehicles", "four_wheeled_vehicles"),
        Archetype("bike", "box", (1.6, 0.5, 1.0), (2.0, 0.7, 1.3), 0.50,
                  "vehicles", "two_wheeled_vehicles"),
        Archetype("pedestrian", "ellipsoid", (0.28, 0.80), (0.40, 0.95), 0.30,
                  "living_being", "living_being"),
        Archetype("bush", "ellipsoid", (0.8, 0.5), (1.5, 1.0), 0.25, "nature", "nature"),
        Archetype("tree_trunk", "cylinder", (0.18, 2.5), (0.35, 4.2), 0.32,
                  "nature", "nature"),
        Archetype("pole", "cylinder", (0.06, 3.0), (0.13, 5.0), 0.55, "static_objects", "poles"),
        Archetype("sign", "box", (0.7, 0.08, 0.7), (1.0, 0.12, 1.0), 0.80,
                  "static_objects", "other_static_objects", z_base=1.9),
        Archetype("bin", "box", (0.6, 0.6, 0.7), (1.0, 1.0, 1.2), 0.47,
                  "dynamic_objects", "dynamic_objects"),
    )
}

ARCHETYPE_ORDER = tuple(ARCHETYPES)


@dataclass
class SensorModel:
    """Rotating multi-beam range sensor."""

    n_beams: int
    azimuth_resolution_deg: float
    vertical_fov_deg: tuple[float, float]
    max_range: float
    dropout_rate: float = 0.0
    height: float = 1.75

    def __post_init__(self):
        if self.n_beams < 1:
            raise ValueError("n_beams must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.azimuth_resolution_deg <= 0:
            raise ValueError("azimuth_resolution_deg must be > 0")

    def ray_directions(self) -> np.ndarray:
        """Unit directions for the full ring pattern, beam-major order."""
        lo, hi = self.vertical_fov_deg
        if self.n_beams == 1:
            elevations = np.array([(lo + hi) / 2.0])
        else:
            elevations = np.linspace(lo, hi, self.n_beams)
        azimuths = np.arange(0.0, 360.0, self.azimuth_resolution_deg)
        elev = np.deg2rad(elevations)[:, None]
        azim = np.deg2rad(azimuths)[None, :]
        dx = np.cos(elev) * np.cos(azim)
        dy = np.cos(elev) * np.sin(azim)
        dz = np.sin(elev) * np.ones_like(azim)
        return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)


@dataclass
class SceneConfig:
    """Extent, per-archetype object counts, sensor, and fine-label ids."""

    extent: float
    counts: dict[str, int]
    sensor: SensorModel
    fine_labels: dict[str, int]
    road_half_width: float | None = None

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be > 0")
        for name, count in self.counts.items():
            if name not in ARCHETYPES:
                raise ValueError(f"unknown archetype {name!r}")
            if count < 0:
                raise ValueError(f"negative count for {name!r}")
        for name, count in self.counts.items():
            if count > 0 and name not in self.fine_labels:
                raise ValueError(f"archetype {name!r} has no fine label assigned")
        assigned = [f for f in self.fine_labels.values()]
        if len(assigned) != len(set(assigned)):
            raise ValueError("fine label assignment must be injective")

    @property
    def road_width(self) -> float:
        return self.road_half_width if self.road_half_width is not None else self.extent * 0.16


@dataclass
class DatasetSpec:
    """One synthetic dataset: scenes, sensor, and its own fine vocabulary."""

    name: str
    scene: SceneConfig
    fine_names: dict[int, str]
    n_scenes: int
    scans_per_scene: int


@dataclass
class CorpusConfig:
    datasets: list[DatasetSpec] = field(default_factory=list)


@dataclass
class _Primitive:
    kind: str
    params: tuple
    label: int
    intensity: float
    instance: int


def _place_scene(cfg: SceneConfig, seed: int) -> list[_Primitive]:
    """Sample object placements; deterministic per (cfg, seed)."""
    rng = rng_from(seed, "place")
    prims: list[_Primitive] = []
    half = cfg.extent / 2.0
    road_hw = min(cfg.road_width, half)

    if cfg.counts.get("road", 0) > 0:
        arch = ARCHETYPES["road"]
        prims.append(_Primitive("rect", (-half, half, -road_hw, road_hw, 0.0),
                                cfg.fine_labels["road"], arch.base_intensity, 0))
    if cfg.counts.get("sidewalk", 0) > 0:
        arch = ARCHETYPES["sidewalk"]
        label = cfg.fine_labels["sidewalk"]
        lo = road_hw if cfg.counts.get("road", 0) > 0 else -half
        if lo < half:
            prims.append(_Primitive("rect", (-half, half, lo, half, CURB_HEIGHT),
                                    label, arch.base_intensity, 0))
            if lo > -half:
                prims.append(_Primitive("rect", (-half, half, -half, -lo, CURB_HEIGHT),
                                        label, arch.base_intensity, 0))

    placed: list[tuple[float, float, float]] = []  # (x, y, bounding radius)
    margin = 1.0
    instance = 0
    for name in ARCHETYPE_ORDER:
        arch = ARCHETYPES[name]
        if arch.kind.startswith("ground"):
            continue
        for _ in range(cfg.counts.get(name, 0)):
            size = rng.uniform(np.asarray(arch.size_lo), np.asarray(arch.size_hi))
            if arch.kind == "box":
                radius = float(np.hypot(size[0], size[1]) / 2.0)
            elif arch.kind == "cylinder":
                radius = float(size[0])
            else:
                radius = float(size[0])
            for attempt in range(PLACEMENT_RETRIES + 1):
                if attempt == PLACEMENT_RETRIES:
                    raise PlacementFailure(
                        f"could not place archetype {name!r} within extent {cfg.extent}"
                    )
                x = rng.uniform(-half + radius + margin, half - radius - margin)
                y = rng.uniform(-half + radius + margin, half - radius - margin)
                if np.hypot(x, y) < MIN_ORIGIN_CLEARANCE + radius:
                    continue
                if all(np.hypot(x - px, y - py) > 0.85 * (radius + pr) + 0.2 for px, py, pr in placed):
                    break
            placed.append((x, y, radius))
            instance += 1
            label = cfg.fine_labels[name]
            if arch.kind == "box":
                lx, ly, lz = size
                mins = (x - lx / 2.0, y - ly / 2.0, arch.z_base)
                maxs = (x + lx / 2.0, y + ly / 2.0, arch.z_base + lz)
                prims.append(_Primitive("box", (mins, maxs), label, arch.base_intensity, instance))
            elif arch.kind == "cylinder":
                r, h = size
                prims.append(_Primitive("cylinder", (x, y, arch.z_base, arch.z_base + h, r),
                                        label, arch.base_intensity, instance))
            else:
                sr, sz = size
                prims.append(_Primitive("ellipsoid", (x, y, arch.z_base + sz, sr, sr, sz),
                                        label, arch.base_intensity, instance))
    return prims


def _intersect(prim: _Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter t per ray, +inf where the primitive is missed."""
    t = np.full(dirs.shape[0], np.inf)
    if prim.kind == "rect":
        x0, x1, y0, y1, z = prim.params
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (z - origin[2]) / dz
        px = origin[0] + tc * dirs[:, 0]
        py = origin[1] + tc * dirs[:, 1]
        hit = (dz != 0) & (tc > 1e-6) & (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
        t[hit] = tc[hit]
    elif prim.kind == "box":
        mins, maxs = prim.params
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (np.asarray(mins) - origin) / dirs
            t2 = (np.asarray(maxs) - origin) / dirs
        tnear = np.nanmax(np.minimum(t1, t2), axis=1)
        tfar = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tnear <= tfar) & (tnear > 1e-6)
        t[hit] = tnear[hit]
    elif prim.kind == "cylinder":
        cx, cy, z0, z1, r = prim.params
        ox, oy = origin[0] - cx, origin[1] - cy
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
        c = ox * ox + oy * oy - r * r
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (-b - sq) / (2.0 * a)
        pz = origin[2] + tc * dirs[:, 2]
        hit = ok & (tc > 1e-6) & (pz >= z0) & (pz <= z1)
        t[hit] = tc[hit]
    elif prim.kind == "ellipsoid":
        cx, cy, cz, sx, sy, sz = prim.params
        q = (origin - np.array([cx, cy, cz])) / np.array([sx, sy, sz])
        w = dirs / np.array([sx, sy, sz])
        a = (w * w).sum(axis=1)
        b = 2.0 * (w @ q)
        c = q @ q - 1.0
        disc = b * b - 4.0 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        tc = (-b - sq) / (2.0 * a)
        hit = ok & (tc > 1e-6)
        t[hit] = tc[hit]
    else:
        raise ValueError(f"unknown primitive kind {prim.kind!r}")
    return t


def _raycast(
    prims: list[_Primitive],
    sensor: SensorModel,
    seed: int,
    origin_xy: tuple[float, float] = (0.0, 0.0),
    scan_id: str = "",
) -> tuple[PointScan, LabelArray]:
    rng = rng_from(seed, "rays")
    dirs = sensor.ray_directions()
    origin = np.array([origin_xy[0], origin_xy[1], sensor.height])
    best_t = np.full(dirs.shape[0], np.inf)
    best_label = np.zeros(dirs.shape[0], dtype=np.int64)
    best_intensity = np.zeros(dirs.shape[0])
    best_instance = np.zeros(dirs.shape[0], dtype=np.int64)
    for prim in prims:
        t = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_label[closer] = prim.label
        best_intensity[closer] = prim.intensity
        best_instance[closer] = prim.instance
    hit = np.isfinite(best_t) & (best_t <= sensor.max_range)
    if sensor.dropout_rate > 0:
        hit &= rng.random(dirs.shape[0]) >= sensor.dropout_rate
    idx = np.flatnonzero(hit)
    points = origin + best_t[idx, None] * dirs[idx]
    intensity = np.clip(
        best_intensity[idx] + rng.normal(0.0, INTENSITY_NOISE, size=idx.shape[0]), 0.0, 1.0
    )
    quad = np.concatenate([points, intensity[:, None]], axis=1).astype(np.float32)
    labels = LabelArray(
        semantic=best_label[idx].astype(np.uint32),
        instance=best_instance[idx].astype(np.uint32),
    )
    return PointScan(points=quad, scan_id=scan_id), labels


def generate_scene(cfg: SceneConfig, seed: int) -> tuple[PointScan, LabelArray]:
    """One labeled scan of a freshly placed scene; deterministic per seed."""
    prims = _place_scene(cfg, derive_seed(seed, "scene"))
    return _raycast(prims, cfg.sensor, derive_seed(seed, "scan"))


def dataset_label_map(spec: DatasetSpec, variant: Variant | str) -> LabelMap:
    """Fine→coarse map induced by the dataset's archetype assignment."""
    variant = Variant(variant)
    entries = {taxonomy.IGNORE_ID: taxonomy.IGNORE_ID}
    names = {taxonomy.IGNORE_ID: taxonomy.IGNORE_NAME}
    for arch_name, fine_id in spec.scene.fine_labels.items():
        entries[fine_id] = ARCHETYPES[arch_name].coarse_id(variant)
        names[fine_id] = spec.fine_names.get(fine_id, f"class_{fine_id}")
    return LabelMap(dataset_name=spec.name, variant=variant, entries=entries, fine_names=names)


def corpus_label_maps(cfg: CorpusConfig, variant: Variant | str) -> dict[str, LabelMap]:
    return {spec.name: dataset_label_map(spec, variant) for spec in cfg.datasets}


def generate_corpus(cfg: CorpusConfig, seed: int, out_dir: Path | str) -> list[DatasetIndex]:
    """Write every dataset to disk (scans, labels, manifest, label maps).

    Per-scan seeds derive from (seed, dataset, scene, scan index), so
    regeneration with the same seed is bit-identical and output does not
    depend on generation order.
    """
    out_dir = Path(out_dir)
    indices = []
    for spec in cfg.datasets:
        ds_dir = out_dir / spec.name
        try:
            ds_dir.mkdir(parents=True, exist_ok=True)
            entries = []
            for scene_idx in range(spec.n_scenes):
                scene_id = f"scene{scene_idx:04d}"
                prims = _place_scene(spec.scene, derive_seed(seed, spec.name, scene_id))
                scene_dir = ds_dir / "scenes" / scene_id
                scene_dir.mkdir(parents=True, exist_ok=True)
                for scan_idx in range(spec.scans_per_scene):
                    scan_seed = derive_seed(seed, spec.name, scene_id, scan_idx)
                    jitter_rng = rng_from(scan_seed, "pose")
                    origin_xy = tuple(jitter_rng.uniform(-1.5, 1.5, size=2))
                    scan, labels = _raycast(prims, spec.scene.sensor, scan_seed,
                                            origin_xy=origin_xy,
                                            scan_id=f"{scene_id}:{scan_idx:03d}")
                    scan_rel = f"scenes/{scene_id}/{scan_idx:03d}.bin"
                    label_rel = f"scenes/{scene_id}/{scan_idx:03d}.label"
                    (ds_dir / scan_rel).write_bytes(write_point_scan(scan))
                    (ds_dir / label_rel).write_bytes(write_label_file(labels))
                    entries.append((scene_id, scan_rel, label_rel))
            write_manifest(ds_dir / "manifest.txt", entries)
            maps_dir = ds_dir / "maps"
            maps_dir.mkdir(exist_ok=True)
            for variant in Variant:
                label_map = dataset_label_map(spec, variant)
                (maps_dir / f"{variant.value}.csv").write_text(
                    taxonomy.dump_label_map(label_map), encoding="utf-8", newline="\n"
                )
        except OSError as exc:
            raise IoFailure(f"failed writing dataset {spec.name!r}: {exc}") from exc
        index = index_dataset(ds_dir, layout="manifest", dataset_name=spec.name)
        index.fine_vocabulary = {
            i: spec.fine_names.get(i, f"class_{i}") for i in index.fine_vocabulary
        }
        indices.append(index)
    return indices


def corpus_digest(indices: list[DatasetIndex]) -> str:
    """Stable hash of the corpus composition (names, scenes, scan paths)."""
    h = hashlib.sha256()
    for index in sorted(indices, key=lambda i: i.dataset_name):
        h.update(index.dataset_name.encode())
        for scene_id, pairs in index.scenes:
            h.update(scene_id.encode())
            for scan_path, label_path in pairs:
                h.update(scan_path.name.encode())
                h.update(label_path.name.encode())
    return h.hexdigest()[:16]


def _parse_kv_list(raw: str, what: str) -> list[list[str]]:
    items = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        items.append([p.strip() for p in chunk.split(":")])
    if not items:
        raise DataError(f"empty {what} list")
    return items


def load_corpus_config(path: Path | str) -> CorpusConfig:
    """Read a corpus description from an INI-style key-value file."""
    parser = configparser.ConfigParser()
    read = parser.read(Path(path), encoding="utf-8")
    if not read:
        raise DataError(f"corpus config {path} not found")
    datasets = []
    for section in parser.sections():
        if not section.startswith("dataset "):
            continue
        name = section.split(" ", 1)[1]
        sec = parser[section]
        try:
            fov = tuple(float(v) for v in sec["vertical_fov"].split(","))
            sensor = SensorModel(
                n_beams=sec.getint("n_beams"),
                azimuth_resolution_deg=sec.getfloat("azimuth_resolution"),
                vertical_fov_deg=(fov[0], fov[1]),
                max_range=sec.getfloat("max_range"),
                dropout_rate=sec.getfloat("dropout_rate", fallback=0.0),
                height=sec.getfloat("sensor_height", fallback=1.75),
            )
            counts = {}
            for arch, count in _parse_kv_list(sec["counts"], "counts"):
                counts[arch] = int(count)
            fine_labels = {}
            fine_names = {}
            for arch, fine_id, fine_name in _parse_kv_list(sec["labels"], "labels"):
                fine_labels[arch] = int(fine_id)
                fine_names[int(fine_id)] = fine_name
            scene = SceneConfig(
                extent=sec.getfloat("extent"),
                counts=counts,
                sensor=sensor,
                fine_labels=fine_labels,
                road_half_width=sec.getfloat("road_half_width", fallback=None),
            )
            datasets.append(DatasetSpec(
                name=name,
                scene=scene,
                fine_names=fine_names,
                n_scenes=sec.getint("n_scenes"),
                scans_per_scene=sec.getint("scans_per_scene"),
            ))
        except (KeyError, ValueError) as exc:
            raise DataError(f"corpus config section [{section}]: {exc}") from exc
    if not datasets:
        raise DataError(f"corpus config {path} declares no datasets")
    return CorpusConfig(datasets=datasets)


def dump_corpus_config(cfg: CorpusConfig) -> str:
    """Serialize a CorpusConfig to the INI schema read by load_corpus_config."""
    lines = ["# synthetic corpus description", ""]
    for spec in cfg.datasets:
        scene = spec.scene
        sensor = scene.sensor
        lines.append(f"[dataset {spec.name}]")
        lines.append(f"n_scenes = {spec.n_scenes}")
        lines.append(f"scans_per_scene = {spec.scans_per_scene}")
        lines.append(f"extent = {scene.extent:g}")
        if scene.road_half_width is not None:
            lines.append(f"road_half_width = {scene.road_half_width:g}")
        lines.append(f"n_beams = {sensor.n_beams}")
        lines.append(f"azimuth_resolution = {sensor.azimuth_resolution_deg:g}")
        lines.append(f"vertical_fov = {sensor.vertical_fov_deg[0]:g}, {sensor.vertical_fov_deg[1]:g}")
        lines.append(f"max_range = {sensor.max_range:g}")
        lines.append(f"dropout_rate = {sensor.dropout_rate:g}")
        lines.append(f"sensor_height = {sensor.height:g}")
        counts = ", ".join(f"{a}:{scene.counts[a]}" for a in ARCHETYPE_ORDER if a in scene.counts)
        lines.append(f"counts = {counts}")
        labels = ", ".join(
            f"{a}:{scene.fine_labels[a]}:{spec.fine_names.get(scene.fine_labels[a], a)}"
            for a in ARCHETYPE_ORDER if a in scene.fine_labels
        )
        lines.append(f"labels = {labels}")
        lines.append("")
    return "\n".join(lines)
