"""Binary scan/label file parsing and directory-level dataset indexing.

On-disk conventions follow the SemanticKITTI family: a scan is a raw
little-endian float32 stream of (x, y, z, intensity) quadruplets in a
``.bin`` file; its labels are one little-endian uint32 per point in a
``.label`` file, the low 16 bits carrying the semantic class id and the
high 16 bits the instance id. Semantic id 0 is the ignore class.

Two directory layouts are indexed: sequence folders
(``root/sequences/<scene>/velodyne/*.bin`` with sibling ``labels/``) and a
flat manifest (``manifest.txt`` with one ``scene<TAB>scan<TAB>label`` line
per scan, ``#`` comments, paths relative to the manifest's directory).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SCAN_RECORD_BYTES = 16  # four little-endian float32 per point
LABEL_RECORD_BYTES = 4
MANIFEST_NAME = "manifest.txt"


class MalformedScan(DataError):
    """Scan byte length is not a multiple of the 16-byte point record."""


class NonFiniteValue(DataError):
    """A decoded coordinate or intensity is NaN or infinite."""


class LengthMismatch(DataError):
    """Label byte length disagrees with the paired scan's point count."""


class MissingLabel(DataError):
    """A scan file has no corresponding label file."""


class EmptyDataset(DataError):
    """No scan/label pairs were found under the dataset root."""


class ManifestError(DataError):
    """A manifest line does not have the scene/scan/label structure."""


@dataclass
class PointScan:
    """One LiDAR sweep: an (N, 4) array of x, y, z, intensity rows."""

    points: np.ndarray
    scan_id: str = ""

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class LabelArray:
    """Per-point semantic and instance ids paired with a scan."""

    semantic: np.ndarray
    instance: np.ndarray

    def __len__(self) -> int:
        return self.semantic.shape[0]


@dataclass
class DatasetIndex:
    """Deterministic catalogue of one dataset's scenes and scan/label pairs."""

    dataset_name: str
    fine_vocabulary: dict[int, str]
    scenes: list[tuple[str, list[tuple[Path, Path]]]] = field(default_factory=list)

    @property
    def n_scenes(self) -> int:
        return len(self.scenes)

    @property
    def n_scans(self) -> int:
        return sum(len(pairs) for _, pairs in self.scenes)

    @property
    def scene_ids(self) -> list[str]:
        return [scene_id for scene_id, _ in self.scenes]

    def all_pairs(self) -> list[tuple[str, Path, Path]]:
        """Flattened (scene_id, scan_path, label_path) triples in index order."""
        out = []
        for scene_id, pairs in self.scenes:
            for scan_path, label_path in pairs:
                out.append((scene_id, scan_path, label_path))
        return out

    def subset(self, scene_ids) -> "DatasetIndex":
        """New index restricted to ``scene_ids``, preserving canonical order."""
        keep = set(scene_ids)
        scenes = [(sid, list(pairs)) for sid, pairs in self.scenes if sid in keep]
        return DatasetIndex(self.dataset_name, dict(self.fine_vocabulary), scenes)


def parse_point_scan(data: bytes, scan_id: str = "") -> PointScan:
    """Decode raw little-endian float32 quadruplets into a PointScan."""
    if len(data) % SCAN_RECORD_BYTES != 0:
        raise MalformedScan(
            f"scan byte length {len(data)} is not a multiple of {SCAN_RECORD_BYTES}"
        )
    flat = np.frombuffer(data, dtype="<f4")
    points = flat.reshape(-1, 4).copy()
    if points.size and not np.isfinite(points).all():
        raise NonFiniteValue(f"scan {scan_id or '<bytes>'} contains NaN or Inf values")
    return PointScan(points=points, scan_id=scan_id)


def write_point_scan(scan: PointScan) -> bytes:
    """Exact inverse of parse_point_scan (float32 little-endian payload)."""
    points = np.ascontiguousarray(scan.points, dtype="<f4")
    if points.size and not np.isfinite(points).all():
        raise NonFiniteValue(f"scan {scan.scan_id or '<unnamed>'} contains NaN or Inf values")
    return points.tobytes()


def parse_label_file(data: bytes, n_points: int) -> LabelArray:
    """Decode packed uint32 labels; low 16 bits semantic, high 16 instance."""
    if len(data) != LABEL_RECORD_BYTES * n_points:
        raise LengthMismatch(
            f"label payload is {len(data)} bytes, expected {LABEL_RECORD_BYTES * n_points}"
            f" for {n_points} points"
        )
    packed = np.frombuffer(data, dtype="<u4")
    semantic = (packed & np.uint32(0xFFFF)).astype(np.uint32)
    instance = (packed >> np.uint32(16)).astype(np.uint32)
    return LabelArray(semantic=semantic, instance=instance)


def write_label_file(labels: LabelArray) -> bytes:
    """Exact inverse of parse_label_file."""
    semantic = np.asarray(labels.semantic, dtype=np.uint64)
    instance = np.asarray(labels.instance, dtype=np.uint64)
    if semantic.shape != instance.shape:
        raise LengthMismatch("semantic and instance arrays differ in length")
    if semantic.size and (semantic.max() > 0xFFFF or instance.max() > 0xFFFF):
        raise ValueError("semantic and instance ids must fit in 16 bits")
    packed = ((instance << np.uint64(16)) | semantic).astype("<u4")
    return packed.tobytes()


def read_point_scan(path: Path | str) -> PointScan:
    path = Path(path)
    return parse_point_scan(path.read_bytes(), scan_id=path.stem)


def read_label_file(path: Path | str, n_points: int) -> LabelArray:
    return parse_label_file(Path(path).read_bytes(), n_points)


def read_scan_pair(scan_path: Path | str, label_path: Path | str) -> tuple[PointScan, LabelArray]:
    scan = read_point_scan(scan_path)
    labels = read_label_file(label_path, len(scan))
    return scan, labels


def _index_sequences(root: Path) -> list[tuple[str, list[tuple[Path, Path]]]]:
    seq_root = root / "sequences"
    if not seq_root.is_dir():
        raise EmptyDataset(f"no 'sequences' directory under {root}")
    scenes = []
    for scene_dir in sorted(p for p in seq_root.iterdir() if p.is_dir()):
        scan_dir = scene_dir / "velodyne"
        if not scan_dir.is_dir():
            continue
        pairs = []
        for scan_path in sorted(scan_dir.glob("*.bin")):
            label_path = scene_dir / "labels" / (scan_path.stem + ".label")
            if not label_path.is_file():
                raise MissingLabel(f"no label file for scan {scan_path}")
            pairs.append((scan_path, label_path))
        if pairs:
            scenes.append((scene_dir.name, pairs))
    return scenes


def _index_manifest(root: Path, manifest_path: Path) -> list[tuple[str, list[tuple[Path, Path]]]]:
    base = manifest_path.parent
    by_scene: dict[str, list[tuple[Path, Path]]] = {}
    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
        scene_id, scan_rel, label_rel = parts
        scan_path = (base / scan_rel).resolve()
        label_path = (base / label_rel).resolve()
        if not scan_path.is_file():
            raise ManifestError(f"{manifest_path}:{lineno}: scan file {scan_path} not found")
        if not label_path.is_file():
            raise MissingLabel(f"no label file for scan {scan_path}")
        by_scene.setdefault(scene_id, []).append((scan_path, label_path))
    return [
        (scene_id, sorted(by_scene[scene_id], key=lambda pair: str(pair[0])))
        for scene_id in sorted(by_scene)
    ]


def scan_vocabulary(scenes: list[tuple[str, list[tuple[Path, Path]]]]) -> dict[int, str]:
    """Collect every semantic id used by the label files, with placeholder names."""
    ids: set[int] = set()
    for _, pairs in scenes:
        for _, label_path in pairs:
            packed = np.frombuffer(label_path.read_bytes(), dtype="<u4")
            ids.update(int(v) for v in np.unique(packed & np.uint32(0xFFFF)))
    return {i: f"class_{i}" for i in sorted(ids)}


def index_dataset(
    root: Path | str,
    layout: str = "auto",
    dataset_name: str | None = None,
    manifest: Path | str | None = None,
) -> DatasetIndex:
    """Build a deterministic index of the dataset under ``root``.

    ``layout`` is one of ``"auto"``, ``"sequences"`` or ``"manifest"``. Auto
    prefers a manifest file when one exists. The resulting index is sorted by
    scene id and scan path, independent of directory listing order.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} does not exist")
    manifest_path = Path(manifest) if manifest else root / MANIFEST_NAME
    if layout == "auto":
        layout = "manifest" if manifest_path.is_file() else "sequences"
    if layout == "manifest":
        if not manifest_path.is_file():
            raise EmptyDataset(f"manifest {manifest_path} does not exist")
        scenes = _index_manifest(root, manifest_path)
    elif layout == "sequences":
        scenes = _index_sequences(root)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if not scenes:
        raise EmptyDataset(f"no scan/label pairs found under {root}")
    return DatasetIndex(
        dataset_name=dataset_name or root.name,
        fine_vocabulary=scan_vocabulary(scenes),
        scenes=scenes,
    )


def write_manifest(path: Path | str, entries: list[tuple[str, str, str]]) -> None:
    """Write manifest lines (scene_id, scan_rel, label_rel) with LF endings."""
    path = Path(path)
    lines = ["# scene_id\tscan_path\tlabel_path"]
    lines += [f"{scene}\t{scan}\t{label}" for scene, scan, label in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
