"""Coarse label sets and fine-to-coarse label remapping.

The unified vocabulary has three granularities built around the same eight
road-scene categories: driveable ground, other ground, structure, vehicles,
nature, living beings, dynamic objects and static objects. The five-label
variant merges the two ground classes and folds structure, static and
dynamic objects together; the ten-label variant splits vehicles into two-
and four-wheeled and static objects into poles and other static objects.

Per-dataset fine→coarse mappings are data, not code: UTF-8 CSV files with
header ``dataset,fine_id,fine_name,coarse_id,coarse_name``, ``#`` comments
and LF endings. Coarse id 0 is the ignore class in every variant and is
excluded from losses and metrics downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

from .errors import DataError
from .lidar_io import LabelArray


class ParseError(DataError):
    """A mapping file line is malformed."""


class DuplicateFineId(DataError):
    """The same fine id appears on two mapping lines."""


class UnknownCoarseName(DataError):
    """A mapping line names a coarse label absent from the target set."""


class UnmappedLabel(DataError):
    """A label array contains a fine id the map does not cover."""

    def __init__(self, fine_id: int):
        super().__init__(f"fine label id {fine_id} has no mapping entry")
        self.fine_id = fine_id


class Variant(str, Enum):
    """Granularity of the coarse vocabulary."""

    FIVE = "five"
    EIGHT = "eight"
    TEN = "ten"


IGNORE_ID = 0
IGNORE_NAME = "ignore"

_EIGHT = (
    (1, "driveable_ground"),
    (2, "other_ground"),
    (3, "structure"),
    (4, "vehicles"),
    (5, "nature"),
    (6, "living_being"),
    (7, "dynamic_objects"),
    (8, "static_objects"),
)

_FIVE = (
    (1, "ground"),
    (2, "structure_and_objects"),
    (3, "vehicles"),
    (4, "nature"),
    (5, "living_being"),
)

_TEN = (
    (1, "driveable_ground"),
    (2, "other_ground"),
    (3, "structure"),
    (4, "two_wheeled_vehicles"),
    (5, "four_wheeled_vehicles"),
    (6, "nature"),
    (7, "living_being"),
    (8, "dynamic_objects"),
    (9, "poles"),
    (10, "other_static_objects"),
)

# Coarsening/refinement relations between the variants. Both include the
# ignore fixed point 0 -> 0.
EIGHT_TO_FIVE = {0: 0, 1: 1, 2: 1, 3: 2, 4: 3, 5: 4, 6: 5, 7: 2, 8: 2}
TEN_TO_EIGHT = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 5: 4, 6: 5, 7: 6, 8: 7, 9: 8, 10: 8}


@dataclass(frozen=True)
class CoarseLabelSet:
    """One coarse vocabulary: contiguous ids from 1, plus ignore id 0."""

    variant: Variant
    labels: tuple[tuple[int, str], ...]
    ignore_id: int = IGNORE_ID

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.labels)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for _, n in self.labels)

    def name_of(self, coarse_id: int) -> str:
        if coarse_id == self.ignore_id:
            return IGNORE_NAME
        return dict(self.labels)[coarse_id]

    def id_of(self, name: str) -> int:
        if name == IGNORE_NAME:
            return self.ignore_id
        for i, n in self.labels:
            if n == name:
                return i
        raise UnknownCoarseName(f"{name!r} is not a {self.variant.value}-variant coarse label")


_SETS = {
    Variant.FIVE: CoarseLabelSet(Variant.FIVE, _FIVE),
    Variant.EIGHT: CoarseLabelSet(Variant.EIGHT, _EIGHT),
    Variant.TEN: CoarseLabelSet(Variant.TEN, _TEN),
}


def coarse_set(variant: Variant | str) -> CoarseLabelSet:
    return _SETS[Variant(variant)]


@dataclass
class LabelMap:
    """Total fine→coarse mapping for one dataset under one variant."""

    dataset_name: str
    variant: Variant
    entries: dict[int, int]
    fine_names: dict[int, str] = field(default_factory=dict)

    def lookup_table(self) -> np.ndarray:
        """Dense fine-id→coarse-id table; -1 marks unmapped ids."""
        size = max(self.entries) + 1 if self.entries else 1
        table = np.full(size, -1, dtype=np.int64)
        for fine, coarse in self.entries.items():
            table[fine] = coarse
        return table


@dataclass
class ValidationReport:
    """Totality/range check of a map against a dataset's fine vocabulary."""

    unmapped_fine_ids: set[int]
    out_of_range_coarse_ids: set[int]
    unused_coarse_ids: set[int] = field(default_factory=set)  # warning only

    @property
    def ok(self) -> bool:
        return not self.unmapped_fine_ids and not self.out_of_range_coarse_ids


def load_label_map(text: str, coarse: CoarseLabelSet) -> LabelMap:
    """Parse a mapping CSV against a target coarse set.

    Rejects malformed lines, duplicate fine ids and coarse names that are not
    in the target set (or whose id disagrees with the set).
    """
    entries: dict[int, int] = {}
    fine_names: dict[int, str] = {}
    dataset_name = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ParseError(f"line {lineno}: expected 5 comma-separated fields, got {len(parts)}")
        if parts == ["dataset", "fine_id", "fine_name", "coarse_id", "coarse_name"]:
            continue  # header
        dataset, fine_id_s, fine_name, coarse_id_s, coarse_name = parts
        try:
            fine_id = int(fine_id_s)
            coarse_id = int(coarse_id_s)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: non-integer id field") from exc
        if fine_id < 0 or coarse_id < 0:
            raise ParseError(f"line {lineno}: negative id")
        if dataset_name and dataset != dataset_name:
            raise ParseError(f"line {lineno}: mixed dataset names {dataset_name!r}/{dataset!r}")
        dataset_name = dataset
        if fine_id in entries:
            raise DuplicateFineId(f"line {lineno}: fine id {fine_id} mapped twice")
        if coarse_id == coarse.ignore_id:
            if coarse_name != IGNORE_NAME:
                raise UnknownCoarseName(
                    f"line {lineno}: coarse id 0 must be named {IGNORE_NAME!r}, got {coarse_name!r}"
                )
        else:
            if coarse_name not in coarse.names:
                raise UnknownCoarseName(f"line {lineno}: unknown coarse label {coarse_name!r}")
            if coarse.id_of(coarse_name) != coarse_id:
                raise ParseError(
                    f"line {lineno}: coarse id {coarse_id} does not match"
                    f" {coarse_name!r} (expected {coarse.id_of(coarse_name)})"
                )
        entries[fine_id] = coarse_id
        fine_names[fine_id] = fine_name
    if not entries:
        raise ParseError("mapping file has no entries")
    if IGNORE_ID in entries and entries[IGNORE_ID] != IGNORE_ID:
        raise ParseError("fine id 0 (ignore) must map to coarse id 0")
    return LabelMap(dataset_name=dataset_name, variant=coarse.variant, entries=entries, fine_names=fine_names)


def dump_label_map(label_map: LabelMap) -> str:
    """Serialize a LabelMap back to the CSV mapping format."""
    coarse = coarse_set(label_map.variant)
    lines = ["dataset,fine_id,fine_name,coarse_id,coarse_name"]
    for fine_id in sorted(label_map.entries):
        coarse_id = label_map.entries[fine_id]
        fine_name = label_map.fine_names.get(fine_id, f"class_{fine_id}")
        lines.append(
            f"{label_map.dataset_name},{fine_id},{fine_name},{coarse_id},{coarse.name_of(coarse_id)}"
        )
    return "\n".join(lines) + "\n"


def validate_label_map(label_map: LabelMap, fine_vocabulary) -> ValidationReport:
    """Check totality over a fine vocabulary and coarse-id range membership."""
    coarse = coarse_set(label_map.variant)
    valid_ids = set(coarse.ids) | {coarse.ignore_id}
    unmapped = {int(f) for f in fine_vocabulary if int(f) not in label_map.entries}
    out_of_range = {c for c in label_map.entries.values() if c not in valid_ids}
    used = set(label_map.entries.values())
    unused = {i for i in coarse.ids if i not in used}
    return ValidationReport(unmapped_fine_ids=unmapped, out_of_range_coarse_ids=out_of_range,
                            unused_coarse_ids=unused)


def remap(labels: LabelArray, label_map: LabelMap) -> LabelArray:
    """Replace semantic ids through the map; instance ids pass through."""
    semantic = np.asarray(labels.semantic, dtype=np.int64)
    table = label_map.lookup_table()
    if semantic.size:
        too_big = semantic >= table.shape[0]
        if too_big.any():
            raise UnmappedLabel(int(semantic[too_big][0]))
        mapped = table[semantic]
        missing = mapped < 0
        if missing.any():
            raise UnmappedLabel(int(semantic[missing][0]))
    else:
        mapped = semantic
    return LabelArray(semantic=mapped.astype(np.uint32), instance=np.asarray(labels.instance).copy())


def identity_map(coarse: CoarseLabelSet, dataset_name: str = "identity") -> LabelMap:
    """Map each coarse id (and ignore) to itself; useful for already-coarse data."""
    entries = {IGNORE_ID: IGNORE_ID}
    entries.update({i: i for i in coarse.ids})
    names = {IGNORE_ID: IGNORE_NAME}
    names.update({i: n for i, n in coarse.labels})
    return LabelMap(dataset_name=dataset_name, variant=coarse.variant, entries=entries, fine_names=names)


BUNDLED_DATASETS = ("semkitti",)


def bundled_map_text(dataset: str, variant: Variant | str) -> str:
    """Raw CSV text of a mapping shipped with the package."""
    variant = Variant(variant)
    name = f"{dataset}_{variant.value}.csv"
    ref = resources.files("cola").joinpath("data", "maps", name)
    if not ref.is_file():
        raise DataError(f"no bundled map {name}")
    return ref.read_text(encoding="utf-8")


def bundled_map(dataset: str, variant: Variant | str) -> LabelMap:
    variant = Variant(variant)
    return load_label_map(bundled_map_text(dataset, variant), coarse_set(variant))
