"""The shipped reference benchmark: corpus layout and experiment defaults.

Three heterogeneous source datasets (~600 scans) and one target dataset
(~100 scans, 13 fine classes). The sources differ in sensor resolution,
dropout, fine-label numbering and granularity: ``synth_a`` merges all
vehicles under one label, ``synth_b`` splits car/truck/bike with its own id
scheme, ``synth_c`` has no living-being class at all. The target labels
every archetype separately, which is the finetuning task.
"""

from __future__ import annotations

from pathlib import Path

from .harness import ALL_ARMS, ExperimentSpec, PhaseConfig
from .synthgen import CorpusConfig, DatasetSpec, SceneConfig, SensorModel
from .taxonomy import Variant

TARGET_NAME = "synth_target"
SOURCE_NAMES = ("synth_a", "synth_b", "synth_c")


def _dataset(name, n_scenes, scans_per_scene, sensor, counts, labels) -> DatasetSpec:
    fine_labels = {arch: fine_id for arch, (fine_id, _) in labels.items()}
    fine_names = {fine_id: fine_name for fine_id, fine_name in labels.values()}
    scene = SceneConfig(extent=32.0, counts=counts, sensor=sensor, fine_labels=fine_labels,
                        road_half_width=5.5)
    return DatasetSpec(name=name, scene=scene, fine_names=fine_names,
                       n_scenes=n_scenes, scans_per_scene=scans_per_scene)


def reference_corpus_config() -> CorpusConfig:
    synth_a = _dataset(
        "synth_a", 50, 4,
        SensorModel(n_beams=32, azimuth_resolution_deg=4.0, vertical_fov_deg=(-24.0, 2.0),
                    max_range=24.0, dropout_rate=0.06),
        counts={"road": 1, "sidewalk": 1, "building": 2, "car": 4, "pedestrian": 4,
                "bush": 4, "pole": 4, "bin": 3},
        labels={"road": (1, "road"), "sidewalk": (2, "sidewalk"), "building": (3, "building"),
                "car": (4, "vehicle"), "pedestrian": (5, "person"), "bush": (6, "vegetation"),
                "pole": (7, "pole"), "bin": (8, "movable")},
    )
    synth_b = _dataset(
        "synth_b", 50, 4,
        SensorModel(n_beams=64, azimuth_resolution_deg=4.5, vertical_fov_deg=(-25.0, 3.0),
                    max_range=25.0, dropout_rate=0.03),
        counts={"road": 1, "sidewalk": 1, "building": 2, "wall": 2, "car": 3, "truck": 1,
                "bike": 3, "pedestrian": 3, "bush": 3, "tree_trunk": 3, "pole": 3, "sign": 3},
        labels={"road": (10, "driving_surface"), "sidewalk": (11, "walkway"),
                "building": (12, "building"), "wall": (13, "barrier"), "car": (20, "car"),
                "truck": (21, "truck"), "bike": (22, "cycle"), "pedestrian": (30, "human"),
                "bush": (40, "shrub"), "tree_trunk": (41, "trunk"), "pole": (50, "post"),
                "sign": (51, "signage")},
    )
    synth_c = _dataset(
        "synth_c", 50, 4,
        SensorModel(n_beams=16, azimuth_resolution_deg=3.0, vertical_fov_deg=(-20.0, 3.0),
                    max_range=20.0, dropout_rate=0.10),
        counts={"road": 1, "sidewalk": 1, "building": 2, "car": 4, "truck": 1, "bush": 4,
                "tree_trunk": 2, "pole": 4, "sign": 2, "bin": 3},
        labels={"road": (100, "asphalt"), "sidewalk": (101, "paving"),
                "building": (102, "facade"), "car": (103, "car"), "truck": (104, "lorry"),
                "bush": (105, "hedge"), "tree_trunk": (106, "stem"), "pole": (107, "mast"),
                "sign": (108, "panel"), "bin": (109, "container")},
    )
    synth_target = _dataset(
        TARGET_NAME, 25, 4,
        SensorModel(n_beams=48, azimuth_resolution_deg=3.6, vertical_fov_deg=(-22.0, 2.0),
                    max_range=22.0, dropout_rate=0.05),
        counts={"road": 1, "sidewalk": 1, "building": 2, "wall": 2, "car": 4, "truck": 1,
                "bike": 2, "pedestrian": 3, "bush": 4, "tree_trunk": 3, "pole": 3,
                "sign": 2, "bin": 2},
        labels={"road": (1, "road"), "sidewalk": (2, "sidewalk"), "building": (3, "building"),
                "wall": (4, "wall"), "car": (5, "car"), "truck": (6, "truck"),
                "bike": (7, "bike"), "pedestrian": (8, "pedestrian"), "bush": (9, "bush"),
                "tree_trunk": (10, "trunk"), "pole": (11, "pole"), "sign": (12, "sign"),
                "bin": (13, "bin")},
    )
    return CorpusConfig(datasets=[synth_a, synth_b, synth_c, synth_target])


def reference_experiment_spec(corpus_dir: Path | str, seeds=None, fractions=None,
                              arms=None, out_dir: Path | str | None = None,
                              jobs: int = 1) -> ExperimentSpec:
    """Experiment spec reproducing the transfer-learning trends at desk scale."""
    corpus_dir = Path(corpus_dir)
    return ExperimentSpec(
        name="reference",
        target=corpus_dir / TARGET_NAME,
        sources=[corpus_dir / n for n in SOURCE_NAMES],
        arms=list(arms) if arms is not None else list(ALL_ARMS),
        variant=Variant.EIGHT,
        fractions=list(fractions) if fractions is not None else [10, 100],
        seeds=list(seeds) if seeds is not None else [0, 1, 2, 3, 4],
        test_fraction=0.2,
        split_seed=0,
        pretrain=PhaseConfig(epochs=10, batch_scans=8, base_lr=0.1, momentum=0.9,
                             schedule="anneal"),
        finetune=PhaseConfig(epochs=30, batch_scans=4, base_lr=0.1, momentum=0.9,
                             schedule="anneal"),
        voxel_size=0.3,
        hidden_widths=(64, 64, 32),
        fine_label_sources=["synth_a"],
        augment_cfg=None,  # identity: features are computed once and reused
        jobs=jobs,
        out_dir=Path(out_dir) if out_dir is not None else None,
    )
