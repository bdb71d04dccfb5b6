"""Dataset assembly: balanced synthetic shape classes at desk scale, or a
directory of OFF/XYZ/CSV files with one subdirectory per class."""

from pathlib import Path

import numpy as np

from .errors import ParameterError
from .geometry import (
    PointCloud,
    generate_synthetic,
    normalize,
    parse_off,
    read_csv_cloud,
    read_xyz,
    sample_surface,
)
from .numkit import Rng

_CLOUD_SUFFIXES = (".off", ".xyz", ".csv")


def _instance_params(family: str, rng: Rng) -> dict:
    """Per-instance shape parameters; aspect ratios vary so instances within
    a class differ by more than the sampling noise."""
    if family == "sphere":
        return {"radius": 1.0}
    if family == "box":
        return {"sx": 1.0, "sy": rng.uniform(low=0.4, high=1.0), "sz": rng.uniform(low=0.2, high=0.7)}
    if family == "cylinder":
        return {"radius": rng.uniform(low=0.25, high=0.5), "height": rng.uniform(low=0.8, high=1.6)}
    if family == "torus":
        return {"big_radius": 1.0, "small_radius": rng.uniform(low=0.15, high=0.4)}
    raise ParameterError(f"unknown family {family!r}")


def make_synthetic_dataset(classes, per_class: int, points: int, rng: Rng,
                           normalize_mode: str = "unit_sphere"):
    """Balanced list of normalized synthetic clouds, per_class per family."""
    clouds = []
    for family in classes:
        for i in range(per_class):
            params = _instance_params(family, rng)
            cloud = generate_synthetic(family, params, points, rng)
            cloud = normalize(cloud, normalize_mode)
            clouds.append(PointCloud(cloud.points, label=family, id=f"{family}-{i}"))
    return clouds


def _read_cloud_file(path: Path, points: int, rng: Rng, label: str | None) -> PointCloud:
    if path.suffix == ".off":
        mesh = parse_off(path.read_bytes())
        cloud = sample_surface(mesh, points, rng)
    elif path.suffix == ".xyz":
        cloud = read_xyz(path.read_text())
    elif path.suffix == ".csv":
        cloud = read_csv_cloud(path.read_text())
        label = cloud.label or label
    else:
        raise ParameterError(f"unsupported cloud file {path.name!r}")
    return PointCloud(cloud.points, label=label, id=path.stem)


def load_dataset_dir(root, points: int, rng: Rng, normalize_mode: str = "unit_sphere"):
    """Load every OFF/XYZ/CSV file under root. Files inside a subdirectory
    get that subdirectory's name as their class label; meshes are surface-
    sampled to the requested point count. Deterministic given the seed
    (files are visited in sorted order)."""
    root = Path(root)
    if not root.is_dir():
        raise ParameterError(f"dataset directory {root} does not exist")
    clouds = []
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in _CLOUD_SUFFIXES or not path.is_file():
            continue
        label = path.parent.name if path.parent != root else None
        cloud = _read_cloud_file(path, points, rng, label)
        clouds.append(normalize(cloud, normalize_mode))
    if not clouds:
        raise ParameterError(f"no cloud files found under {root}")
    return clouds


def split_dataset(clouds, test_fraction: float):
    """Per-class deterministic split: the last ceil(f * n) sorted instances
    of each class become the test set."""
    by_label: dict = {}
    for cloud in clouds:
        by_label.setdefault(cloud.label, []).append(cloud)
    train, test = [], []
    for label in sorted(by_label, key=str):
        group = sorted(by_label[label], key=lambda c: str(c.id))
        n_test = max(1, int(np.ceil(test_fraction * len(group)))) if len(group) > 1 else 0
        train.extend(group[: len(group) - n_test])
        test.extend(group[len(group) - n_test :])
    return train, test
