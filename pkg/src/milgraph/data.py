"""Dataset ingestion and synthesis.

One canonical CSV format covers every dataset: header
``bag_id,label,f0..f{F-1}`` with optional trailing integer ``row,col``
columns for patch-gridded data. Rows of one bag are contiguous and their
file order is the bag's instance order.

The synthetic generator plants instances inside a positive cluster (a
ball) on top of uniform background noise; a bag is labeled positive
exactly when it contains at least one planted instance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bags import Bag, ContractError, Instance
from .linalg import new_rng


class FormatError(ValueError):
    """The input file violates the CSV contract."""


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    num_classes: int
    feature_dim: int
    num_bags: int
    num_instances: int
    bags_per_class: Tuple[int, ...]
    has_grid: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "num_bags": self.num_bags,
            "num_instances": self.num_instances,
            "bags_per_class": list(self.bags_per_class),
            "has_grid": self.has_grid,
        }


def _parse_header(header: Sequence[str], path: str) -> Tuple[int, bool]:
    if len(header) < 3 or header[0] != "bag_id" or header[1] != "label":
        raise FormatError(f"{path}: header must start with bag_id,label,f0...")
    cols = list(header[2:])
    has_grid = cols[-2:] == ["row", "col"]
    if has_grid:
        cols = cols[:-2]
    expected = [f"f{i}" for i in range(len(cols))]
    if not cols or cols != expected:
        raise FormatError(f"{path}: feature columns must be f0..f{{F-1}}, got {cols}")
    return len(cols), has_grid


def load_bag_csv(path) -> Tuple[List[Bag], DatasetManifest]:
    """Load bags from a canonical CSV; grid columns are accepted if present."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        feature_dim, has_grid = _parse_header(header, str(path))
        width = 2 + feature_dim + (2 if has_grid else 0)

        bags: List[Bag] = []
        current_id: Optional[str] = None
        current_label: Optional[int] = None
        rows: List[Instance] = []
        seen: set[str] = set()

        def flush():
            if current_id is None:
                return
            try:
                bags.append(Bag(id=current_id, label=current_label, instances=tuple(rows)))
            except ContractError as exc:
                raise FormatError(f"{path}: {exc}") from exc

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            bag_id = row[0]
            try:
                label = int(row[1])
                feats = np.array([float(x) for x in row[2:2 + feature_dim]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            grid = None
            if has_grid:
                try:
                    grid = (int(row[-2]), int(row[-1]))
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if bag_id != current_id:
                if bag_id in seen:
                    raise FormatError(
                        f"{path}:{lineno}: rows of bag {bag_id!r} are not contiguous")
                flush()
                seen.add(bag_id)
                current_id, current_label, rows = bag_id, label, []
            elif label != current_label:
                raise FormatError(
                    f"{path}: inconsistent label within bag {bag_id!r} "
                    f"({current_label} vs {label} at line {lineno})")
            rows.append(Instance(features=feats, grid_pos=grid))
        flush()

    if not bags:
        raise FormatError(f"{path}: no data rows")
    labels = [b.label for b in bags]
    num_classes = max(max(labels) + 1, 2)
    per_class = tuple(labels.count(c) for c in range(num_classes))
    manifest = DatasetManifest(
        name=path.stem, num_classes=num_classes, feature_dim=feature_dim,
        num_bags=len(bags), num_instances=sum(b.size for b in bags),
        bags_per_class=per_class, has_grid=has_grid,
    )
    return bags, manifest


def load_gridded_csv(path) -> List[Bag]:
    """Like load_bag_csv but every instance must carry grid coordinates."""
    bags, manifest = load_bag_csv(path)
    if not manifest.has_grid:
        raise FormatError(f"{path}: gridded dataset requires row,col columns")
    return bags


def write_bag_csv(path, bags: Sequence[Bag]) -> None:
    """Write bags in canonical CSV form; floats via repr (exact round-trip)."""
    if not bags:
        raise ValueError("no bags to write")
    feature_dim = bags[0].feature_dim
    has_grid = bags[0].has_grid
    header = ["bag_id", "label"] + [f"f{i}" for i in range(feature_dim)]
    if has_grid:
        header += ["row", "col"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for bag in bags:
            for inst in bag.instances:
                row = [bag.id, bag.label] + [repr(float(x)) for x in inst.features]
                if has_grid:
                    row += [inst.grid_pos[0], inst.grid_pos[1]]
                writer.writerow(row)


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-cluster bag generator settings."""

    num_bags: int = 100
    bag_size_range: Tuple[int, int] = (4, 10)
    feature_dim: int = 5
    positive_center: float = 1.5        # broadcast to every feature dim
    positive_radius: float = 0.5
    background_low: float = -1.0
    background_high: float = 1.0
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.positive_radius <= 0:
            raise ValueError("positive_radius must be > 0")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must be in (0,1)")


def generate_synthetic(spec: SyntheticSpec) -> List[Bag]:
    """Bags labeled positive iff they contain an instance in the planted ball."""
    rng = new_rng(spec.seed)
    center = np.full(spec.feature_dim, spec.positive_center)

    def in_ball(x) -> bool:
        return bool(np.linalg.norm(x - center) < spec.positive_radius)

    def background_instance() -> np.ndarray:
        while True:
            x = rng.uniform(spec.background_low, spec.background_high,
                            size=spec.feature_dim)
            if not in_ball(x):
                return x

    def planted_instance() -> np.ndarray:
        direction = rng.normal(size=spec.feature_dim)
        direction /= np.linalg.norm(direction)
        radius = spec.positive_radius * rng.uniform() ** (1.0 / spec.feature_dim)
        return center + radius * direction

    num_pos = int(round(spec.positive_fraction * spec.num_bags))
    labels = np.zeros(spec.num_bags, dtype=int)
    labels[:num_pos] = 1
    labels = labels[rng.permutation(spec.num_bags)]

    lo, hi = spec.bag_size_range
    bags = []
    for i, label in enumerate(labels):
        size = int(rng.integers(lo, hi + 1))
        if label == 1:
            num_planted = int(rng.integers(1, max(2, size // 3 + 1)))
            feats = [planted_instance() for _ in range(num_planted)]
            feats += [background_instance() for _ in range(size - num_planted)]
        else:
            feats = [background_instance() for _ in range(size)]
        bags.append(Bag(
            id=f"bag{i:04d}", label=int(label),
            instances=tuple(Instance(features=f) for f in feats),
        ))
    return bags


def fit_standardizer(bags: Sequence[Bag]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean/std over all instances; zero stds become 1."""
    feats = np.concatenate([b.feature_matrix() for b in bags])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0.0] = 1.0
    return mean, std


def apply_standardizer(bags: Sequence[Bag], mean: np.ndarray,
                       std: np.ndarray) -> List[Bag]:
    out = []
    for bag in bags:
        out.append(Bag(
            id=bag.id, label=bag.label,
            instances=tuple(
                Instance(features=(inst.features - mean) / std, grid_pos=inst.grid_pos)
                for inst in bag.instances
            ),
        ))
    return out
