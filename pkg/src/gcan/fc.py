"""Functional-connectivity data model: atlas partitions, FC matrices, cohorts.

An FC matrix is the universal currency of the pipeline: a symmetric
correlation matrix over the atlas regions with unit diagonal and entries
in [-1, 1]. Every constructor enforces those invariants.

File formats (see docs/formats.md):
  * FC matrix   - CSV, N rows x N comma-separated floats, no header
  * atlas       - CSV ``network,region_count`` (header row), networks in order
  * manifest    - CSV ``id,label,split,fc_path`` (header row)
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyClassError,
    FCRepairWarning,
    ParameterError,
    ParseError,
    ShapeError,
)


class Label(str, enum.Enum):
    """Diagnostic label of a subject."""

    HC = "HC"
    SCD = "SCD"
    MCI = "MCI"


#: Clinical stage order; the later stage of a task pair is its positive class.
STAGE = {Label.HC: 0, Label.SCD: 1, Label.MCI: 2}


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


DEFAULT_NETWORKS = (
    ("CER", 18),
    ("CON", 32),
    ("DMN", 34),
    ("OCC", 22),
    ("FPN", 21),
    ("SMN", 33),
)


@dataclass(frozen=True)
class AtlasPartition:
    """Ordered named networks with region counts; defines all block structure.

    Region indices run 0..total_regions-1 in network order.
    """

    networks: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.networks:
            raise ParameterError("atlas needs at least one network")
        names = [n for n, _ in self.networks]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate network names: {names}")
        for name, count in self.networks:
            if count < 1:
                raise ParameterError(f"network {name!r} has region count {count} < 1")

    @property
    def total_regions(self) -> int:
        return sum(c for _, c in self.networks)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.networks)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.networks)

    def row_slices(self) -> list[slice]:
        """Row slice of each network within an (N, N) matrix, atlas order."""
        out, start = [], 0
        for _, count in self.networks:
            out.append(slice(start, start + count))
            start += count
        return out

    def network_of(self, region: int) -> str:
        """Name of the network containing a region index."""
        if not 0 <= region < self.total_regions:
            raise ParameterError(f"region {region} outside 0..{self.total_regions - 1}")
        start = 0
        for name, count in self.networks:
            if region < start + count:
                return name
            start += count
        raise AssertionError("unreachable")

    def network_index_of(self, region: int) -> int:
        name = self.network_of(region)
        return self.names.index(name)

    @classmethod
    def default(cls) -> "AtlasPartition":
        """The six-network 160-region partition used throughout the defaults."""
        return cls(DEFAULT_NETWORKS)

    @classmethod
    def from_csv(cls, path) -> "AtlasPartition":
        nets = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:2]] != ["network", "region_count"]:
                raise ParseError(f"{path}: expected header 'network,region_count'")
            for i, row in enumerate(reader):
                if not row:
                    continue
                try:
                    nets.append((row[0].strip(), int(row[1])))
                except (IndexError, ValueError) as e:
                    raise ParseError(f"{path}: bad atlas row {i + 2}: {row!r}") from e
        return cls(tuple(nets))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["network", "region_count"])
            for name, count in self.networks:
                w.writerow([name, count])


#: constructor forgiveness for float round-off; anything larger is an error
_RANGE_TOL = 1e-6


@dataclass(frozen=True)
class FCMatrix:
    """Symmetric correlation matrix over atlas regions.

    The constructor symmetrizes as (M + M.T)/2, forces the diagonal to 1
    and rejects entries outside [-1, 1] beyond float round-off (tiny
    overshoot is clamped). The stored array is read-only float64.
    """

    values: np.ndarray
    atlas: AtlasPartition

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        n = self.atlas.total_regions
        if v.ndim != 2 or v.shape != (n, n):
            raise ShapeError(f"FC values shape {v.shape}, atlas has {n} regions")
        v = (v + v.T) / 2.0
        np.fill_diagonal(v, 1.0)
        overshoot = max(v.max() - 1.0, -1.0 - v.min(), 0.0)
        if overshoot > _RANGE_TOL:
            raise ParameterError(f"FC entries outside [-1, 1] by {overshoot:.3g}")
        if overshoot > 0.0:
            v = np.clip(v, -1.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_regions(self) -> int:
        return self.atlas.total_regions


@dataclass(frozen=True)
class Subject:
    id: str
    label: Label
    fc: FCMatrix


@dataclass(frozen=True)
class Cohort:
    """Labeled subjects plus their split assignment; all share one atlas."""

    subjects: tuple[Subject, ...]
    atlas: AtlasPartition
    splits: dict[str, Split] = field(compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ParameterError("duplicate subject ids in cohort")
        for s in self.subjects:
            if s.fc.atlas != self.atlas:
                raise ParameterError(f"subject {s.id} uses a different atlas")
        missing = set(ids) - set(self.splits)
        if missing:
            raise ParameterError(f"subjects without split assignment: {sorted(missing)}")
        extra = set(self.splits) - set(ids)
        if extra:
            raise ParameterError(f"splits reference unknown ids: {sorted(extra)}")

    def select(self, label: Label | None = None, split: Split | None = None) -> list[Subject]:
        out = []
        for s in self.subjects:
            if label is not None and s.label != label:
                continue
            if split is not None and self.splits[s.id] != split:
                continue
            out.append(s)
        return out

    def counts(self) -> dict[tuple[Label, Split], int]:
        out: dict[tuple[Label, Split], int] = {}
        for s in self.subjects:
            key = (s.label, self.splits[s.id])
            out[key] = out.get(key, 0) + 1
        return out


# ---------------------------------------------------------------------------
# file I/O


def load_fc(path, atlas: AtlasPartition) -> FCMatrix:
    """Load an FC matrix from CSV, repairing and warning as needed.

    Repairs (each emits an FCRepairWarning): symmetrization (M+M.T)/2,
    diagonal forced to 1, entries clamped to [-1, 1].
    """
    rows: list[list[float]] = []
    with open(path) as f:
        for r, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            parsed = []
            for c, cell in enumerate(line.split(",")):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {r}, col {c}: {cell.strip()!r}"
                    ) from None
            rows.append(parsed)

    n = atlas.total_regions
    if len(rows) != n or any(len(r) != n for r in rows):
        shape = (len(rows), len(rows[0]) if rows else 0)
        raise ShapeError(f"{path}: matrix shape {shape}, atlas has {n} regions")

    m = np.array(rows, dtype=np.float64)
    asym = float(np.abs(m - m.T).max())
    if asym > 0.0:
        warnings.warn(FCRepairWarning(f"{path}: symmetrized, max asymmetry {asym:.3g}"))
        m = (m + m.T) / 2.0
    diag_off = float(np.abs(np.diag(m) - 1.0).max())
    if diag_off > 0.0:
        warnings.warn(FCRepairWarning(f"{path}: diagonal forced to 1, max deviation {diag_off:.3g}"))
        np.fill_diagonal(m, 1.0)
    excess = max(float(m.max()) - 1.0, -1.0 - float(m.min()))
    if excess > 0.0:
        n_out = int(np.count_nonzero(np.abs(m) > 1.0))
        warnings.warn(FCRepairWarning(f"{path}: clamped {n_out} entries to [-1, 1], max excess {excess:.3g}"))
        m = np.clip(m, -1.0, 1.0)
    return FCMatrix(m, atlas)


def save_fc(fc: FCMatrix, path) -> None:
    """Write an FC matrix as CSV with full float64 round-trip precision."""
    np.savetxt(path, fc.values, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# cohort operations


def mean_fc(cohort: Cohort, label: Label, split: Split) -> FCMatrix:
    """Elementwise mean FC over subjects with the given label and split."""
    chosen = cohort.select(label=label, split=split)
    if not chosen:
        raise EmptyClassError(f"no subjects with label {label.value} in split {split.value}")
    stack = np.stack([s.fc.values for s in chosen])
    return FCMatrix(stack.mean(axis=0), cohort.atlas)


def add_noise(fc: FCMatrix, sigma: float, seed: int) -> np.ndarray:
    """FC values plus symmetric i.i.d. Gaussian noise; generator input.

    The upper triangle (diagonal included) is drawn N(0, sigma^2) and
    mirrored, so every entry has std exactly sigma and the matrix stays
    symmetric. The result is not clamped and is not a valid FCMatrix.
    Deterministic for a fixed seed; sigma=0 returns the values unchanged.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return fc.values.copy()
    rng = np.random.default_rng(seed)
    n = fc.n_regions
    g = rng.normal(0.0, sigma, size=(n, n))
    sym = np.triu(g) + np.triu(g, 1).T
    return fc.values + sym


# ---------------------------------------------------------------------------
# manifest I/O


def save_cohort(cohort: Cohort, out_dir) -> Path:
    """Write FC files, atlas.csv and manifest.csv under ``out_dir``.

    Returns the manifest path. Layout: ``out_dir/fc/<id>.csv`` plus
    ``out_dir/atlas.csv`` and ``out_dir/manifest.csv``.
    """
    out_dir = Path(out_dir)
    fc_dir = out_dir / "fc"
    fc_dir.mkdir(parents=True, exist_ok=True)
    cohort.atlas.to_csv(out_dir / "atlas.csv")
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "label", "split", "fc_path"])
        for s in cohort.subjects:
            rel = f"fc/{s.id}.csv"
            save_fc(s.fc, out_dir / rel)
            w.writerow([s.id, s.label.value, cohort.splits[s.id].value, rel])
    return manifest


def load_cohort(manifest_path, atlas: AtlasPartition | None = None) -> Cohort:
    """Load a cohort from a manifest CSV; fc_path entries are relative to it.

    When ``atlas`` is None, ``atlas.csv`` next to the manifest is used.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    if atlas is None:
        atlas = AtlasPartition.from_csv(base / "atlas.csv")
    subjects: list[Subject] = []
    splits: dict[str, Split] = {}
    with open(manifest_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["id", "label", "split", "fc_path"]:
            raise ParseError(f"{manifest_path}: expected header 'id,label,split,fc_path'")
        for i, row in enumerate(reader):
            if not row:
                continue
            try:
                sid, label, split, rel = (cell.strip() for cell in row[:4])
            except ValueError as e:
                raise ParseError(f"{manifest_path}: bad manifest row {i + 2}: {row!r}") from e
            try:
                lab = Label(label)
                spl = Split(split)
            except ValueError as e:
                raise ParseError(f"{manifest_path}: row {i + 2}: {e}") from e
            subjects.append(Subject(sid, lab, load_fc(base / rel, atlas)))
            splits[sid] = spl
    return Cohort(tuple(subjects), atlas, splits)


def task_classes(task: tuple[Label, Label]) -> tuple[Label, Label]:
    """Order a binary task pair as (negative, positive) by clinical stage.

    The later-stage condition is the positive class (SCD in HC-vs-SCD,
    MCI in HC-vs-MCI and SCD-vs-MCI).
    """
    a, b = task
    if a == b:
        raise ParameterError("task needs two distinct labels")
    return (a, b) if STAGE[a] < STAGE[b] else (b, a)
