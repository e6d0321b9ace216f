"""Counterfactual attention: FC differences -> region weights -> masking.

The difference between a generated target-label FC and the source FC is
split into its positive and negative parts; each region scores the row
mean of each part, scores are averaged over subjects and directions, and
the combined weights (max-normalized to [0, 1]) softly mask FC matrices
for the final classifier. A planted-region recovery score quantifies how
well the map finds ground-truth discriminative regions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AtlasMismatchError, ParameterError, ShapeError
from .fc import AtlasPartition, FCMatrix, Label


@dataclass(frozen=True)
class SignedDiff:
    """Difference of two FC matrices over one (source, target) direction."""

    values: np.ndarray
    direction: tuple[Label, Label]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"diff must be square, got {v.shape}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AttentionMap:
    """Per-region weights in [0, 1] with the signed views they came from.

    ``region_weights`` is (positive_view + negative_view) normalized by its
    maximum (all-zero stays all-zero), so the top region always has weight
    1 when any signal exists.
    """

    region_weights: np.ndarray
    positive_view: np.ndarray
    negative_view: np.ndarray
    directions: tuple[tuple[Label, Label], ...]
    atlas: AtlasPartition

    def __post_init__(self):
        n = self.atlas.total_regions
        for name in ("region_weights", "positive_view", "negative_view"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (n,):
                raise ShapeError(f"{name} must have shape ({n},), got {v.shape}")
            if name != "region_weights" and (v < 0).any():
                raise ParameterError(f"{name} must be nonnegative")
            object.__setattr__(self, name, v)
        w = self.region_weights
        if (w < 0).any() or (w > 1).any():
            raise ParameterError("region_weights must lie in [0, 1]")


@dataclass(frozen=True)
class RegionRanking:
    """Top regions by weight: (region index, network name, weight) rows."""

    entries: tuple[tuple[int, str, float], ...]

    def __post_init__(self):
        weights = [w for _, _, w in self.entries]
        if any(a < b for a, b in zip(weights, weights[1:])):
            raise ParameterError("ranking weights must be non-increasing")


def _normalized(raw: np.ndarray) -> np.ndarray:
    peak = raw.max()
    return raw / peak if peak > 0 else np.zeros_like(raw)


def counterfactual_diff(
    gen_target: FCMatrix, source: FCMatrix, direction: tuple[Label, Label]
) -> SignedDiff:
    """Generated target-label FC minus the source FC; zero diagonal."""
    if gen_target.atlas != source.atlas:
        raise AtlasMismatchError("diff operands use different atlases")
    return SignedDiff(gen_target.values - source.values, direction)


def region_attention(diffs: list[SignedDiff], atlas: AtlasPartition) -> AttentionMap:
    """Average row means of the positive/negative diff parts per region."""
    if not diffs:
        raise ParameterError("region_attention needs at least one diff")
    n = atlas.total_regions
    pos_acc = np.zeros(n)
    neg_acc = np.zeros(n)
    for d in diffs:
        if d.values.shape != (n, n):
            raise AtlasMismatchError(f"diff shape {d.values.shape} vs {n} regions")
        pos_acc += np.maximum(d.values, 0.0).mean(axis=1)
        neg_acc += np.maximum(-d.values, 0.0).mean(axis=1)
    pos = pos_acc / len(diffs)
    neg = neg_acc / len(diffs)
    directions = tuple(dict.fromkeys(d.direction for d in diffs))
    return AttentionMap(_normalized(pos + neg), pos, neg, directions, atlas)


def aggregate(maps: list[AttentionMap]) -> AttentionMap:
    """Mean of the signed views across maps, renormalized by the maximum."""
    if not maps:
        raise ParameterError("aggregate needs at least one map")
    atlas = maps[0].atlas
    if any(m.atlas != atlas for m in maps):
        raise AtlasMismatchError("aggregate over maps with different atlases")
    pos = np.mean([m.positive_view for m in maps], axis=0)
    neg = np.mean([m.negative_view for m in maps], axis=0)
    directions = tuple(dict.fromkeys(d for m in maps for d in m.directions))
    return AttentionMap(_normalized(pos + neg), pos, neg, directions, atlas)


def mask_fc(fc: FCMatrix, amap: AttentionMap, floor: float = 0.2) -> FCMatrix:
    """Scale FC entries by pairwise-averaged region weights with a floor.

    W[i, j] = max(floor, (w_i + w_j) / 2); the diagonal is reset to 1, so
    the output is a valid FCMatrix for any floor in [0, 1].
    """
    if fc.atlas != amap.atlas:
        raise AtlasMismatchError("mask_fc: FC and map use different atlases")
    if not 0.0 <= floor <= 1.0:
        raise ParameterError(f"floor must be in [0, 1], got {floor}")
    w = amap.region_weights
    weight_matrix = np.maximum(floor, (w[:, None] + w[None, :]) / 2.0)
    values = fc.values * weight_matrix
    np.fill_diagonal(values, 1.0)
    return FCMatrix(values, fc.atlas)


def top_regions(
    amap: AttentionMap, k: int, atlas: AtlasPartition | None = None, view: str = "combined"
) -> RegionRanking:
    """k regions with the largest weights; ties break toward lower index.

    ``view`` selects the combined weights or one signed view, matching the
    +/- rows of the published rankings.
    """
    atlas = atlas or amap.atlas
    n = atlas.total_regions
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in 1..{n}, got {k}")
    weights = {
        "combined": amap.region_weights,
        "positive": amap.positive_view,
        "negative": amap.negative_view,
    }.get(view)
    if weights is None:
        raise ParameterError(f"view must be combined/positive/negative, got {view!r}")
    order = np.lexsort((np.arange(n), -weights))
    return RegionRanking(
        tuple((int(r), atlas.network_of(int(r)), float(weights[r])) for r in order[:k])
    )


def recovery_score(amap: AttentionMap, planted: set[int], k: int) -> float:
    """Precision@k of the combined ranking against the planted region set."""
    if not planted:
        raise ParameterError("planted set must be nonempty")
    ranking = top_regions(amap, k)
    hits = sum(1 for region, _, _ in ranking.entries if region in planted)
    return hits / k


# ---------------------------------------------------------------------------
# export


def export_nodes(amap: AttentionMap, coords: np.ndarray, path) -> None:
    """Write a 6-column whitespace node file for surface viewers.

    Per region: x y z color size label, where color is the 1-based network
    index, size the region weight (6 significant digits) and label is
    ``r<index>_<network>``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = amap.atlas.total_regions
    if coords.shape != (n, 3):
        raise ShapeError(f"coords must have shape ({n}, 3), got {coords.shape}")
    lines = []
    for r in range(n):
        x, y, z = coords[r]
        network = amap.atlas.network_of(r)
        color = amap.atlas.names.index(network) + 1
        lines.append(
            f"{x:.6g} {y:.6g} {z:.6g} {color} {amap.region_weights[r]:.6g} r{r:03d}_{network}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def spherical_layout(atlas: AtlasPartition, radius: float = 70.0) -> np.ndarray:
    """Deterministic placeholder coordinates: golden-spiral points on a sphere."""
    n = atlas.total_regions
    k = np.arange(n, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (k + 0.5) / n
    rho = np.sqrt(1.0 - z * z)
    theta = golden * k
    return radius * np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)


def write_attention_csv(amap: AttentionMap, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["region_index", "network", "weight", "positive", "negative"])
        for r in range(amap.atlas.total_regions):
            w.writerow(
                [
                    r,
                    amap.atlas.network_of(r),
                    f"{amap.region_weights[r]:.17g}",
                    f"{amap.positive_view[r]:.17g}",
                    f"{amap.negative_view[r]:.17g}",
                ]
            )


def read_attention_csv(path, atlas: AtlasPartition) -> AttentionMap:
    """Rebuild a map from its CSV; direction provenance is not stored."""
    n = atlas.total_regions
    weights = np.zeros(n)
    pos = np.zeros(n)
    neg = np.zeros(n)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            if not row:
                continue
            r = int(row[0])
            weights[r] = float(row[2])
            pos[r] = float(row[3])
            neg[r] = float(row[4])
    return AttentionMap(weights, pos, neg, (), atlas)
