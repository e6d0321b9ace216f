"""Synthetic cohorts with planted discriminative blocks.

Ground truth for explainability checks: a block of regions whose
correlations are shifted for one label of a pair. A pipeline that claims
to localize discriminative regions must recover the planted set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .fc import AtlasPartition, Cohort, FCMatrix, Label, Split, Subject

SPLIT_RATIOS = {Split.TRAIN: 0.70, Split.VAL: 0.15, Split.TEST: 0.15}


@dataclass(frozen=True)
class PlantedBlock:
    """Shift FC entries on a region set for the second label of a pair.

    Subjects labeled ``labels[1]`` get ``delta`` added to every entry whose
    row or column is in ``regions``; subjects labeled ``labels[0]`` are the
    untouched reference, so mean_fc(labels[1]) - mean_fc(labels[0]) carries
    the shift.
    """

    labels: tuple[Label, Label]
    regions: frozenset[int]
    delta: float

    def __post_init__(self):
        if self.labels[0] == self.labels[1]:
            raise ParameterError("planted block needs two distinct labels")
        if not self.regions:
            raise ParameterError("planted block needs at least one region")
        if abs(self.delta) > 0.5:
            raise ParameterError(f"|delta| must be <= 0.5, got {self.delta}")


@dataclass(frozen=True)
class SynthSpec:
    atlas: AtlasPartition
    counts: dict[Label, int]
    planted_blocks: tuple[PlantedBlock, ...] = ()
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")
        if any(c < 0 for c in self.counts.values()):
            raise ParameterError("label counts must be >= 0")
        if sum(self.counts.values()) <= 0:
            raise ParameterError("synth spec needs at least one subject")
        n = self.atlas.total_regions
        for block in self.planted_blocks:
            bad = [r for r in block.regions if not 0 <= r < n]
            if bad:
                raise ParameterError(f"planted regions outside 0..{n - 1}: {sorted(bad)}")


def _symmetric_noise(rng: np.random.Generator, n: int, std: float) -> np.ndarray:
    g = rng.normal(0.0, std, size=(n, n))
    return np.triu(g) + np.triu(g, 1).T


def _split_sizes(n: int) -> dict[Split, int]:
    n_val = int(n * SPLIT_RATIOS[Split.VAL] + 0.5)
    n_test = int(n * SPLIT_RATIOS[Split.TEST] + 0.5)
    return {Split.TRAIN: n - n_val - n_test, Split.VAL: n_val, Split.TEST: n_test}


def synth_cohort(spec: SynthSpec) -> Cohort:
    """Generate a labeled cohort with planted blocks and stratified splits.

    Every subject draws a common population template (the correlation
    matrix of seeded random series) plus per-subject symmetric Gaussian
    noise of std ``noise_std``; planted blocks then shift the matching
    label's rows/columns by delta, and the result is clamped into a valid
    FCMatrix. Splits are 70/15/15 stratified by label. Bit-for-bit
    reproducible for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.atlas.total_regions

    series = rng.standard_normal((max(2 * n, 64), n))
    template = np.corrcoef(series, rowvar=False)

    block_masks = []
    for block in spec.planted_blocks:
        idx = np.zeros(n, dtype=bool)
        idx[sorted(block.regions)] = True
        mask = idx[:, None] | idx[None, :]
        block_masks.append((block, mask))

    subjects: list[Subject] = []
    splits: dict[str, Split] = {}
    for label in Label:
        count = spec.counts.get(label, 0)
        ids = []
        for k in range(count):
            vals = template + _symmetric_noise(rng, n, spec.noise_std)
            for block, mask in block_masks:
                if label == block.labels[1]:
                    vals = vals + block.delta * mask
            vals = np.clip(vals, -1.0, 1.0)
            sid = f"{label.value}_{k:04d}"
            subjects.append(Subject(sid, label, FCMatrix(vals, spec.atlas)))
            ids.append(sid)
        if not ids:
            continue
        order = rng.permutation(len(ids))
        sizes = _split_sizes(len(ids))
        cursor = 0
        for split in (Split.TRAIN, Split.VAL, Split.TEST):
            for j in order[cursor:cursor + sizes[split]]:
                splits[ids[j]] = split
            cursor += sizes[split]

    return Cohort(tuple(subjects), spec.atlas, splits)
