"""Label fusion: voxelwise voting across pseudo-label sources and
merging of partial ground truth with pseudo labels.

Background (0) counts as a vote. Partial-label background is treated as
unknown by default, so pseudo labels may fill it; set
``gt_background_trust`` to suppress pseudo claims of classes the ground
truth annotates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import VoxsegError
from .volume import TUMOR_CLASS, Volume, check_labelmap, labelmap_like


@dataclass(frozen=True)
class FusionPolicy:
    """Precedence rules for combining label sources.

    ``source_priority`` orders tie-breaking (highest first). ``min_votes``,
    when set, zeroes any winning foreground class with fewer votes; the
    default keeps every plurality winner.
    """

    source_priority: tuple[str, ...] = ("own",)
    gt_overrides: bool = True
    tumor_overrides_organ: bool = True
    gt_background_trust: bool = False
    min_votes: int | None = None

    def __post_init__(self):
        if not self.source_priority:
            raise VoxsegError("source_priority must be non-empty")
        if len(set(self.source_priority)) != len(self.source_priority):
            raise VoxsegError(f"duplicate source ids in priority: {self.source_priority}")
        if self.min_votes is not None and self.min_votes < 1:
            raise VoxsegError(f"min_votes must be positive, got {self.min_votes}")


@dataclass(frozen=True)
class PartialLabel:
    """A ground-truth map covering only ``annotated_classes``; voxels of
    other classes are indistinguishable from background."""

    map: Volume
    annotated_classes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        check_labelmap(self.map)
        bad = set(np.unique(self.map.data)) - {0} - set(self.annotated_classes)
        if bad:
            raise VoxsegError(
                f"ground truth contains classes {sorted(bad)} outside its annotated set "
                f"{sorted(self.annotated_classes)}"
            )

    def foreground(self) -> np.ndarray:
        return self.map.data != 0


def _check_dims(maps: list[Volume]) -> None:
    dims = {m.dims for m in maps}
    if len(dims) > 1:
        raise VoxsegError(f"dim mismatch across label maps: {sorted(dims)}")


def majority_vote(sources: list[tuple[str, Volume]], policy: FusionPolicy) -> Volume:
    """Per-voxel plurality vote; ties go to the earliest priority source
    whose vote is among the tied classes."""
    if not sources:
        raise VoxsegError("majority_vote needs at least one source")
    unknown = [sid for sid, _ in sources if sid not in policy.source_priority]
    if unknown:
        raise VoxsegError(f"unknown source ids {unknown}; priority lists {list(policy.source_priority)}")
    maps = [m for _, m in sources]
    for m in maps:
        check_labelmap(m)
    _check_dims(maps)

    stack = np.stack([m.data for m in maps])  # (S, nx, ny, nz)
    n_classes = int(stack.max()) + 1
    counts = np.zeros((n_classes,) + maps[0].dims, dtype=np.int16)
    for c in range(n_classes):
        counts[c] = (stack == c).sum(axis=0)
    best = counts.max(axis=0)

    # Tie-break by priority: walk sources from highest priority down and
    # keep the first whose vote attains the maximum count.
    rank = {sid: i for i, sid in enumerate(policy.source_priority)}
    order = sorted(range(len(sources)), key=lambda i: rank[sources[i][0]])
    out = np.zeros(maps[0].dims, dtype=np.uint8)
    decided = np.zeros(maps[0].dims, dtype=bool)
    for i in order:
        vote = stack[i]
        hits = ~decided & (np.take_along_axis(counts, vote[None].astype(np.int64), axis=0)[0] == best)
        out[hits] = vote[hits]
        decided |= hits
    if policy.min_votes is not None:
        win_count = np.take_along_axis(counts, out[None].astype(np.int64), axis=0)[0]
        out[(out != 0) & (win_count < policy.min_votes)] = 0
    return labelmap_like(out, maps[0])


def merge_partial(gt: PartialLabel, pseudo: Volume, policy: FusionPolicy) -> Volume:
    """Overlay partial ground truth onto a pseudo-label map.

    GT foreground wins (when ``gt_overrides``). At GT-background voxels
    the pseudo value is kept, unless it belongs to a GT-annotated class
    and ``gt_background_trust`` is set.
    """
    check_labelmap(pseudo)
    _check_dims([gt.map, pseudo])
    out = pseudo.data.copy()
    if policy.gt_background_trust and gt.annotated_classes:
        suppress = np.isin(out, sorted(gt.annotated_classes)) & ~gt.foreground()
        out[suppress] = 0
    if policy.gt_overrides:
        fg = gt.foreground()
        out[fg] = gt.map.data[fg]
    return labelmap_like(out, pseudo)


def merge_organ_tumor(
    organ: Volume, tumor: Volume, tumor_overrides_organ: bool = True
) -> Volume:
    """Combine an organ-only map with a tumor-only map into one label map."""
    check_labelmap(organ)
    check_labelmap(tumor)
    _check_dims([organ, tumor])
    if np.any(organ.data == TUMOR_CLASS):
        raise VoxsegError(f"organ map already contains tumor class {TUMOR_CLASS}")
    tumor_values = set(np.unique(tumor.data))
    if not tumor_values <= {0, TUMOR_CLASS}:
        raise VoxsegError(f"tumor map contains organ classes {sorted(tumor_values - {0, TUMOR_CLASS})}")
    out = organ.data.copy()
    tmask = tumor.data == TUMOR_CLASS
    if not tumor_overrides_organ:
        tmask &= organ.data == 0
    out[tmask] = TUMOR_CLASS
    return labelmap_like(out, organ)
