"""Flip-based test-time augmentation: enumerate axis flips, undo them on
returned probability maps, and average."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import VoxsegError
from .volume import ProbMap, Volume, check_labelmap


@dataclass(frozen=True)
class FlipSpec:
    """Axis-reversal flags; applying a spec twice is the identity."""

    flip_x: bool = False
    flip_y: bool = False
    flip_z: bool = False

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate((self.flip_x, self.flip_y, self.flip_z)) if f)

    @property
    def tag(self) -> int:
        """Index of this spec in enumerate_flips() order."""
        return (self.flip_x << 2) | (self.flip_y << 1) | self.flip_z


def enumerate_flips() -> list[FlipSpec]:
    """All 8 flip combinations, ordered as a (x, y, z) 3-bit counter."""
    return [
        FlipSpec(bool(k & 4), bool(k & 2), bool(k & 1))
        for k in range(8)
    ]


def flip_array(data: np.ndarray, spec: FlipSpec) -> np.ndarray:
    if not spec.axes:
        return data.copy()
    return np.flip(data, axis=spec.axes).copy()


def apply_flip(vol: Volume, spec: FlipSpec) -> Volume:
    """Axis-reversed copy of a volume; spacing is unchanged."""
    return vol.with_data(flip_array(vol.data, spec))


def apply_flip_prob(prob: ProbMap, spec: FlipSpec) -> ProbMap:
    flipped = np.stack([flip_array(prob.probs[c], spec) for c in range(prob.probs.shape[0])])
    return ProbMap(flipped, prob.classes, prob.spacing)


def aggregate(entries: list[tuple[FlipSpec, ProbMap]]) -> ProbMap:
    """Average probability maps after undoing each entry's flip.

    Each entry must be the model output for the correspondingly flipped
    input. Rows are renormalized to sum to 1.
    """
    if not entries:
        raise VoxsegError("aggregate needs at least one entry")
    dims = {p.dims for _, p in entries}
    classes = {p.classes for _, p in entries}
    if len(dims) > 1 or len(classes) > 1:
        raise VoxsegError(f"mismatched prob maps: dims {sorted(dims)}, classes {sorted(classes)}")
    acc = np.zeros(entries[0][1].probs.shape, dtype=np.float64)
    for spec, prob in entries:
        acc += apply_flip_prob(prob, spec).probs
    acc /= len(entries)
    sums = acc.sum(axis=0)
    if np.any(sums <= 0):
        raise VoxsegError("aggregated probabilities sum to zero at some voxel")
    acc /= sums
    first = entries[0][1]
    return ProbMap(acc.astype(np.float32), first.classes, first.spacing)


def argmax_labels(prob: ProbMap) -> Volume:
    """Label map taking, per voxel, the lowest class id at maximum probability."""
    channel = np.argmax(prob.probs, axis=0)  # first (lowest) channel wins ties
    ids = np.asarray(prob.classes, dtype=np.uint8)
    return check_labelmap(Volume(np.ascontiguousarray(ids[channel]), prob.spacing))
