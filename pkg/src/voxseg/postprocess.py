"""Connected-component cleanup: per class, keep only the largest
component. Component ids follow first-encounter scan order with x
fastest, then y, then z."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import VoxsegError
from .volume import ORGAN_CLASSES, Volume, check_labelmap

DEFAULT_CONNECTIVITY = 26
# Tumors are multifocal; they are excluded from largest-component pruning
# unless explicitly listed.
DEFAULT_KEEP_LARGEST_CLASSES = ORGAN_CLASSES


@dataclass(frozen=True)
class ComponentMap:
    """Component id per voxel (0 = background) plus per-id voxel counts;
    ``sizes[k - 1]`` is the size of component k."""

    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return len(self.sizes)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise VoxsegError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentMap:
    """Label connected foreground regions of a binary mask."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        values = np.unique(mask)
        if not set(values.tolist()) <= {0, 1}:
            raise VoxsegError(f"mask must be binary, found values {values[:8].tolist()}")
        mask = mask.astype(bool)
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return ComponentMap(raw.astype(np.int32), np.zeros(0, dtype=np.int64))
    # Renumber so ids follow first encounter in x-fastest scan order.
    flat = raw.ravel(order="F")
    ids, first_idx = np.unique(flat, return_index=True)
    nz = ids != 0
    order = np.argsort(first_idx[nz])
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[nz][order]] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentMap(labels, sizes)


def keep_largest(
    vol: Volume,
    classes=DEFAULT_KEEP_LARGEST_CLASSES,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> Volume:
    """Zero out, for each listed class, every voxel outside its largest
    connected component (size ties keep the lowest component id)."""
    check_labelmap(vol)
    out = vol.data.copy()
    for class_id in classes:
        mask = vol.data == class_id
        if not mask.any():
            continue
        comp = connected_components(mask, connectivity)
        if comp.count <= 1:
            continue
        keep_id = int(np.argmax(comp.sizes)) + 1  # argmax returns lowest id on ties
        out[mask & (comp.labels != keep_id)] = 0
    return vol.with_data(out)
