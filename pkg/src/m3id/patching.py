"""Partitioning volumes into instance bags and sliding-window extraction.

A volume [C, X, Y, Z] splits into an N x N x N grid of patches; the bag
order is z-fastest lexicographic over grid indices (i, j, k), i.e. patch
m = i*N^2 + j*N + k. Per axis the patch extent is the smallest multiple of 8
(the backbone's overall downsample factor) not below X/N, and the N origins
are evenly spaced from 0 to X - extent. When N divides X into a multiple of
8 this is the exact non-overlapping tiling; otherwise neighboring patches
overlap just enough that no border voxel is discarded (144x176x144 with
N=3 gives 27 patches of 48x64x48, N=4 gives 64 of 40x48x40).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

DOWNSAMPLE = 8

__all__ = ["PatchGrid", "make_grid", "partition", "reassemble", "sliding_window", "DOWNSAMPLE"]


def _axis_layout(extent: int, n: int):
    """(patch_extent, origins) for one axis."""
    patch = DOWNSAMPLE * (-(-extent // (DOWNSAMPLE * n)))  # ceil division
    if n == 1:
        return patch, (0,)
    span = extent - patch
    return patch, tuple(int(round(i * span / (n - 1))) for i in range(n))


@dataclass(frozen=True)
class PatchGrid:
    volume_extents: tuple
    n_per_axis: int

    @property
    def patch_extents(self) -> tuple:
        return tuple(_axis_layout(e, self.n_per_axis)[0] for e in self.volume_extents)

    @property
    def axis_origins(self) -> tuple:
        """Per-axis patch origins; patch (i,j,k) starts at (ox[i], oy[j], oz[k])."""
        return tuple(_axis_layout(e, self.n_per_axis)[1] for e in self.volume_extents)

    @property
    def m(self) -> int:
        return self.n_per_axis ** 3

    @property
    def exact(self) -> bool:
        """True when the grid tiles the volume without overlap."""
        n = self.n_per_axis
        return all(e % n == 0 and (e // n) % DOWNSAMPLE == 0 for e in self.volume_extents)


def make_grid(volume_extents, n_per_axis: int) -> PatchGrid:
    volume_extents = tuple(int(e) for e in volume_extents)
    if len(volume_extents) != 3:
        raise ContractViolation(f"expected 3 spatial extents, got {volume_extents}")
    if n_per_axis < 1:
        raise ContractViolation(f"n_per_axis must be >= 1, got {n_per_axis}")
    for axis, e in zip("xyz", volume_extents):
        if e < DOWNSAMPLE or e % DOWNSAMPLE != 0:
            raise ContractViolation(
                f"axis {axis}: extent {e} is not a positive multiple of {DOWNSAMPLE}"
            )
    return PatchGrid(volume_extents, n_per_axis)


def partition(volume: np.ndarray, n_per_axis: int):
    """Split [C, X, Y, Z] into ([M, C, px, py, pz], grid) in bag order."""
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise ContractViolation(f"partition expects [C, X, Y, Z], got shape {volume.shape}")
    grid = make_grid(volume.shape[1:], n_per_axis)
    px, py, pz = grid.patch_extents
    ox, oy, oz = grid.axis_origins
    patches = np.empty((grid.m, volume.shape[0], px, py, pz), dtype=volume.dtype)
    m = 0
    for i in ox:
        for j in oy:
            for k in oz:
                patches[m] = volume[:, i:i + px, j:j + py, k:k + pz]
                m += 1
    return patches, grid


def reassemble(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Paste patches back at their origins; bit-exact (overlaps agree by construction)."""
    patches = np.asarray(patches)
    px, py, pz = grid.patch_extents
    if patches.ndim != 5 or patches.shape[0] != grid.m or patches.shape[2:] != (px, py, pz):
        raise ContractViolation(
            f"patches shape {patches.shape} does not match grid "
            f"(m={grid.m}, patch extents {(px, py, pz)})"
        )
    out = np.zeros((patches.shape[1],) + grid.volume_extents, dtype=patches.dtype)
    ox, oy, oz = grid.axis_origins
    m = 0
    for i in ox:
        for j in oy:
            for k in oz:
                out[:, i:i + px, j:j + py, k:k + pz] = patches[m]
                m += 1
    return out


def sliding_window(volume: np.ndarray, window, stride: int = 8):
    """Extract all stride-aligned windows of the given extents.

    Returns (windows [N, C, wx, wy, wz], origins [N, 3]); the window count
    per axis is floor((X - wx) / stride) + 1, row-major over origins.
    """
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise ContractViolation(f"sliding_window expects [C, X, Y, Z], got shape {volume.shape}")
    window = tuple(int(w) for w in window)
    if len(window) != 3 or any(w < 1 for w in window):
        raise ContractViolation(f"window must be 3 positive extents, got {window}")
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    extents = volume.shape[1:]
    for axis, (e, w) in enumerate(zip(extents, window)):
        if w > e:
            raise ContractViolation(
                f"axis {'xyz'[axis]}: window extent {w} exceeds volume extent {e}"
            )
    counts = [(e - w) // stride + 1 for e, w in zip(extents, window)]
    origins = []
    windows = []
    for i in range(counts[0]):
        for j in range(counts[1]):
            for k in range(counts[2]):
                ox, oy, oz = i * stride, j * stride, k * stride
                origins.append((ox, oy, oz))
                windows.append(volume[:, ox:ox + window[0], oy:oy + window[1], oz:oz + window[2]])
    return np.stack(windows), np.array(origins, dtype=np.int64)
