"""Regular 3-D voxel grids with world geometry, plus the mask operations
the pipeline needs (isotropic resampling, reorientation, connected
components, residual masks, crops, boundary extraction).

World frame
-----------
World coordinates are fixed anatomic LPS axes: +x left, +y posterior,
+z superior (cranial).  A grid carries one orientation code per array
axis ("L", "R", "P", "A", "S" or "I") naming the anatomic direction in
which that index increases; the three codes must cover the three world
axes.  The canonical processing orientation is ("L", "P", "S").

origin is the world position of the center of voxel (0, 0, 0); voxels
are cells of size spacing centered on the sample points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

CANONICAL_ORIENTATION = ("L", "P", "S")

# world axis index and polarity of each orientation code (LPS frame)
_CODE_AXIS = {"L": 0, "R": 0, "P": 1, "A": 1, "S": 2, "I": 2}
_CODE_SIGN = {"L": 1.0, "R": -1.0, "P": 1.0, "A": -1.0, "S": 1.0, "I": -1.0}

_SUPPORTED_DTYPES = (np.bool_, np.int16, np.float32)


def _check_orientation(codes) -> tuple[str, str, str]:
    codes = tuple(str(c).upper() for c in codes)
    if len(codes) != 3 or any(c not in _CODE_AXIS for c in codes):
        raise ValueError(f"bad orientation codes: {codes!r}")
    if sorted(_CODE_AXIS[c] for c in codes) != [0, 1, 2]:
        raise ValueError(f"orientation codes must span all three world axes: {codes!r}")
    return codes


@dataclass(frozen=True)
class VolumeGrid:
    """An axis-aligned voxel grid with world geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float]   # mm per voxel along each array axis
    origin: tuple[float, float, float]    # world mm of voxel (0,0,0) center
    orientation: tuple[str, str, str] = CANONICAL_ORIENTATION

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"grid data must be 3-D, got ndim={data.ndim}")
        if any(s <= 0 for s in data.shape):
            raise ValueError(f"grid sizes must be positive, got {data.shape}")
        if data.dtype not in _SUPPORTED_DTYPES:
            raise ValueError(f"unsupported element dtype {data.dtype}; use bool, int16 or float32")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing!r}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must be a 3-vector")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "orientation", _check_orientation(self.orientation))

    # -- geometry ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def axis_directions(self) -> np.ndarray:
        """(3,3) matrix: row k is the world direction of increasing index k."""
        d = np.zeros((3, 3))
        for k, code in enumerate(self.orientation):
            d[k, _CODE_AXIS[code]] = _CODE_SIGN[code]
        return d

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map (..., 3) voxel indices (may be fractional) to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        dirs = self.axis_directions()
        step = dirs * np.asarray(self.spacing)[:, None]   # row k scaled
        return np.asarray(self.origin) + idx @ step

    def world_to_index(self, world: np.ndarray) -> np.ndarray:
        """Inverse of index_to_world (fractional indices)."""
        world = np.asarray(world, dtype=np.float64)
        dirs = self.axis_directions()
        step = dirs * np.asarray(self.spacing)[:, None]
        return (world - np.asarray(self.origin)) @ np.linalg.inv(step)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space min/max corners of the full voxel field (cell edges)."""
        n = np.asarray(self.shape, dtype=np.float64)
        corners = []
        for fi in (-0.5, n[0] - 0.5):
            for fj in (-0.5, n[1] - 0.5):
                for fk in (-0.5, n[2] - 0.5):
                    corners.append(self.index_to_world([fi, fj, fk]))
        corners = np.asarray(corners)
        return corners.min(axis=0), corners.max(axis=0)

    def same_geometry(self, other: "VolumeGrid", *, rtol: float = 1e-9) -> bool:
        return (self.shape == other.shape
                and self.orientation == other.orientation
                and np.allclose(self.spacing, other.spacing, rtol=rtol, atol=1e-9)
                and np.allclose(self.origin, other.origin, rtol=rtol, atol=1e-6))

    def astype_bool(self) -> "VolumeGrid":
        if self.data.dtype == np.bool_:
            return self
        return VolumeGrid(self.data != 0, self.spacing, self.origin, self.orientation)


def _require_same_geometry(a: VolumeGrid, b: VolumeGrid, what: str) -> None:
    if not a.same_geometry(b):
        raise ValueError(f"{what}: grids have mismatched geometry "
                         f"(shape {a.shape} vs {b.shape}, spacing {a.spacing} vs {b.spacing})")


def _require_binary(g: VolumeGrid, what: str) -> None:
    if g.data.dtype != np.bool_:
        raise ValueError(f"{what}: expected a binary grid, got dtype {g.data.dtype}")


# -- resampling -------------------------------------------------------------


def resample_isotropic(grid: VolumeGrid, target_mm: float = 1.0) -> VolumeGrid:
    """Resample to isotropic spacing, preserving the world-space extent of
    the voxel field to within one voxel.

    Scalar grids are interpolated trilinearly; binary grids use nearest
    neighbor so masks stay crisp.  A grid already at the target spacing is
    returned unchanged (bit-identical).
    """
    if target_mm <= 0:
        raise ValueError(f"target spacing must be positive, got {target_mm}")
    if all(abs(s - target_mm) < 1e-12 for s in grid.spacing):
        return grid
    factors = tuple(s / target_mm for s in grid.spacing)
    new_shape = tuple(max(1, int(round(n * f))) for n, f in zip(grid.shape, factors))

    binary = grid.data.dtype == np.bool_
    order = 0 if binary else 1
    src = grid.data.astype(np.uint8) if binary else grid.data.astype(np.float32)
    out = ndimage.zoom(src, zoom=factors, order=order, mode="nearest",
                       grid_mode=True, prefilter=False)
    # zoom sizes round the same way we did; guard against drift
    if out.shape != new_shape:  # pragma: no cover - scipy contract
        raise RuntimeError(f"resample size mismatch: {out.shape} vs {new_shape}")
    out = out.astype(np.bool_) if binary else out.astype(np.float32)

    # keep the field center fixed: origin' = C - (n'-1)/2 * t along each axis
    center = grid.index_to_world([(n - 1) / 2.0 for n in grid.shape])
    dirs = grid.axis_directions()
    new_origin = center - sum(((ns - 1) / 2.0) * target_mm * dirs[k]
                              for k, ns in enumerate(new_shape))
    return VolumeGrid(out, (target_mm,) * 3, tuple(new_origin), grid.orientation)


def reorient(grid: VolumeGrid, target: Iterable[str] = CANONICAL_ORIENTATION) -> VolumeGrid:
    """Permute/flip axes so the grid uses the target orientation codes.

    Pure data movement: every voxel keeps its world position exactly, so
    applying the inverse reorientation is an involution.
    """
    target = _check_orientation(tuple(target))
    src_axis_of = {_CODE_AXIS[c]: k for k, c in enumerate(grid.orientation)}
    perm = tuple(src_axis_of[_CODE_AXIS[c]] for c in target)
    data = np.transpose(grid.data, perm)
    spacing = tuple(grid.spacing[p] for p in perm)
    flips = tuple(_CODE_SIGN[target[k]] != _CODE_SIGN[grid.orientation[perm[k]]]
                  for k in range(3))
    first_idx = [0, 0, 0]
    for k in range(3):
        if flips[k]:
            data = np.flip(data, axis=k)
            first_idx[perm[k]] = grid.shape[perm[k]] - 1
    new_origin = grid.index_to_world(first_idx)
    return VolumeGrid(np.ascontiguousarray(data), spacing, tuple(new_origin), target)


# -- connected components ----------------------------------------------------


@dataclass(frozen=True)
class Component:
    """One connected component of a binary grid."""

    voxel_count: int
    centroid_mm: np.ndarray            # (3,)
    bbox_min_mm: np.ndarray            # (3,) world box corners
    bbox_max_mm: np.ndarray
    volume_mm3: float
    label: int                         # id in the relabeled component image


@dataclass(frozen=True)
class ComponentSet:
    components: tuple[Component, ...]
    labeled: np.ndarray                # int32 image, 0 = background

    def __len__(self) -> int:
        return len(self.components)

    def mask_of(self, comp: Component) -> np.ndarray:
        return self.labeled == comp.label


def connected_components(grid: VolumeGrid, connectivity: int = 26) -> ComponentSet:
    """Label the foreground of a binary grid.

    connectivity is 6 (faces) or 26 (faces+edges+corners).  Components are
    ordered by decreasing voxel count; exact ties are broken by the lowest
    linear index of any member voxel, so ids are deterministic.
    """
    _require_binary(grid, "connected_components")
    if connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 26:
        structure = ndimage.generate_binary_structure(3, 3)
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")

    raw, n = ndimage.label(grid.data, structure=structure)
    if n == 0:
        return ComponentSet((), raw.astype(np.int32))

    flat = raw.ravel()
    counts = np.bincount(flat, minlength=n + 1)
    # scipy assigns ids in raster order, so unique() first-occurrence indices
    # give each component's lowest linear index
    ids, first = np.unique(flat, return_index=True)
    first_of = dict(zip(ids.tolist(), first.tolist()))
    order = sorted(range(1, n + 1), key=lambda i: (-int(counts[i]), first_of[i]))

    remap = np.zeros(n + 1, dtype=np.int32)
    for new_id, old_id in enumerate(order, start=1):
        remap[old_id] = new_id
    labeled = remap[raw]

    vox = grid.voxel_volume_mm3
    sums = np.zeros((n + 1, 3))
    for ax in range(3):
        coords = np.arange(grid.shape[ax])
        shape = [1, 1, 1]
        shape[ax] = grid.shape[ax]
        w = np.broadcast_to(coords.reshape(shape), grid.shape)
        sums[:, ax] = np.bincount(flat, weights=w.ravel(), minlength=n + 1)
    objects = ndimage.find_objects(raw)

    comps = []
    for new_id, old_id in enumerate(order, start=1):
        cnt = int(counts[old_id])
        cidx = sums[old_id] / cnt
        sl = objects[old_id - 1]
        lo = [s.start for s in sl]
        hi = [s.stop - 1 for s in sl]
        corner_idx = np.array(np.meshgrid([lo[0], hi[0]], [lo[1], hi[1]],
                                          [lo[2], hi[2]])).reshape(3, -1).T
        corners = grid.index_to_world(corner_idx.astype(np.float64))
        comps.append(Component(
            voxel_count=cnt,
            centroid_mm=grid.index_to_world(cidx),
            bbox_min_mm=corners.min(axis=0),
            bbox_max_mm=corners.max(axis=0),
            volume_mm3=cnt * vox,
            label=new_id,
        ))
    return ComponentSet(tuple(comps), labeled)


# -- mask algebra -------------------------------------------------------------


def union_masks(grids: Iterable[VolumeGrid]) -> VolumeGrid | None:
    """OR of binary grids sharing one geometry; None for an empty input."""
    acc = None
    for g in grids:
        _require_binary(g, "union_masks")
        if acc is None:
            acc = g
            data = g.data.copy()
        else:
            _require_same_geometry(acc, g, "union_masks")
            data |= g.data
    if acc is None:
        return None
    return VolumeGrid(data, acc.spacing, acc.origin, acc.orientation)


def residual_mask(spine: VolumeGrid, vertebrae: Iterable[VolumeGrid]) -> VolumeGrid:
    """Foreground of the whole-spine mask not covered by any vertebra mask."""
    _require_binary(spine, "residual_mask")
    data = spine.data.copy()
    for g in vertebrae:
        _require_binary(g, "residual_mask")
        _require_same_geometry(spine, g, "residual_mask")
        data &= ~g.data
    return VolumeGrid(data, spine.spacing, spine.origin, spine.orientation)


def mask_volume_mm3(grid: VolumeGrid) -> float:
    _require_binary(grid, "mask_volume_mm3")
    return float(np.count_nonzero(grid.data)) * grid.voxel_volume_mm3


def mask_centroid_mm(grid: VolumeGrid) -> np.ndarray:
    """World-space center of mass of a non-empty binary grid."""
    _require_binary(grid, "mask_centroid_mm")
    idx = np.nonzero(grid.data)
    if idx[0].size == 0:
        raise ValueError("mask_centroid_mm: empty mask")
    mean_idx = np.array([c.mean() for c in idx])
    return grid.index_to_world(mean_idx)


# -- crops --------------------------------------------------------------------


def extract_crop(grid: VolumeGrid, center_mm: np.ndarray, side_voxels: int = 128) -> VolumeGrid:
    """Axis-aligned cube crop at 1 mm spacing centered on a world point.

    The crop shares the source orientation; voxels outside the source field
    are zero.  Sampling is nearest neighbor (crops feed the classifier, so
    they are binary in practice).
    """
    if side_voxels <= 0:
        raise ValueError("crop side must be positive")
    center = np.asarray(center_mm, dtype=np.float64)
    if center.shape != (3,):
        raise ValueError("crop center must be a 3-vector")
    dirs = grid.axis_directions()
    half = (side_voxels - 1) / 2.0
    origin = center - sum(half * 1.0 * dirs[k] for k in range(3))

    # crop axes align with source axes, so per-axis index vectors suffice
    gathers = []
    inside = []
    for k in range(3):
        world_ticks = origin + np.arange(side_voxels)[:, None] * dirs[k]
        # project to source fractional index along axis k
        frac = (world_ticks - np.asarray(grid.origin)) @ dirs[k] / grid.spacing[k]
        idx = np.rint(frac).astype(np.int64)
        ok = (idx >= 0) & (idx < grid.shape[k])
        gathers.append(np.clip(idx, 0, grid.shape[k] - 1))
        inside.append(ok)
    block = grid.data[np.ix_(gathers[0], gathers[1], gathers[2])]
    valid = (inside[0][:, None, None] & inside[1][None, :, None] & inside[2][None, None, :])
    if grid.data.dtype == np.bool_:
        out = block & valid
    else:
        out = np.where(valid, block, 0).astype(grid.data.dtype)
    return VolumeGrid(out, (1.0, 1.0, 1.0), tuple(origin), grid.orientation)


# -- boundaries ----------------------------------------------------------------


def boundary_voxels(grid: VolumeGrid) -> np.ndarray:
    """World coordinates (N,3) of foreground voxels on the mask surface.

    A voxel is boundary if any of its 6 face neighbors is background or it
    touches the grid edge.
    """
    _require_binary(grid, "boundary_voxels")
    if not grid.data.any():
        return np.empty((0, 3), dtype=np.float64)
    structure = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(grid.data, structure=structure, border_value=0)
    surf = grid.data & ~interior
    idx = np.argwhere(surf)
    return grid.index_to_world(idx.astype(np.float64))
