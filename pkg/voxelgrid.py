#!/usr/bin/env python3
"""
Voxel Grid Core
3D scalar lattices with physical geometry, and the geometry-preserving operations
used by the preprocessing chain: isotropic resampling, resizing, cropping and
intensity clip-normalization. Every geometric operation also returns the record
step needed to undo it.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import InvalidArgumentError, OutOfBoundsError

logger = logging.getLogger(__name__)

KIND_CT = 'ct_hu'
KIND_PROBABILITY = 'probability'
KIND_BINARY = 'binary'
KIND_LABEL = 'label'
KINDS = (KIND_CT, KIND_PROBABILITY, KIND_BINARY, KIND_LABEL)

# Continuous kinds interpolate trilinearly, the others nearest-neighbour only
CONTINUOUS_KINDS = (KIND_CT, KIND_PROBABILITY)

STORAGE_DTYPES = {
    KIND_CT: np.int16,
    KIND_PROBABILITY: np.float32,
    KIND_BINARY: np.uint8,
    KIND_LABEL: np.uint16,
}

Triple = Tuple[float, float, float]
Dims = Tuple[int, int, int]


def _as_triple(values: Sequence[float], name: str) -> Triple:
    if len(values) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {len(values)}")
    return tuple(float(v) for v in values)


def _as_dims(values: Sequence[int], name: str = "dims") -> Dims:
    if len(values) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {len(values)}")
    dims = tuple(int(v) for v in values)
    if any(d < 1 for d in dims):
        raise InvalidArgumentError(f"{name} must be >= 1 on every axis, got {dims}")
    return dims


def _coerce_values(values: np.ndarray, kind: str) -> np.ndarray:
    """Validate the lattice content for its kind and cast to the storage dtype"""
    values = np.asarray(values)
    target = STORAGE_DTYPES[kind]

    if kind == KIND_PROBABILITY:
        values = values.astype(target, copy=False)
        if values.size and not (np.all(np.isfinite(values)) and values.min() >= 0.0 and values.max() <= 1.0):
            raise InvalidArgumentError("probability grid values must lie in [0, 1]")
        return values

    if kind == KIND_CT:
        if values.dtype != target:
            if values.size and (values.min() < -32768 or values.max() > 32767):
                raise InvalidArgumentError("CT values outside the int16 range [-32768, 32767]")
            if np.issubdtype(values.dtype, np.floating):
                values = np.rint(values)
            values = values.astype(target)
        return values

    # binary and label lattices hold non-negative integers only
    if values.dtype.kind == 'b':
        values = values.astype(target)
    if values.size:
        if values.dtype.kind == 'f' and not np.all(values == np.floor(values)):
            raise InvalidArgumentError(f"{kind} grid values must be integers")
        lo, hi = values.min(), values.max()
        if lo < 0:
            raise InvalidArgumentError(f"{kind} grid values must be non-negative")
        if kind == KIND_BINARY and hi > 1:
            raise InvalidArgumentError("binary grid values must be 0 or 1")
        if hi > np.iinfo(target).max:
            raise InvalidArgumentError(f"{kind} grid value {hi} exceeds storage range")
    return values.astype(target, copy=False)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D lattice indexed [x, y, z] with spacing and origin in millimetres.

    The linear voxel index is x-fastest: ``x + X * (y + Y * z)``.
    Grids are never modified in place by toolkit operations.
    """
    values: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    kind: str = KIND_PROBABILITY

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown grid kind '{self.kind}', expected one of {KINDS}")
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise InvalidArgumentError(f"grid values must be 3D, got {values.ndim}D")
        _as_dims(values.shape)
        spacing = _as_triple(self.spacing, "spacing")
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidArgumentError(f"spacing must be positive on every axis, got {spacing}")
        object.__setattr__(self, 'values', _coerce_values(values, self.kind))
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'origin', _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.values.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def extent_mm(self) -> Triple:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def is_continuous(self) -> bool:
        return self.kind in CONTINUOUS_KINDS

    def with_values(self, values: np.ndarray, kind: Optional[str] = None,
                    spacing: Optional[Sequence[float]] = None,
                    origin: Optional[Sequence[float]] = None) -> 'VoxelGrid':
        """New grid sharing this grid's geometry unless overridden"""
        return VoxelGrid(values,
                         spacing=self.spacing if spacing is None else tuple(spacing),
                         origin=self.origin if origin is None else tuple(origin),
                         kind=self.kind if kind is None else kind)

    def same_geometry(self, other: 'VoxelGrid', tol: float = 1e-6) -> bool:
        return (self.dims == other.dims
                and all(abs(a - b) <= tol for a, b in zip(self.spacing, other.spacing)))

    def require_same_geometry(self, other: 'VoxelGrid', what: str = "grids") -> None:
        if not self.same_geometry(other):
            raise InvalidArgumentError(
                f"{what} differ in geometry: {self.dims}@{self.spacing} vs {other.dims}@{other.spacing}")

    def foreground(self) -> np.ndarray:
        """Boolean mask of non-zero voxels"""
        return self.values != 0


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive integer voxel box"""
    min_corner: Dims
    max_corner: Dims

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_corner)
        hi = tuple(int(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3:
            raise InvalidArgumentError("bounding box corners must have 3 components")
        if any(a > b for a, b in zip(lo, hi)):
            raise InvalidArgumentError(f"bounding box min {lo} exceeds max {hi}")
        object.__setattr__(self, 'min_corner', lo)
        object.__setattr__(self, 'max_corner', hi)

    @property
    def shape(self) -> Dims:
        return tuple(b - a + 1 for a, b in zip(self.min_corner, self.max_corner))

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min_corner, self.max_corner))

    def fits(self, dims: Sequence[int]) -> bool:
        return all(a >= 0 and b < d for a, b, d in zip(self.min_corner, self.max_corner, dims))

    @classmethod
    def full(cls, dims: Sequence[int]) -> 'BoundingBox':
        return cls((0, 0, 0), tuple(int(d) - 1 for d in dims))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> Optional['BoundingBox']:
        """Tightest box around the non-zero voxels, None when the mask is empty"""
        if not np.any(mask):
            return None
        lo, hi = [], []
        for axis in range(3):
            other = tuple(a for a in range(3) if a != axis)
            present = np.flatnonzero(np.any(mask, axis=other))
            lo.append(int(present[0]))
            hi.append(int(present[-1]))
        return cls(tuple(lo), tuple(hi))

    def union(self, other: 'BoundingBox') -> 'BoundingBox':
        return BoundingBox(tuple(min(a, b) for a, b in zip(self.min_corner, other.min_corner)),
                           tuple(max(a, b) for a, b in zip(self.max_corner, other.max_corner)))

    def to_dict(self) -> Dict[str, List[int]]:
        return {'min': list(self.min_corner), 'max': list(self.max_corner)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BoundingBox':
        return cls(tuple(data['min']), tuple(data['max']))


# ---------------------------------------------------------------------------
# Geometry record
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResampleStep:
    old_dims: Dims
    new_dims: Dims
    old_spacing: Triple
    new_spacing: Triple
    old_origin: Triple
    new_origin: Triple
    op: str = field(default='resample', init=False)

    def forward_dims(self, dims: Dims) -> Dims:
        return self.new_dims


@dataclass(frozen=True)
class CropStep:
    box: BoundingBox
    pre_dims: Dims
    old_origin: Triple
    op: str = field(default='crop', init=False)

    def forward_dims(self, dims: Dims) -> Dims:
        return self.box.shape


@dataclass(frozen=True)
class ResizeStep:
    old_dims: Dims
    new_dims: Dims
    old_spacing: Triple
    new_spacing: Triple
    old_origin: Triple
    new_origin: Triple
    op: str = field(default='resize', init=False)

    def forward_dims(self, dims: Dims) -> Dims:
        return self.new_dims


@dataclass(frozen=True)
class NormalizeStep:
    """Intensity step; logged for provenance, geometrically neutral"""
    lo: float
    hi: float
    op: str = field(default='normalize', init=False)

    def forward_dims(self, dims: Dims) -> Dims:
        return dims


GeometryStep = Union[ResampleStep, CropStep, ResizeStep, NormalizeStep]


def _step_to_dict(step: GeometryStep) -> Dict[str, Any]:
    if isinstance(step, CropStep):
        return {'op': step.op, 'box': step.box.to_dict(), 'pre_dims': list(step.pre_dims),
                'old_origin': list(step.old_origin)}
    if isinstance(step, NormalizeStep):
        return {'op': step.op, 'lo': step.lo, 'hi': step.hi}
    return {'op': step.op,
            'old_dims': list(step.old_dims), 'new_dims': list(step.new_dims),
            'old_spacing': list(step.old_spacing), 'new_spacing': list(step.new_spacing),
            'old_origin': list(step.old_origin), 'new_origin': list(step.new_origin)}


def _step_from_dict(data: Dict[str, Any]) -> GeometryStep:
    op = data.get('op')
    if op == 'crop':
        return CropStep(BoundingBox.from_dict(data['box']), tuple(data['pre_dims']),
                        tuple(data['old_origin']))
    if op == 'normalize':
        return NormalizeStep(float(data['lo']), float(data['hi']))
    if op in ('resample', 'resize'):
        cls = ResampleStep if op == 'resample' else ResizeStep
        return cls(tuple(data['old_dims']), tuple(data['new_dims']),
                   tuple(data['old_spacing']), tuple(data['new_spacing']),
                   tuple(data['old_origin']), tuple(data['new_origin']))
    raise InvalidArgumentError(f"unknown geometry step '{op}'")


@dataclass
class GeometryRecord:
    """Ordered, invertible log of the transforms applied to a source grid"""
    source_dims: Dims
    source_spacing: Triple
    source_origin: Triple = (0.0, 0.0, 0.0)
    steps: List[GeometryStep] = field(default_factory=list)

    @classmethod
    def for_grid(cls, grid: VoxelGrid) -> 'GeometryRecord':
        return cls(grid.dims, grid.spacing, grid.origin)

    def append(self, step: GeometryStep) -> None:
        self.steps.append(step)

    def forward_dims(self, dims: Optional[Dims] = None) -> Dims:
        """Replay the record on dims; from the source dims this yields the processed dims"""
        current = tuple(self.source_dims if dims is None else dims)
        for step in self.steps:
            current = tuple(step.forward_dims(current))
        return current

    @property
    def output_dims(self) -> Dims:
        return self.forward_dims()

    def is_identity(self) -> bool:
        return all(isinstance(s, NormalizeStep) for s in self.steps)

    def to_dict(self) -> Dict[str, Any]:
        return {'source_dims': list(self.source_dims),
                'source_spacing': list(self.source_spacing),
                'source_origin': list(self.source_origin),
                'steps': [_step_to_dict(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GeometryRecord':
        try:
            return cls(tuple(int(d) for d in data['source_dims']),
                       tuple(float(s) for s in data['source_spacing']),
                       tuple(float(o) for o in data.get('source_origin', (0.0, 0.0, 0.0))),
                       [_step_from_dict(s) for s in data.get('steps', [])])
        except (KeyError, TypeError) as e:
            raise InvalidArgumentError(f"malformed geometry record: {e}") from e


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def zoom_values(values: np.ndarray, target_dims: Sequence[int], continuous: bool) -> np.ndarray:
    """Interpolate a lattice onto target_dims covering the same physical extent.

    Voxel centres map with the half-voxel convention and borders clamp to the
    edge voxel. Continuous data is trilinear (float32 out), discrete data nearest.
    """
    target = _as_dims(target_dims, "target dims")
    if tuple(values.shape) == target:
        return values.copy()
    factors = [t / s for t, s in zip(target, values.shape)]
    if continuous:
        out = ndimage.zoom(values, factors, output=np.float32, order=1, mode='nearest', grid_mode=True)
    else:
        out = ndimage.zoom(values, factors, order=0, mode='nearest', grid_mode=True)
    if tuple(out.shape) != target:
        raise InvalidArgumentError(f"interpolation produced {out.shape}, expected {target}")
    return out


def _regrid(grid: VoxelGrid, target: Dims) -> Tuple[np.ndarray, Triple, Triple]:
    """Interpolated values plus the effective spacing/origin of the new lattice"""
    values = zoom_values(grid.values, target, grid.is_continuous())
    if grid.kind == KIND_CT and values.dtype != np.int16:
        values = np.clip(np.rint(values), -32768, 32767).astype(np.int16)
    elif grid.kind == KIND_PROBABILITY:
        np.clip(values, 0.0, 1.0, out=values)
    spacing = tuple(s * o / n for s, o, n in zip(grid.spacing, grid.dims, target))
    origin = tuple(p + 0.5 * (ns - s) for p, ns, s in zip(grid.origin, spacing, grid.spacing))
    return values, spacing, origin


def isotropic_dims(dims: Sequence[int], spacing: Sequence[float], target_spacing: float) -> Dims:
    """Lattice dims after isotropic resampling, rounded half-up, never below 1"""
    return tuple(max(1, int(math.floor(d * s / target_spacing + 0.5))) for d, s in zip(dims, spacing))


def resample_isotropic(grid: VoxelGrid, target_spacing: float = 1.0) -> Tuple[VoxelGrid, ResampleStep]:
    """Resample to (t, t, t) mm; dims round half-up from the physical extent"""
    if not (target_spacing > 0 and math.isfinite(target_spacing)):
        raise InvalidArgumentError(f"target spacing must be positive, got {target_spacing}")
    t = float(target_spacing)
    new_dims = isotropic_dims(grid.dims, grid.spacing, t)

    if new_dims == grid.dims and all(abs(s - t) < 1e-9 for s in grid.spacing):
        out = grid.with_values(grid.values.copy(), spacing=(t, t, t))
        return out, ResampleStep(grid.dims, new_dims, grid.spacing, out.spacing, grid.origin, out.origin)

    values, _, origin = _regrid(grid, new_dims)
    out = VoxelGrid(values, spacing=(t, t, t), origin=origin, kind=grid.kind)
    logger.debug(f"Resampled {grid.dims}@{grid.spacing} -> {new_dims}@{t}mm")
    return out, ResampleStep(grid.dims, new_dims, grid.spacing, out.spacing, grid.origin, out.origin)


def resize(grid: VoxelGrid, target_dims: Sequence[int]) -> Tuple[VoxelGrid, ResizeStep]:
    """Resize to target_dims; spacing rescales so the physical extent is preserved"""
    if len(target_dims) != 3 or any(int(d) < 1 for d in target_dims):
        raise InvalidArgumentError(f"target dims must be 3 positive integers, got {tuple(target_dims)}")
    target = tuple(int(d) for d in target_dims)

    if target == grid.dims:
        out = grid.with_values(grid.values.copy())
        return out, ResizeStep(grid.dims, target, grid.spacing, grid.spacing, grid.origin, grid.origin)

    values, spacing, origin = _regrid(grid, target)
    out = VoxelGrid(values, spacing=spacing, origin=origin, kind=grid.kind)
    return out, ResizeStep(grid.dims, target, grid.spacing, spacing, grid.origin, origin)


def crop(grid: VoxelGrid, box: BoundingBox) -> Tuple[VoxelGrid, CropStep]:
    """Copy the box region; spacing unchanged, origin moved to the box corner"""
    if not box.fits(grid.dims):
        raise OutOfBoundsError(f"box {box.min_corner}..{box.max_corner} outside grid {grid.dims}")
    origin = tuple(p + m * s for p, m, s in zip(grid.origin, box.min_corner, grid.spacing))
    out = VoxelGrid(grid.values[box.slices()].copy(), spacing=grid.spacing, origin=origin, kind=grid.kind)
    return out, CropStep(box, grid.dims, grid.origin)


def paste(grid: VoxelGrid, box: BoundingBox, host_dims: Sequence[int],
          host_origin: Optional[Sequence[float]] = None) -> VoxelGrid:
    """Inverse of crop: place grid at box inside a zero host lattice"""
    host = _as_dims(host_dims, "host dims")
    if not box.fits(host):
        raise OutOfBoundsError(f"box {box.min_corner}..{box.max_corner} outside host {host}")
    if box.shape != grid.dims:
        raise InvalidArgumentError(f"grid dims {grid.dims} do not match box extents {box.shape}")
    values = np.zeros(host, dtype=grid.values.dtype)
    values[box.slices()] = grid.values
    if host_origin is None:
        host_origin = tuple(p - m * s for p, m, s in zip(grid.origin, box.min_corner, grid.spacing))
    return VoxelGrid(values, spacing=grid.spacing, origin=tuple(host_origin), kind=grid.kind)


def clip_normalize(grid: VoxelGrid, lo: float = -250.0, hi: float = 500.0) -> VoxelGrid:
    """Clamp HU to [lo, hi] and map linearly onto [0, 1]"""
    if not lo < hi:
        raise InvalidArgumentError(f"clip window lower bound {lo} must be below upper bound {hi}")
    if grid.kind != KIND_CT:
        raise InvalidArgumentError(f"clip_normalize expects a CT grid, got '{grid.kind}'")
    values = np.clip(grid.values.astype(np.float32), lo, hi)
    values = (values - np.float32(lo)) / np.float32(hi - lo)
    # float32 rounding can leave values a hair outside the unit interval
    np.clip(values, 0.0, 1.0, out=values)
    return grid.with_values(values, kind=KIND_PROBABILITY)


def replay(grid: VoxelGrid, record: GeometryRecord) -> VoxelGrid:
    """Push a companion grid (mask, priors, ground truth) through a record's geometric steps"""
    if grid.dims != tuple(record.source_dims):
        raise InvalidArgumentError(f"grid dims {grid.dims} do not match record source {record.source_dims}")
    current = grid
    for step in record.steps:
        if isinstance(step, ResampleStep):
            values, _, _ = _regrid(current, step.new_dims)
            current = VoxelGrid(values, spacing=step.new_spacing, origin=step.new_origin, kind=current.kind)
        elif isinstance(step, CropStep):
            current, _ = crop(current, step.box)
        elif isinstance(step, ResizeStep):
            values, _, _ = _regrid(current, step.new_dims)
            current = VoxelGrid(values, spacing=step.new_spacing, origin=step.new_origin, kind=current.kind)
    return current
