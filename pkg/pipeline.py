#!/usr/bin/env python3
"""
Preprocessing Pipeline
CT preprocessing (isotropic resampling, lung-box crop, resize, clip-normalize),
slab decomposition and stitching, probability-map ensembling and restoration of
network outputs to the original patient space.
"""

import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import InvalidArgumentError, NoLungFoundError
from voxelgrid import (
    BoundingBox, CropStep, GeometryRecord, NormalizeStep, ResampleStep, ResizeStep, VoxelGrid,
    KIND_BINARY, KIND_CT, KIND_PROBABILITY,
    clip_normalize, crop, paste, resample_isotropic, resize,
)

logger = logging.getLogger(__name__)

MODE_SLAB = 'slab'
MODE_FULLVOL = 'fullvol'


@dataclass(frozen=True)
class SlabSpec:
    slab_size: int = 32
    stride: int = 8
    axial_dims: Tuple[int, int] = (256, 192)

    def __post_init__(self):
        if self.slab_size < 1:
            raise InvalidArgumentError(f"slab size must be positive, got {self.slab_size}")
        if not 1 <= self.stride <= self.slab_size:
            raise InvalidArgumentError(f"stride must lie in [1, {self.slab_size}], got {self.stride}")
        if len(self.axial_dims) != 2 or any(d < 1 for d in self.axial_dims):
            raise InvalidArgumentError(f"axial dims must be two positive ints, got {self.axial_dims}")
        object.__setattr__(self, 'axial_dims', tuple(int(d) for d in self.axial_dims))

    def starts(self, depth: int) -> List[int]:
        """Slab z starts for a volume of the given depth; the last start is clamped to the end"""
        if depth < self.slab_size:
            return [0]
        starts = list(range(0, depth - self.slab_size + 1, self.stride))
        if starts[-1] != depth - self.slab_size:
            starts.append(depth - self.slab_size)
        return starts


@dataclass(frozen=True)
class PreprocessConfig:
    mode: str = MODE_SLAB
    slab: SlabSpec = field(default_factory=SlabSpec)
    fullvol_dims: Tuple[int, int, int] = (128, 128, 144)
    target_spacing: float = 1.0
    clip_hu: Tuple[float, float] = (-250.0, 500.0)
    lung_threshold_hu: float = -320.0

    def __post_init__(self):
        if self.mode not in (MODE_SLAB, MODE_FULLVOL):
            raise InvalidArgumentError(f"unknown preprocessing mode '{self.mode}'")
        if self.clip_hu[0] >= self.clip_hu[1]:
            raise InvalidArgumentError(f"clip window {self.clip_hu} is empty")

    @classmethod
    def from_config(cls, config, mode: str = MODE_SLAB, **overrides) -> 'PreprocessConfig':
        """Build from a ConfigManager's pipeline section; keyword overrides win"""
        section = config.get_section('pipeline')
        slab = SlabSpec(slab_size=int(overrides.pop('slab_size', None) or section['slab_size']),
                        stride=int(overrides.pop('stride', None) or section['stride']),
                        axial_dims=tuple(section['axial_dims']))
        return cls(mode=mode, slab=slab,
                   fullvol_dims=tuple(section['fullvol_dims']),
                   target_spacing=float(section['target_spacing_mm']),
                   clip_hu=tuple(float(v) for v in section['clip_hu']),
                   lung_threshold_hu=float(section['lung_threshold_hu']),
                   **overrides)


@dataclass
class Slab:
    z_start: int
    grid: Optional[VoxelGrid]
    valid_depth: int


@dataclass
class SlabSet:
    """Overlapping z-slabs of a parent volume; a layout read from disk carries no slab grids"""
    slabs: List[Slab]
    parent_dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    spec: SlabSpec

    def __len__(self) -> int:
        return len(self.slabs)

    @property
    def slab_dims(self) -> Tuple[int, int, int]:
        return (self.parent_dims[0], self.parent_dims[1], self.spec.slab_size)

    def z_starts(self) -> List[int]:
        return [s.z_start for s in self.slabs]

    def layout(self) -> Dict[str, Any]:
        return {
            'parent_dims': list(self.parent_dims),
            'spacing': list(self.spacing),
            'origin': list(self.origin),
            'slab_size': self.spec.slab_size,
            'stride': self.spec.stride,
            'slabs': [{'z_start': s.z_start, 'valid_depth': s.valid_depth} for s in self.slabs],
        }

    @classmethod
    def from_layout(cls, data: Dict[str, Any]) -> 'SlabSet':
        try:
            spec = SlabSpec(slab_size=int(data['slab_size']), stride=int(data['stride']))
            slabs = [Slab(int(s['z_start']), None, int(s['valid_depth'])) for s in data['slabs']]
            return cls(slabs, tuple(int(d) for d in data['parent_dims']),
                       tuple(float(v) for v in data['spacing']), tuple(float(v) for v in data['origin']), spec)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidArgumentError(f"malformed slab layout: {e}") from e


@dataclass
class MultiChannelSample:
    """Channel 0 normalized CT, optional channel 1 merged anatomical priors"""
    channels: List[VoxelGrid]

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def to_array(self) -> np.ndarray:
        """Channels-first float32 array"""
        return np.stack([c.values.astype(np.float32) for c in self.channels])


def lung_bbox(ct: VoxelGrid, lung_mask: Optional[VoxelGrid] = None,
              threshold_hu: float = -320.0) -> BoundingBox:
    """Box around the lungs, from a mask or by thresholding air inside the body"""
    if lung_mask is not None:
        ct.require_same_geometry(lung_mask, "CT and lung mask")
        box = BoundingBox.from_mask(lung_mask.values)
        if box is None:
            raise NoLungFoundError("lung mask is empty")
        return box

    candidates = ct.values < threshold_hu
    labels, count = ndimage.label(candidates, structure=ndimage.generate_binary_structure(3, 1))
    if count == 0:
        raise NoLungFoundError(f"no voxels below {threshold_hu} HU")

    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    nx, ny = ct.dims[0], ct.dims[1]
    inside = []
    for index, region in enumerate(ndimage.find_objects(labels), start=1):
        if region is None:
            continue
        # outside air reaches the x/y frame; lungs do not
        if region[0].start == 0 or region[0].stop == nx or region[1].start == 0 or region[1].stop == ny:
            continue
        inside.append((-int(sizes[index]), index, region))

    if not inside:
        raise NoLungFoundError("no lung-like component inside the body")
    inside.sort(key=lambda item: (item[0], item[1]))
    boxes = [BoundingBox(tuple(s.start for s in region), tuple(s.stop - 1 for s in region))
             for _, _, region in inside[:2]]
    logger.debug(f"Lung components kept: {[-size for size, _, _ in inside[:2]]} voxels")
    return reduce(BoundingBox.union, boxes)


def preprocess(ct: VoxelGrid, cfg: PreprocessConfig = PreprocessConfig(),
               lung_mask: Optional[VoxelGrid] = None) -> Tuple[VoxelGrid, GeometryRecord]:
    """Resample, crop to the lungs, resize and normalize; the record logs every step"""
    if ct.kind != KIND_CT:
        raise InvalidArgumentError(f"preprocess expects a CT grid, got '{ct.kind}'")
    record = GeometryRecord.for_grid(ct)

    grid, step = resample_isotropic(ct, cfg.target_spacing)
    record.append(step)

    mask_iso = None
    if lung_mask is not None:
        ct.require_same_geometry(lung_mask, "CT and lung mask")
        binary = lung_mask.with_values((lung_mask.values != 0).astype(np.uint8), kind=KIND_BINARY)
        mask_iso, _ = resample_isotropic(binary, cfg.target_spacing)
    box = lung_bbox(grid, mask_iso, cfg.lung_threshold_hu)
    grid, step = crop(grid, box)
    record.append(step)

    if cfg.mode == MODE_SLAB:
        target = (cfg.slab.axial_dims[0], cfg.slab.axial_dims[1], grid.dims[2])
    else:
        target = tuple(cfg.fullvol_dims)
    grid, step = resize(grid, target)
    record.append(step)

    lo, hi = cfg.clip_hu
    grid = clip_normalize(grid, lo, hi)
    record.append(NormalizeStep(lo, hi))

    logger.info(f"Preprocessed {ct.dims} -> {grid.dims} ({cfg.mode}, lung box {box.min_corner}..{box.max_corner})")
    return grid, record


def stack_priors(ct_norm: VoxelGrid, prior_masks: Sequence[VoxelGrid]) -> MultiChannelSample:
    """Attach the voxelwise OR of the anatomical prior masks as a second channel"""
    if not prior_masks:
        return MultiChannelSample([ct_norm])
    for mask in prior_masks:
        ct_norm.require_same_geometry(mask, "CT and prior mask")
    merged = np.logical_or.reduce([mask.values != 0 for mask in prior_masks])
    return MultiChannelSample([ct_norm, ct_norm.with_values(merged.astype(np.uint8), kind=KIND_BINARY)])


def extract_slabs(vol: VoxelGrid, spec: SlabSpec = SlabSpec()) -> SlabSet:
    """Split along z into overlapping slabs; shallow volumes give one zero-padded slab"""
    depth = vol.dims[2]
    size = spec.slab_size
    slabs = []
    for z in spec.starts(depth):
        valid = min(size, depth - z)
        values = np.zeros((vol.dims[0], vol.dims[1], size), dtype=vol.values.dtype)
        values[:, :, :valid] = vol.values[:, :, z:z + valid]
        origin = (vol.origin[0], vol.origin[1], vol.origin[2] + z * vol.spacing[2])
        slabs.append(Slab(z, vol.with_values(values, origin=origin), valid))
    logger.debug(f"Extracted {len(slabs)} slabs of depth {size} (stride {spec.stride}) from depth {depth}")
    return SlabSet(slabs, vol.dims, vol.spacing, vol.origin, spec)


def stitch_slabs(slab_preds: Sequence[VoxelGrid], target: SlabSet) -> VoxelGrid:
    """Average overlapping slab predictions back onto the parent lattice"""
    if len(slab_preds) != len(target.slabs):
        raise InvalidArgumentError(f"got {len(slab_preds)} slab predictions for {len(target.slabs)} slabs")

    total = np.zeros(target.parent_dims, dtype=np.float64)
    count = np.zeros(target.parent_dims, dtype=np.int32)
    for pred, slab in zip(slab_preds, target.slabs):
        if pred.dims != target.slab_dims:
            raise InvalidArgumentError(f"slab prediction dims {pred.dims} differ from slab {target.slab_dims}")
        z, valid = slab.z_start, slab.valid_depth
        total[:, :, z:z + valid] += pred.values[:, :, :valid]
        count[:, :, z:z + valid] += 1

    if np.any(count == 0):
        raise InvalidArgumentError("slab set leaves parent slices uncovered")
    values = np.clip(total / count, 0.0, 1.0).astype(np.float32)
    return VoxelGrid(values, spacing=target.spacing, origin=target.origin, kind=KIND_PROBABILITY)


def ensemble_max(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    """Voxelwise maximum of two probability maps"""
    a.require_same_geometry(b, "ensemble members")
    if a.kind != KIND_PROBABILITY or b.kind != KIND_PROBABILITY:
        raise InvalidArgumentError("ensemble members must be probability grids")
    return a.with_values(np.maximum(a.values, b.values))


def ensemble_all(grids: Sequence[VoxelGrid]) -> VoxelGrid:
    if not grids:
        raise InvalidArgumentError("ensemble needs at least one member")
    return reduce(ensemble_max, grids)


def restore_original_space(prob: VoxelGrid, record: GeometryRecord) -> VoxelGrid:
    """Undo the recorded steps in reverse order; outside the crop box is zero"""
    if prob.dims != record.output_dims:
        raise InvalidArgumentError(f"grid dims {prob.dims} do not match record output {record.output_dims}")

    current = prob
    for step in reversed(record.steps):
        if isinstance(step, (ResizeStep, ResampleStep)):
            current, _ = resize(current, step.old_dims)
            current = current.with_values(current.values, spacing=step.old_spacing, origin=step.old_origin)
        elif isinstance(step, CropStep):
            current = paste(current, step.box, step.pre_dims, host_origin=step.old_origin)

    current = current.with_values(current.values, spacing=record.source_spacing, origin=record.source_origin)
    logger.debug(f"Restored {prob.dims} -> {current.dims}")
    return current
