#!/usr/bin/env python3
"""
Instance Extraction
Thresholding, 3D connected-component labeling, ground-truth clustering of
touching annotations and RECIST-style morphometrics (volume, short axis).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage.measure import regionprops

from errors import InvalidArgumentError
from volio import Annotation, StationInfo, sort_stations
from voxelgrid import BoundingBox, VoxelGrid, KIND_BINARY, KIND_LABEL, KIND_PROBABILITY

logger = logging.getLogger(__name__)

# neighbourhood size -> rank passed to generate_binary_structure
CONNECTIVITY_RANKS = {6: 1, 18: 2, 26: 3}

SIZE_CATEGORIES = ('lt7', '7to10', 'ge10')
# cumulative bands used by the size-stratified report rows: band -> minimum short axis (mm)
SIZE_BANDS = {'all': 0.0, 'ge7': 7.0, 'ge10': 10.0}


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY_RANKS:
        raise InvalidArgumentError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANKS[connectivity])


def size_category(short_axis_mm: float) -> str:
    """lt7 (< 7 mm), 7to10 ([7, 10[ mm) or ge10 (at least 10 mm)"""
    if short_axis_mm is None or not short_axis_mm >= 0:
        raise InvalidArgumentError(f"short axis must be non-negative, got {short_axis_mm}")
    if short_axis_mm < 7.0:
        return 'lt7'
    if short_axis_mm < 10.0:
        return '7to10'
    return 'ge10'


def in_size_band(short_axis_mm: float, band: str) -> bool:
    if band not in SIZE_BANDS:
        raise InvalidArgumentError(f"unknown size band '{band}', expected one of {list(SIZE_BANDS)}")
    return short_axis_mm >= SIZE_BANDS[band]


@dataclass
class Instance:
    """One connected foreground component"""
    id: int
    coords: np.ndarray
    voxel_count: int
    volume_ml: float
    short_axis_mm: Optional[float] = None
    stations: Tuple[str, ...] = ()
    primaries: FrozenSet[str] = frozenset()

    def bounding_box(self) -> BoundingBox:
        return BoundingBox(tuple(self.coords.min(axis=0)), tuple(self.coords.max(axis=0)))

    def to_dict(self, include_coords: bool = False) -> Dict[str, Any]:
        box = self.bounding_box()
        data = {
            'id': self.id,
            'voxel_count': self.voxel_count,
            'volume_ml': self.volume_ml,
            'short_axis_mm': self.short_axis_mm,
            'size_category': None if self.short_axis_mm is None else size_category(self.short_axis_mm),
            'bbox': box.to_dict(),
            'stations': list(self.stations),
            'primaries': list(sort_stations(self.primaries)),
        }
        if include_coords:
            data['coords'] = self.coords.tolist()
        return data


def instance_volume_ml(inst: Instance, spacing) -> float:
    return inst.voxel_count * float(np.prod(spacing)) / 1000.0


def short_axis_diameter(inst: Instance, spacing) -> float:
    """Largest minor axis (mm) of the moment-equivalent ellipse over the instance's axial slices"""
    if inst.voxel_count < 1 or len(inst.coords) == 0:
        raise InvalidArgumentError(f"instance {inst.id} is empty")
    if abs(spacing[0] - spacing[1]) > 1e-6:
        raise InvalidArgumentError(f"in-plane spacing must be isotropic, got {spacing[0]} x {spacing[1]}")

    lo = inst.coords.min(axis=0)
    local = inst.coords - lo
    mask = np.zeros(tuple(local.max(axis=0) + 1), dtype=np.uint8)
    mask[local[:, 0], local[:, 1], local[:, 2]] = 1

    best = 0.0
    for z in range(mask.shape[2]):
        axial = mask[:, :, z]
        if axial.sum() <= 1:
            continue
        props = regionprops(axial)
        best = max(best, float(props[0].axis_minor_length))
    return best * float(spacing[0])


@dataclass
class InstanceSet:
    """Disjoint instances covering a binary mask, plus their id-labelled lattice"""
    instances: List[Instance]
    label_map: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    connectivity: int = 26
    _by_id: Dict[int, Instance] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {inst.id: inst for inst in self.instances}

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.label_map.shape)

    def ids(self) -> List[int]:
        return [inst.id for inst in self.instances]

    def get(self, instance_id: int) -> Instance:
        return self._by_id[instance_id]

    def voxel_counts(self) -> np.ndarray:
        """Voxel count indexed by instance id (index 0 is background)"""
        return np.bincount(self.label_map.ravel(), minlength=max(self.ids(), default=0) + 1)

    def foreground(self) -> np.ndarray:
        return self.label_map != 0

    def measure(self) -> 'InstanceSet':
        """Fill in short-axis diameters"""
        for inst in self.instances:
            inst.short_axis_mm = short_axis_diameter(inst, self.spacing)
        return self

    def to_grid(self) -> VoxelGrid:
        if len(self.instances) > np.iinfo(np.uint16).max:
            raise InvalidArgumentError(f"{len(self.instances)} instances exceed the label grid range")
        return VoxelGrid(self.label_map.astype(np.uint16), spacing=self.spacing,
                         origin=self.origin, kind=KIND_LABEL)

    def to_dict(self, include_coords: bool = False) -> Dict[str, Any]:
        return {
            'dims': list(self.dims),
            'spacing': list(self.spacing),
            'origin': list(self.origin),
            'connectivity': self.connectivity,
            'instances': [inst.to_dict(include_coords) for inst in self.instances],
        }


def threshold(prob: VoxelGrid, pt: float) -> VoxelGrid:
    """Binary mask of voxels with probability >= pt"""
    if not 0.0 <= pt <= 1.0:
        raise InvalidArgumentError(f"threshold must lie in [0, 1], got {pt}")
    if prob.kind != KIND_PROBABILITY:
        raise InvalidArgumentError(f"threshold expects a probability grid, got '{prob.kind}'")
    return prob.with_values((prob.values >= pt).astype(np.uint8), kind=KIND_BINARY)


def _scan_order_labels(mask: np.ndarray, connectivity: int) -> Tuple[np.ndarray, int]:
    """Component labels numbered by first voxel in x-fastest scan order"""
    # labeling the transposed (z, y, x) view makes C order the x-fastest scan
    labels_zyx, count = ndimage.label(mask.T, structure=connectivity_structure(connectivity))
    if count == 0:
        return np.zeros(mask.shape, dtype=np.int32), 0

    flat = labels_zyx.ravel()
    # flatnonzero is ascending, so first hits among foreground keep scan order
    ids, first = np.unique(flat[np.flatnonzero(flat)], return_index=True)
    lut = np.zeros(count + 1, dtype=np.int32)
    lut[ids[np.argsort(first, kind='stable')]] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return np.ascontiguousarray(lut[labels_zyx].T), count


def _build_instances(label_map: np.ndarray, count: int, spacing) -> List[Instance]:
    voxel_ml = float(np.prod(spacing)) / 1000.0
    instances = []
    for index, region in enumerate(ndimage.find_objects(label_map, max_label=count), start=1):
        if region is None:
            continue
        local = np.argwhere(label_map[region] == index)
        coords = local + np.array([s.start for s in region])
        instances.append(Instance(id=index, coords=coords, voxel_count=len(coords),
                                  volume_ml=len(coords) * voxel_ml))
    return instances


def connected_components(binary: VoxelGrid, connectivity: int = 26) -> InstanceSet:
    """Label foreground components; ids ascend with each component's lowest linear voxel index"""
    mask = binary.values != 0
    label_map, count = _scan_order_labels(mask, connectivity)
    instances = _build_instances(label_map, count, binary.spacing)
    logger.debug(f"Found {len(instances)} components ({connectivity}-connectivity)")
    return InstanceSet(instances, label_map, binary.spacing, binary.origin, connectivity)


def extract_instances(prob: VoxelGrid, pt: float, connectivity: int = 26) -> InstanceSet:
    return connected_components(threshold(prob, pt), connectivity)


def annotated_instances(ann: Annotation) -> InstanceSet:
    """One instance per annotation label, id equal to the label, without clustering"""
    ann.validate()
    label_map = ann.labels.values.astype(np.int32)
    ids = ann.label_ids()
    instances = _build_instances(label_map, ids[-1] if ids else 0, ann.labels.spacing)
    for inst in instances:
        info = ann.stations[inst.id]
        inst.stations = info.stations
        inst.primaries = info.primaries
    return InstanceSet(instances, label_map, ann.labels.spacing, ann.labels.origin)


def cluster_ground_truth(ann: Annotation, connectivity: int = 26) -> Tuple[Annotation, InstanceSet]:
    """Merge touching annotated nodes into single instances.

    A cluster carries the union of its members' stations and every member's
    primary station; its nominal primary is that of the lowest member label.
    """
    ann.validate()
    values = ann.labels.values
    label_map, count = _scan_order_labels(values != 0, connectivity)
    instances = _build_instances(label_map, count, ann.labels.spacing)

    fg = label_map != 0
    pairs = np.unique(np.stack([label_map[fg], values[fg].astype(np.int64)]), axis=1)
    members: Dict[int, List[int]] = {}
    for cluster_id, label_id in pairs.T:
        members.setdefault(int(cluster_id), []).append(int(label_id))

    table: Dict[int, StationInfo] = {}
    for inst in instances:
        infos = [ann.stations[label_id] for label_id in sorted(members[inst.id])]
        stations = sort_stations(s for info in infos for s in info.stations)
        primaries = frozenset(p for info in infos for p in info.primaries)
        lateralities = {info.laterality for info in infos}
        laterality = lateralities.pop() if len(lateralities) == 1 else 'unspecified'
        table[inst.id] = StationInfo(inst.id, stations, infos[0].primary, laterality, primaries)
        inst.stations = stations
        inst.primaries = primaries

    clustered_set = InstanceSet(instances, label_map, ann.labels.spacing, ann.labels.origin, connectivity)
    clustered = Annotation(clustered_set.to_grid(), table)
    merged = len(ann.stations) - len(instances)
    if merged:
        logger.info(f"Clustered {len(ann.stations)} annotated nodes into {len(instances)} instances")
    return clustered, clustered_set
