#!/usr/bin/env python3
"""
Volume and metadata I/O
NIfTI-1 volumes through nibabel, station sidecars, geometry records and the
machine-readable evaluation reports. Every file is written to a temporary
sibling first and renamed into place.
"""

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple

import nibabel as nib
import numpy as np
import pandas as pd

from errors import (
    ConsistencyError, InvalidArgumentError, UnsupportedFormatError, VolumeFormatError,
)
from voxelgrid import (
    GeometryRecord, VoxelGrid, KIND_BINARY, KIND_CT, KIND_LABEL, KIND_PROBABILITY, KINDS,
)

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = '1.0.0'
SCHEMA_VERSIONS = {
    'volume': 1,
    'stations': 1,
    'geometry': 1,
    'report': 1,
    'instances': 1,
    'manifest': 1,
}

STATION_CODES = ('1', '2', '3a', '3p', '4', '5', '6', '7', '8', '9', '10', '11', '12', '13', '14', 'NA')
STATION_ORDER = {code: i for i, code in enumerate(STATION_CODES)}
LATERALITIES = ('left', 'right', 'unspecified')

REPORT_COLUMNS = ['patient_id', 'stratum', 'PT', 'dice', 'dice_tp', 'gt_perc',
                  'recall_num', 'recall_den', 'fppp']

VOLUME_EXTENSIONS = ('.nii.gz', '.nii')

# dtype read from file -> kind assumed when no kind tag is present
_DTYPE_KINDS = {
    np.dtype(np.int16): KIND_CT,
    np.dtype(np.float32): KIND_PROBABILITY,
    np.dtype(np.uint8): KIND_BINARY,
    np.dtype(np.uint16): KIND_LABEL,
}


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def _jsonable(value: Any) -> Any:
    """Plain-JSON view of nested data; NaN and infinities become null"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return [_jsonable(v) for v in sorted(value, key=str)]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _atomic_target(path: str) -> Tuple[int, str]:
    directory = os.path.dirname(os.path.abspath(path))
    base = os.path.basename(path)
    suffix = next((ext for ext in VOLUME_EXTENSIONS if base.endswith(ext)), os.path.splitext(base)[1])
    return tempfile.mkstemp(prefix=f".{base}.", suffix=suffix, dir=directory)


def _write_text_atomic(path: str, text: str) -> None:
    fd, tmp_path = _atomic_target(path)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def json_text(data: Any) -> str:
    """Deterministic JSON: sorted keys, two-space indent, trailing newline"""
    return json.dumps(_jsonable(data), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + '\n'


def write_json(data: Any, path: str) -> None:
    _write_text_atomic(path, json_text(data))


def read_json(path: str) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise VolumeFormatError(f"{path}: invalid JSON ({e})") from e


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

def _require_volume_path(path: str) -> None:
    if not str(path).endswith(VOLUME_EXTENSIONS):
        raise UnsupportedFormatError(f"{path}: expected a .nii or .nii.gz file")


def _read_kind_tag(header) -> Optional[str]:
    try:
        raw = np.asarray(header['descrip']).item()
    except (KeyError, ValueError):
        return None
    text = raw.decode('latin-1', errors='ignore') if isinstance(raw, bytes) else str(raw)
    for token in text.split(';'):
        key, _, value = token.strip().partition('=')
        if key == 'kind' and value in KINDS:
            return value
    return None


def read_volume(path: str, kind: Optional[str] = None) -> VoxelGrid:
    """Load a NIfTI-1 volume as a VoxelGrid.

    The kind comes from the argument, else the tag written by write_volume,
    else the stored dtype. Nothing is returned for a file that fails to load
    completely.
    """
    _require_volume_path(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"volume not found: {path}")

    try:
        img = nib.load(path)
        if not isinstance(img, nib.Nifti1Image):
            raise UnsupportedFormatError(f"{path}: not a NIfTI-1 image")
        header = img.header
        dtype = np.dtype(header.get_data_dtype())
        if dtype.newbyteorder('=') not in _DTYPE_KINDS:
            raise UnsupportedFormatError(f"{path}: unsupported voxel dtype {dtype}")
        affine = np.asarray(img.affine, dtype=np.float64)
        linear = affine[:3, :3]
        if np.any(np.abs(linear - np.diag(np.diag(linear))) > 1e-6):
            raise UnsupportedFormatError(f"{path}: affine has rotation or shear")
        data = np.asanyarray(img.dataobj)
    except UnsupportedFormatError:
        raise
    except Exception as e:
        raise VolumeFormatError(f"{path}: cannot read volume ({e})") from e

    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise UnsupportedFormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
    data = data.astype(dtype.newbyteorder('='), copy=False)

    spacing = tuple(float(abs(v)) for v in np.diag(linear))
    origin = tuple(float(v) for v in affine[:3, 3])
    resolved = kind or _read_kind_tag(header) or _DTYPE_KINDS[data.dtype]
    logger.debug(f"Read {path}: dims={data.shape} spacing={spacing} kind={resolved}")
    try:
        return VoxelGrid(np.ascontiguousarray(data), spacing=spacing, origin=origin, kind=resolved)
    except InvalidArgumentError as e:
        raise VolumeFormatError(f"{path}: {e}") from e


def write_volume(grid: VoxelGrid, path: str) -> None:
    """Lossless NIfTI-1 write; the kind is tagged in the header description"""
    _require_volume_path(path)
    affine = np.diag([*grid.spacing, 1.0])
    affine[:3, 3] = grid.origin

    img = nib.Nifti1Image(grid.values, affine)
    img.header.set_data_dtype(grid.values.dtype)
    img.header.set_xyzt_units('mm')
    img.header['descrip'] = f"kind={grid.kind};schema=volume/{SCHEMA_VERSIONS['volume']}".encode('ascii')

    fd, tmp_path = _atomic_target(path)
    os.close(fd)
    try:
        nib.save(img, tmp_path)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.debug(f"Wrote {path}: dims={grid.dims} kind={grid.kind}")


# ---------------------------------------------------------------------------
# Station metadata
# ---------------------------------------------------------------------------

def normalize_station(code: Any) -> str:
    """Canonical station code string ('4', '3a', 'NA')"""
    text = str(code).strip()
    if text.upper() in ('NA', 'N/A', 'NONE', ''):
        text = 'NA'
    else:
        text = text.lower()
    if text not in STATION_ORDER:
        raise InvalidArgumentError(f"unknown station code '{code}'")
    return text


def sort_stations(codes: Iterable[str]) -> Tuple[str, ...]:
    return tuple(sorted(set(codes), key=STATION_ORDER.__getitem__))


@dataclass(frozen=True)
class StationInfo:
    """Station assignment of one annotated node (or cluster of nodes)"""
    label_id: int
    stations: Tuple[str, ...]
    primary: str
    laterality: str = 'unspecified'
    primaries: FrozenSet[str] = frozenset()
    short_axis_mm: Optional[float] = None

    def __post_init__(self):
        if int(self.label_id) <= 0:
            raise InvalidArgumentError(f"label id must be positive, got {self.label_id}")
        stations = sort_stations(normalize_station(s) for s in self.stations)
        if not stations:
            raise InvalidArgumentError(f"label {self.label_id}: empty station set")
        primary = normalize_station(self.primary)
        if primary not in stations:
            raise InvalidArgumentError(
                f"label {self.label_id}: primary station {primary} not among {list(stations)}")
        if self.laterality not in LATERALITIES:
            raise InvalidArgumentError(f"label {self.label_id}: unknown laterality '{self.laterality}'")
        primaries = frozenset(normalize_station(p) for p in self.primaries) or frozenset([primary])
        if not primaries <= set(stations):
            raise InvalidArgumentError(f"label {self.label_id}: primaries outside station set")
        if self.short_axis_mm is not None and not self.short_axis_mm >= 0:
            raise InvalidArgumentError(f"label {self.label_id}: negative short axis")
        object.__setattr__(self, 'label_id', int(self.label_id))
        object.__setattr__(self, 'stations', stations)
        object.__setattr__(self, 'primary', primary)
        object.__setattr__(self, 'primaries', primaries)

    def to_dict(self) -> Dict[str, Any]:
        entry = {'id': self.label_id, 'stations': list(self.stations),
                 'primary': self.primary, 'laterality': self.laterality}
        if self.primaries != frozenset([self.primary]):
            entry['primaries'] = list(sort_stations(self.primaries))
        if self.short_axis_mm is not None:
            entry['short_axis_mm'] = self.short_axis_mm
        return entry

    @classmethod
    def from_dict(cls, entry: Dict[str, Any]) -> 'StationInfo':
        return cls(label_id=int(entry['id']),
                   stations=tuple(entry['stations']),
                   primary=entry['primary'],
                   laterality=entry.get('laterality', 'unspecified'),
                   primaries=frozenset(entry.get('primaries', ())),
                   short_axis_mm=entry.get('short_axis_mm'))


@dataclass
class Annotation:
    """Label grid plus the station table of its labels"""
    labels: VoxelGrid
    stations: Dict[int, StationInfo] = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.kind != KIND_LABEL:
            self.labels = self.labels.with_values(self.labels.values, kind=KIND_LABEL)

    def label_ids(self) -> List[int]:
        ids = np.unique(self.labels.values)
        return [int(i) for i in ids if i != 0]

    def validate(self) -> None:
        """Enforce the bijection between grid labels and table entries"""
        present = set(self.label_ids())
        listed = set(self.stations)
        missing = present - listed
        if missing:
            raise ConsistencyError("labels without station entry", missing)
        unused = listed - present
        if unused:
            raise ConsistencyError("station entries without voxels", unused)

    def sidecar(self) -> Dict[str, Any]:
        return {'schema': f"stations/{SCHEMA_VERSIONS['stations']}",
                'labels': [self.stations[i].to_dict() for i in sorted(self.stations)]}


def parse_stations(data: Any, source: str = "station sidecar") -> Dict[int, StationInfo]:
    if not isinstance(data, dict) or not isinstance(data.get('labels'), list):
        raise VolumeFormatError(f"{source}: expected an object with a 'labels' list")
    table: Dict[int, StationInfo] = {}
    for entry in data['labels']:
        try:
            info = StationInfo.from_dict(entry)
        except (KeyError, TypeError) as e:
            raise VolumeFormatError(f"{source}: malformed label entry {entry!r}") from e
        if info.label_id in table:
            raise ConsistencyError("duplicate station entries", [info.label_id])
        table[info.label_id] = info
    return table


def read_stations(meta_path: str) -> Dict[int, StationInfo]:
    return parse_stations(read_json(meta_path), meta_path)


def read_annotation(label_path: str, meta_path: str) -> Annotation:
    grid = read_volume(label_path, kind=KIND_LABEL)
    annotation = Annotation(grid, read_stations(meta_path))
    annotation.validate()
    logger.debug(f"Read annotation {label_path}: {len(annotation.stations)} labels")
    return annotation


def write_annotation(annotation: Annotation, label_path: str, meta_path: str) -> None:
    annotation.validate()
    write_volume(annotation.labels, label_path)
    write_json(annotation.sidecar(), meta_path)


# ---------------------------------------------------------------------------
# Geometry, instances and reports
# ---------------------------------------------------------------------------

def write_geometry(record: GeometryRecord, path: str) -> None:
    data = record.to_dict()
    data['schema'] = f"geometry/{SCHEMA_VERSIONS['geometry']}"
    write_json(data, path)


def read_geometry(path: str) -> GeometryRecord:
    try:
        return GeometryRecord.from_dict(read_json(path))
    except InvalidArgumentError as e:
        raise VolumeFormatError(f"{path}: {e}") from e


def write_instances(instance_set, path: str, pt: Optional[float] = None) -> None:
    data = instance_set.to_dict()
    if pt is not None:
        data['pt'] = pt
    data['schema'] = f"instances/{SCHEMA_VERSIONS['instances']}"
    write_json(data, path)


def report_frame(report) -> pd.DataFrame:
    """One row per patient x stratum, in the fixed report column order"""
    rows = list(report.csv_rows())
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    for column in ('PT', 'dice', 'dice_tp', 'gt_perc', 'fppp'):
        frame[column] = pd.to_numeric(frame[column], errors='coerce').astype('float64')
    for column in ('recall_num', 'recall_den'):
        frame[column] = frame[column].astype('Int64')
    return frame


def write_report(report, path: str, fmt: str = 'json') -> None:
    """Write an EvalReport as nested JSON or flat CSV; identical input gives identical bytes"""
    if fmt == 'json':
        data = report.to_dict()
        data['schema'] = f"report/{SCHEMA_VERSIONS['report']}"
        data['toolkit_version'] = TOOLKIT_VERSION
        write_json(data, path)
    elif fmt == 'csv':
        text = report_frame(report).to_csv(index=False, lineterminator='\n',
                                           float_format='%.10g', na_rep='')
        _write_text_atomic(path, text)
    else:
        raise InvalidArgumentError(f"unknown report format '{fmt}', expected json or csv")
    logger.info(f"Report written to {path}")
