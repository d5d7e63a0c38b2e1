#!/usr/bin/env python3
"""
Synthetic Chest Phantoms
Generates CT volumes with air, an elliptic-cylinder body, two lungs and
ellipsoidal lymph nodes, the matching annotation, degraded probability maps and
whole patient cohorts with a manifest. Also holds the brute-force metrics oracle
used to cross-check the evaluation suite; the oracle deliberately works on plain
voxel sets with a flood fill.
"""

import logging
import os
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage

from errors import InvalidArgumentError, SpecError
from evalkit import PatientMetrics
from volio import (
    Annotation, StationInfo, STATION_CODES, SCHEMA_VERSIONS,
    read_json, write_annotation, write_json, write_volume,
)
from voxelgrid import VoxelGrid, KIND_BINARY, KIND_CT, KIND_LABEL, KIND_PROBABILITY

logger = logging.getLogger(__name__)

AIR_HU = -1000
LUNG_HU = -800
BODY_HU = 30
NODE_HU = 40

Voxel = Tuple[int, int, int]


@dataclass
class EllipsoidSpec:
    center_mm: Tuple[float, float, float]
    semi_axes_mm: Tuple[float, float, float]
    hu: float = LUNG_HU


@dataclass
class NodeSpec:
    label: int
    center_mm: Tuple[float, float, float]
    semi_axes_mm: Tuple[float, float, float]
    stations: Tuple[str, ...] = ('4',)
    primary: Optional[str] = None
    laterality: str = 'unspecified'
    hu: float = NODE_HU


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    body_hu: float = BODY_HU
    body_semi_axes_mm: Optional[Tuple[float, float]] = None
    lungs: List[EllipsoidSpec] = field(default_factory=list)
    nodes: List[NodeSpec] = field(default_factory=list)
    seed: int = 0
    noise_sigma: float = 10.0

    def extent_mm(self) -> Tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def body_axes(self) -> Tuple[float, float]:
        if self.body_semi_axes_mm is not None:
            return tuple(self.body_semi_axes_mm)
        ex, ey, _ = self.extent_mm()
        return 0.45 * ex, 0.40 * ey

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['schema'] = 'phantom/1'
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PhantomSpec':
        try:
            return cls(
                dims=tuple(int(d) for d in data['dims']),
                spacing=tuple(float(s) for s in data.get('spacing', (1.0, 1.0, 1.0))),
                body_hu=float(data.get('body_hu', BODY_HU)),
                body_semi_axes_mm=(tuple(data['body_semi_axes_mm'])
                                   if data.get('body_semi_axes_mm') is not None else None),
                lungs=[EllipsoidSpec(tuple(l['center_mm']), tuple(l['semi_axes_mm']), float(l.get('hu', LUNG_HU)))
                       for l in data.get('lungs', [])],
                nodes=[NodeSpec(int(n['label']), tuple(n['center_mm']), tuple(n['semi_axes_mm']),
                                tuple(str(s) for s in n.get('stations', ('4',))), n.get('primary'),
                                n.get('laterality', 'unspecified'), float(n.get('hu', NODE_HU)))
                       for n in data.get('nodes', [])],
                seed=int(data.get('seed', 0)),
                noise_sigma=float(data.get('noise_sigma', 10.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SpecError(f"malformed phantom spec: {e}") from e


def load_spec(path: str) -> PhantomSpec:
    return PhantomSpec.from_dict(read_json(path))


def _centres_mm(spec: PhantomSpec):
    return np.ogrid[tuple(slice(0, d) for d in spec.dims)], spec.spacing


def ellipsoid_mask(spec: PhantomSpec, center_mm, semi_axes_mm) -> np.ndarray:
    """Voxels whose centres fall inside the ellipsoid"""
    if any(a <= 0 for a in semi_axes_mm):
        raise SpecError(f"ellipsoid semi-axes must be positive, got {tuple(semi_axes_mm)}")
    grids, spacing = _centres_mm(spec)
    total = 0.0
    for g, s, c, a in zip(grids, spacing, center_mm, semi_axes_mm):
        total = total + ((g * s - c) / a) ** 2
    return total <= 1.0


def body_mask(spec: PhantomSpec) -> np.ndarray:
    ex, ey, _ = spec.extent_mm()
    ax, ay = spec.body_axes()
    (gx, gy, _), spacing = _centres_mm(spec)
    inside = ((gx * spacing[0] - ex / 2) / ax) ** 2 + ((gy * spacing[1] - ey / 2) / ay) ** 2 <= 1.0
    return np.broadcast_to(inside, spec.dims)


def _validate(spec: PhantomSpec) -> None:
    if len(spec.dims) != 3 or any(d < 1 for d in spec.dims):
        raise SpecError(f"phantom dims must be 3 positive ints, got {spec.dims}")
    if any(s <= 0 for s in spec.spacing):
        raise SpecError(f"phantom spacing must be positive, got {spec.spacing}")
    if spec.noise_sigma < 0:
        raise SpecError("noise sigma must be non-negative")
    ex, ey, _ = spec.extent_mm()
    ax, ay = spec.body_axes()
    for node in spec.nodes:
        if node.label <= 0:
            raise SpecError(f"node label must be positive, got {node.label}")
        cx, cy, cz = node.center_mm
        if ((cx - ex / 2) / ax) ** 2 + ((cy - ey / 2) / ay) ** 2 > 1.0:
            raise SpecError(f"node {node.label} centre {node.center_mm} lies outside the body")


def lung_mask_of(spec: PhantomSpec) -> VoxelGrid:
    mask = np.zeros(spec.dims, dtype=bool)
    for lung in spec.lungs:
        mask |= ellipsoid_mask(spec, lung.center_mm, lung.semi_axes_mm)
    return VoxelGrid(mask.astype(np.uint8), spacing=spec.spacing, kind=KIND_BINARY)


def generate_phantom(spec: PhantomSpec) -> Tuple[VoxelGrid, Annotation]:
    """Rasterize the spec into a noisy CT and its node annotation"""
    _validate(spec)
    hu = np.full(spec.dims, float(AIR_HU), dtype=np.float64)
    hu[body_mask(spec)] = spec.body_hu
    for lung in spec.lungs:
        hu[ellipsoid_mask(spec, lung.center_mm, lung.semi_axes_mm)] = lung.hu

    labels = np.zeros(spec.dims, dtype=np.uint16)
    entries: Dict[int, List[NodeSpec]] = {}
    for node in spec.nodes:
        mask = ellipsoid_mask(spec, node.center_mm, node.semi_axes_mm)
        if node.label in entries and np.any(labels[mask] == node.label):
            raise SpecError(f"overlapping nodes share label {node.label}")
        hu[mask] = node.hu
        labels[mask] = node.label
        entries.setdefault(node.label, []).append(node)

    present = set(int(v) for v in np.unique(labels)) - {0}
    hidden = sorted(set(entries) - present)
    if hidden:
        raise SpecError(f"nodes {hidden} are empty or fully covered by other nodes")

    stations = {}
    for label, nodes in entries.items():
        codes = tuple(s for n in nodes for s in n.stations)
        primary = nodes[0].primary or nodes[0].stations[0]
        try:
            stations[label] = StationInfo(label, codes, primary, nodes[0].laterality)
        except InvalidArgumentError as e:
            raise SpecError(str(e)) from e

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        hu += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    ct = VoxelGrid(np.clip(np.rint(hu), -32768, 32767).astype(np.int16), spacing=spec.spacing, kind=KIND_CT)
    ann = Annotation(VoxelGrid(labels, spacing=spec.spacing, kind=KIND_LABEL), stations)
    return ct, ann


def random_spec(seed: int, dims: Tuple[int, int, int] = (64, 64, 48),
                spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0), n_nodes: int = 5,
                radius_range_mm: Tuple[float, float] = (3.0, 7.0), gap_mm: float = 3.0,
                noise_sigma: float = 10.0, max_attempts: int = 2000) -> PhantomSpec:
    """Two lungs and n_nodes separated ellipsoidal nodes at random places inside the body"""
    rng = np.random.default_rng(seed)
    spec = PhantomSpec(dims=tuple(dims), spacing=tuple(spacing), seed=seed, noise_sigma=noise_sigma)
    ex, ey, ez = spec.extent_mm()
    spec.lungs = [
        EllipsoidSpec((0.28 * ex, 0.5 * ey, 0.5 * ez), (0.12 * ex, 0.22 * ey, 0.4 * ez)),
        EllipsoidSpec((0.72 * ex, 0.5 * ey, 0.5 * ez), (0.12 * ex, 0.22 * ey, 0.4 * ez)),
    ]
    codes = [c for c in STATION_CODES]

    placed: List[Tuple[np.ndarray, float]] = []
    attempts = 0
    while len(spec.nodes) < n_nodes:
        attempts += 1
        if attempts > max_attempts:
            raise SpecError(f"could not place {n_nodes} separated nodes in {dims}")
        axes = rng.uniform(*radius_range_mm, size=3)
        reach = float(axes.max())
        centre = np.array([rng.uniform(0.3 * ex, 0.7 * ex), rng.uniform(0.3 * ey, 0.7 * ey),
                           rng.uniform(reach + 1.0, ez - reach - 1.0)])
        if any(np.linalg.norm(centre - c) < reach + r + gap_mm for c, r in placed):
            continue
        placed.append((centre, reach))
        primary = str(rng.choice(codes))
        stations = [primary]
        if primary != 'NA' and rng.random() < 0.4:
            stations.append(str(rng.choice([c for c in codes if c not in (primary, 'NA')])))
        spec.nodes.append(NodeSpec(len(spec.nodes) + 1, tuple(float(v) for v in centre),
                                   tuple(float(v) for v in axes), tuple(stations), primary,
                                   str(rng.choice(['left', 'right', 'unspecified']))))
    return spec


@dataclass
class ProbabilityQuality:
    """Degradations applied when turning an annotation into a probability map"""
    drop_ids: Tuple[int, ...] = ()
    boundary_erosion_voxels: int = 0
    fp_blobs: int = 0
    fp_radius_voxels: int = 2
    fp_gap_voxels: int = 2
    blur_sigma: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'ProbabilityQuality':
        data = dict(data or {})
        if 'drop_ids' in data:
            data['drop_ids'] = tuple(int(i) for i in data['drop_ids'])
        try:
            return cls(**data)
        except TypeError as e:
            raise SpecError(f"malformed probability quality: {e}") from e


def synth_probability(ann: Annotation, quality: ProbabilityQuality = ProbabilityQuality()) -> VoxelGrid:
    """Probability 1 on kept nodes plus disjoint false-positive blobs, optionally blurred"""
    labels = ann.labels.values
    keep = (labels != 0) & ~np.isin(labels, list(quality.drop_ids))
    if quality.boundary_erosion_voxels > 0:
        keep = ndimage.binary_erosion(keep, iterations=quality.boundary_erosion_voxels)

    full = ndimage.generate_binary_structure(3, 3)
    occupied = labels != 0
    blobs = np.zeros(labels.shape, dtype=bool)
    r = quality.fp_radius_voxels
    rng = np.random.default_rng(quality.seed)
    offsets = np.ogrid[-r:r + 1, -r:r + 1, -r:r + 1]
    ball = sum(o ** 2 for o in offsets) <= r * r

    for _ in range(quality.fp_blobs):
        forbidden = ndimage.binary_dilation(occupied | blobs, structure=full, iterations=quality.fp_gap_voxels)
        for _attempt in range(500):
            corner = [int(rng.integers(0, max(1, d - 2 * r - 1))) for d in labels.shape]
            region = tuple(slice(c, c + 2 * r + 1) for c in corner)
            if forbidden[region].shape != ball.shape or np.any(forbidden[region] & ball):
                continue
            blobs[region] |= ball
            break
        else:
            raise SpecError(f"no room left for false-positive blob {_ + 1}")

    values = (keep | blobs).astype(np.float32)
    if quality.blur_sigma > 0:
        values = ndimage.gaussian_filter(values, sigma=quality.blur_sigma)
    return VoxelGrid(np.clip(values, 0.0, 1.0), spacing=ann.labels.spacing,
                     origin=ann.labels.origin, kind=KIND_PROBABILITY)


def write_phantom(spec: PhantomSpec, out_dir: str) -> Dict[str, str]:
    """ct.nii.gz, labels.nii.gz, stations.json and lung_mask.nii.gz for one spec"""
    os.makedirs(out_dir, exist_ok=True)
    ct, ann = generate_phantom(spec)
    paths = {
        'ct': os.path.join(out_dir, 'ct.nii.gz'),
        'gt_labels': os.path.join(out_dir, 'labels.nii.gz'),
        'gt_stations': os.path.join(out_dir, 'stations.json'),
        'lung_mask': os.path.join(out_dir, 'lung_mask.nii.gz'),
    }
    write_volume(ct, paths['ct'])
    write_annotation(ann, paths['gt_labels'], paths['gt_stations'])
    write_volume(lung_mask_of(spec), paths['lung_mask'])
    return paths


def make_cohort(out_dir: str, n_patients: int = 10, seed: int = 0, n_nodes: int = 5,
                configs: Optional[Dict[str, ProbabilityQuality]] = None,
                dims: Tuple[int, int, int] = (64, 64, 48),
                spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
                ensembles: Optional[Dict[str, List[str]]] = None,
                benchmark: Sequence[str] = ()) -> str:
    """Write a phantom cohort with one probability map per configuration; returns the manifest path"""
    if n_patients < 1:
        raise InvalidArgumentError("cohort needs at least one patient")
    configs = configs or {'perfect': ProbabilityQuality()}
    manifest: Dict[str, Any] = {'schema': f"manifest/{SCHEMA_VERSIONS['manifest']}", 'patients': {},
                                'ensembles': dict(ensembles or {})}
    for index in range(n_patients):
        patient_id = f"P{index + 1:03d}"
        patient_dir = os.path.join(out_dir, patient_id)
        spec = random_spec(seed * 1000 + index, dims=dims, spacing=spacing, n_nodes=n_nodes)
        paths = write_phantom(spec, patient_dir)
        _, ann = generate_phantom(spec)
        prob_maps = {}
        for name, quality in configs.items():
            path = os.path.join(patient_dir, f"prob_{name}.nii.gz")
            write_volume(synth_probability(ann, quality), path)
            prob_maps[name] = os.path.relpath(path, out_dir)
        entry = {role: os.path.relpath(path, out_dir) for role, path in paths.items()}
        entry['prob_maps'] = prob_maps
        entry['benchmark'] = patient_id in benchmark
        manifest['patients'][patient_id] = entry
        logger.info(f"Generated phantom {patient_id} ({len(spec.nodes)} nodes)")

    manifest_path = os.path.join(out_dir, 'manifest.json')
    write_json(manifest, manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

def _neighbour_offsets(connectivity: int) -> List[Voxel]:
    limit = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if limit is None:
        raise InvalidArgumentError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return [(dx, dy, dz)
            for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
            if 0 < abs(dx) + abs(dy) + abs(dz) <= limit]


def oracle_components(voxels: Set[Voxel], dims: Tuple[int, int, int], connectivity: int) -> List[Set[Voxel]]:
    """Flood-fill components, ordered by their lowest x-fastest linear index"""
    offsets = _neighbour_offsets(connectivity)
    nx, ny, _ = dims
    unvisited = set(voxels)
    components = []
    while unvisited:
        seed = unvisited.pop()
        component = {seed}
        queue = deque([seed])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offsets:
                neighbour = (x + dx, y + dy, z + dz)
                if neighbour in unvisited:
                    unvisited.remove(neighbour)
                    component.add(neighbour)
                    queue.append(neighbour)
        components.append(component)
    components.sort(key=lambda c: min(x + nx * (y + ny * z) for x, y, z in c))
    return components


def _voxel_set(mask: np.ndarray) -> Set[Voxel]:
    return {(int(x), int(y), int(z)) for x, y, z in np.argwhere(mask)}


def oracle_metrics(prob: VoxelGrid, ann: Annotation, pt: float, connectivity: int = 26,
                   min_pair_dice: float = 0.0, min_fp_voxels: int = 0,
                   patient_id: str = '') -> PatientMetrics:
    """Every per-patient metric recomputed from voxel sets"""
    dims = ann.labels.dims
    predicted = _voxel_set(prob.values >= pt)
    truth = _voxel_set(ann.labels.values != 0)
    dets = oracle_components(predicted, dims, connectivity)
    gts = oracle_components(truth, dims, connectivity)

    candidates = []
    for gi, g in enumerate(gts, start=1):
        for di, d in enumerate(dets, start=1):
            shared = len(g & d)
            if shared == 0:
                continue
            pair_dice = 2.0 * shared / (len(g) + len(d))
            if pair_dice > min_pair_dice:
                candidates.append((pair_dice, gi, di))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    matched_g, matched_d, pair_dices = set(), set(), []
    for pair_dice, gi, di in candidates:
        if gi not in matched_g and di not in matched_d:
            matched_g.add(gi)
            matched_d.add(di)
            pair_dices.append(pair_dice)

    union = len(predicted) + len(truth)
    fp = sum(1 for di, d in enumerate(dets, start=1) if di not in matched_d and len(d) > min_fp_voxels)
    return PatientMetrics(
        patient_id=patient_id,
        pt=pt,
        dice_patient=1.0 if union == 0 else 2.0 * len(predicted & truth) / union,
        dice_tp=sum(pair_dices) / len(pair_dices) if pair_dices else float('nan'),
        gt_perc=(sum(100.0 * len(g & predicted) / len(g) for g in gts) / len(gts)
                 if gts else float('nan')),
        tp=len(pair_dices),
        fn=len(gts) - len(pair_dices),
        fp=fp,
    )
