#!/usr/bin/env python3
"""
Evaluation Suite
Threshold sweeps, greedy Dice pairing of detections with ground-truth clusters,
per-patient metrics, cohort aggregation and size/station stratification.

Conventions: Dice of two empty masks is 1.0; patients without ground truth
are left out of the patient-wise recall but still count towards FPPP.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import InvalidArgumentError
from instancer import SIZE_BANDS, SIZE_CATEGORIES, InstanceSet, extract_instances, size_category
from volio import STATION_CODES, StationInfo, sort_stations
from voxelgrid import VoxelGrid

logger = logging.getLogger(__name__)

PT_LATTICE = tuple(round(0.1 * i, 1) for i in range(1, 11))

STATION_GROUPS = ('all', 'relevant')
IRRELEVANT_STATIONS = frozenset(['1', 'NA'])
STRATIFY_AXES = ('size_category', 'primary_station', 'station_group')
REPORT_STRATA = tuple(f"{band}:{group}" for band in SIZE_BANDS for group in STATION_GROUPS)

GRADE_PERFECT = 'perfect'
GRADE_GOOD = 'good'
GRADE_BAD = 'bad'

OUTCOME_COLUMNS = ['patient_id', 'gt_id', 'short_axis_mm', 'size_category', 'volume_ml',
                   'stations', 'primaries', 'relevant', 'detected', 'pair_dice', 'covered_perc']


def _nan_to_none(value: Any) -> Any:
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def fmt_mean_std(mean: float, std: float, scale: float = 100.0) -> str:
    """'64.00±10.20' style cell; undefined values print as n/a"""
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return 'n/a'
    return f"{mean * scale:.2f}±{std * scale:.2f}"


def _mask_of(x) -> Tuple[np.ndarray, Optional[Tuple]]:
    if isinstance(x, VoxelGrid):
        return x.values != 0, x.spacing
    if isinstance(x, InstanceSet):
        return x.foreground(), x.spacing
    return np.asarray(x) != 0, None


def dice(a, b) -> float:
    """2|A∩B| / (|A| + |B|); 1.0 when both are empty"""
    mask_a, spacing_a = _mask_of(a)
    mask_b, spacing_b = _mask_of(b)
    if mask_a.shape != mask_b.shape:
        raise InvalidArgumentError(f"dice inputs differ in dims: {mask_a.shape} vs {mask_b.shape}")
    if spacing_a is not None and spacing_b is not None and not np.allclose(spacing_a, spacing_b):
        raise InvalidArgumentError(f"dice inputs differ in spacing: {spacing_a} vs {spacing_b}")
    size = int(mask_a.sum()) + int(mask_b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(mask_a & mask_b)) / size


# ---------------------------------------------------------------------------
# Threshold sweep
# ---------------------------------------------------------------------------

@dataclass
class ThresholdCurve:
    patient_id: str
    thresholds: Tuple[float, ...]
    dices: Tuple[float, ...]
    foreground: Tuple[int, ...]

    @property
    def best_pt(self) -> float:
        return self.thresholds[int(np.argmax(self.dices))]


def sweep_thresholds(prob: VoxelGrid, gt_binary, thresholds: Sequence[float] = PT_LATTICE,
                     patient_id: str = '') -> ThresholdCurve:
    """Patient Dice at every lattice threshold"""
    gt, _ = _mask_of(gt_binary)
    if gt.shape != prob.values.shape:
        raise InvalidArgumentError(f"probability {prob.dims} and ground truth {gt.shape} are not aligned")
    gt_count = int(gt.sum())
    dices, counts = [], []
    for pt in thresholds:
        pred = prob.values >= pt
        pred_count = int(pred.sum())
        total = pred_count + gt_count
        dices.append(1.0 if total == 0 else 2.0 * int(np.count_nonzero(pred & gt)) / total)
        counts.append(pred_count)
    return ThresholdCurve(patient_id, tuple(thresholds), tuple(dices), tuple(counts))


def select_best_threshold(curves: Sequence[ThresholdCurve]) -> float:
    """Threshold maximizing the cohort-mean patient Dice; ties go to the lower threshold"""
    if not curves:
        raise InvalidArgumentError("cannot select a threshold from an empty cohort")
    lattice = curves[0].thresholds
    if any(c.thresholds != lattice for c in curves):
        raise InvalidArgumentError("threshold curves use different lattices")
    means = np.mean(np.array([c.dices for c in curves]), axis=0)
    return lattice[int(np.argmax(means))]


# ---------------------------------------------------------------------------
# Pairing and per-patient metrics
# ---------------------------------------------------------------------------

@dataclass
class PairingResult:
    pairs: List[Tuple[int, int, float]]
    unmatched_gt: List[int]
    unmatched_det: List[int]

    def pair_dice_by_gt(self) -> Dict[int, float]:
        return {gid: d for gid, _, d in self.pairs}


def overlap_counts(dets: InstanceSet, gts: InstanceSet) -> Dict[Tuple[int, int], int]:
    """Voxel overlap for every (gt id, det id) pair that shares at least one voxel"""
    if dets.dims != gts.dims:
        raise InvalidArgumentError(f"detections {dets.dims} and ground truth {gts.dims} are not aligned")
    both = (gts.label_map != 0) & (dets.label_map != 0)
    g = gts.label_map[both].astype(np.int64)
    d = dets.label_map[both].astype(np.int64)
    base = int(d.max()) + 1 if d.size else 1
    keys, counts = np.unique(g * base + d, return_counts=True)
    return {(int(k // base), int(k % base)): int(c) for k, c in zip(keys, counts)}


def pair_instances(dets: InstanceSet, gts: InstanceSet, min_pair_dice: float = 0.0) -> PairingResult:
    """Greedy one-to-one pairing by descending instance Dice"""
    gt_sizes = gts.voxel_counts()
    det_sizes = dets.voxel_counts()
    candidates = []
    for (gid, did), inter in overlap_counts(dets, gts).items():
        pair_dice = 2.0 * inter / (int(gt_sizes[gid]) + int(det_sizes[did]))
        if pair_dice > min_pair_dice:
            candidates.append((-pair_dice, gid, did))
    candidates.sort()

    used_gt, used_det, pairs = set(), set(), []
    for neg_dice, gid, did in candidates:
        if gid in used_gt or did in used_det:
            continue
        used_gt.add(gid)
        used_det.add(did)
        pairs.append((gid, did, -neg_dice))

    return PairingResult(pairs,
                         [i for i in gts.ids() if i not in used_gt],
                         [i for i in dets.ids() if i not in used_det])


@dataclass
class PatientMetrics:
    patient_id: str
    pt: float
    dice_patient: float
    dice_tp: float
    gt_perc: float
    tp: int
    fn: int
    fp: int

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else float('nan')

    def to_dict(self) -> Dict[str, Any]:
        data = {k: _nan_to_none(v) for k, v in asdict(self).items()}
        data['n_gt'] = self.n_gt
        return data


def gt_coverage_perc(dets: InstanceSet, gts: InstanceSet) -> Dict[int, float]:
    """Percentage of each GT instance covered by any detection voxel"""
    covered = np.bincount(gts.label_map[dets.foreground()].ravel(), minlength=max(gts.ids(), default=0) + 1)
    sizes = gts.voxel_counts()
    return {gid: 100.0 * int(covered[gid]) / int(sizes[gid]) for gid in gts.ids()}


def patient_metrics(pairing: PairingResult, dets: InstanceSet, gts: InstanceSet,
                    prob: Optional[VoxelGrid] = None, pt: float = 0.5, patient_id: str = '',
                    min_fp_voxels: int = 0) -> PatientMetrics:
    """Dice, Dice-TP, GT-Perc and detection counts for one patient"""
    if prob is not None and prob.dims != gts.dims:
        raise InvalidArgumentError(f"probability {prob.dims} and ground truth {gts.dims} are not aligned")
    coverage = gt_coverage_perc(dets, gts)
    det_sizes = dets.voxel_counts()
    fp = sum(1 for did in pairing.unmatched_det if int(det_sizes[did]) > min_fp_voxels)
    return PatientMetrics(
        patient_id=patient_id,
        pt=pt,
        dice_patient=dice(dets.foreground(), gts.foreground()),
        dice_tp=float(np.mean([d for _, _, d in pairing.pairs])) if pairing.pairs else float('nan'),
        gt_perc=float(np.mean(list(coverage.values()))) if coverage else float('nan'),
        tp=len(pairing.pairs),
        fn=len(pairing.unmatched_gt),
        fp=fp,
    )


@dataclass
class GTOutcome:
    """Detection outcome of one ground-truth cluster"""
    patient_id: str
    gt_id: int
    short_axis_mm: float
    size_category: str
    volume_ml: float
    stations: Tuple[str, ...]
    primaries: Tuple[str, ...]
    detected: bool
    pair_dice: float
    covered_perc: float

    @property
    def relevant(self) -> bool:
        return is_relevant(self.primaries)


def is_relevant(primaries: Iterable[str]) -> bool:
    """True when some primary station lies outside stations 1 and NA"""
    return any(p not in IRRELEVANT_STATIONS for p in primaries)


def gt_outcomes(pairing: PairingResult, dets: InstanceSet, gts: InstanceSet,
                patient_id: str = '') -> List[GTOutcome]:
    """Per-GT records; GT instances must carry short-axis measurements"""
    coverage = gt_coverage_perc(dets, gts)
    paired = pairing.pair_dice_by_gt()
    outcomes = []
    for inst in gts:
        if inst.short_axis_mm is None:
            raise InvalidArgumentError(f"GT instance {inst.id} has no short-axis measurement")
        primaries = sort_stations(inst.primaries) if inst.primaries else ('NA',)
        outcomes.append(GTOutcome(
            patient_id=patient_id,
            gt_id=inst.id,
            short_axis_mm=inst.short_axis_mm,
            size_category=size_category(inst.short_axis_mm),
            volume_ml=inst.volume_ml,
            stations=tuple(inst.stations) or ('NA',),
            primaries=primaries,
            detected=inst.id in paired,
            pair_dice=paired.get(inst.id, float('nan')),
            covered_perc=coverage[inst.id],
        ))
    return outcomes


def evaluate_patient(prob: VoxelGrid, gts: InstanceSet, pt: float, patient_id: str = '',
                     connectivity: int = 26, min_pair_dice: float = 0.0,
                     min_fp_voxels: int = 0) -> Tuple[PatientMetrics, List[GTOutcome]]:
    """Threshold, label, pair and measure one patient against its clustered ground truth"""
    dets = extract_instances(prob, pt, connectivity)
    pairing = pair_instances(dets, gts, min_pair_dice)
    metrics = patient_metrics(pairing, dets, gts, prob, pt, patient_id, min_fp_voxels)
    return metrics, gt_outcomes(pairing, dets, gts, patient_id)


# ---------------------------------------------------------------------------
# Cohort aggregation
# ---------------------------------------------------------------------------

def _mean_std(series: pd.Series) -> Tuple[float, float]:
    values = series.dropna().astype(float)
    if values.empty:
        return float('nan'), float('nan')
    return float(values.mean()), float(values.std(ddof=0))


@dataclass
class CohortMetrics:
    n_patients: int
    tp: int
    fn: int
    fp: int
    recall_global: float
    recall_pw_mean: float
    recall_pw_std: float
    fppp_mean: float
    fppp_std: float
    dice_mean: float
    dice_std: float
    dice_tp_mean: float
    dice_tp_std: float
    gt_perc_mean: float
    gt_perc_std: float

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn

    def to_dict(self) -> Dict[str, Any]:
        data = {k: _nan_to_none(v) for k, v in asdict(self).items()}
        data['n_gt'] = self.n_gt
        return data

    def table_row(self) -> Dict[str, Any]:
        """Display cells in percent (FPPP as a count)"""
        return {
            '#LN': self.n_gt,
            'Dice': fmt_mean_std(self.dice_mean, self.dice_std),
            'Dice-TP': fmt_mean_std(self.dice_tp_mean, self.dice_tp_std),
            'GT-Perc': fmt_mean_std(self.gt_perc_mean, self.gt_perc_std, scale=1.0),
            'Recall': 'n/a' if math.isnan(self.recall_global) else f"{self.recall_global * 100:.2f}",
            'Recall-PW': fmt_mean_std(self.recall_pw_mean, self.recall_pw_std),
            'FPPP': fmt_mean_std(self.fppp_mean, self.fppp_std, scale=1.0),
        }


def patients_frame(patients: Sequence[PatientMetrics]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(p) for p in patients],
                         columns=['patient_id', 'pt', 'dice_patient', 'dice_tp', 'gt_perc', 'tp', 'fn', 'fp'])
    frame['n_gt'] = frame['tp'] + frame['fn']
    return frame.sort_values('patient_id', kind='stable').reset_index(drop=True)


def aggregate(patients: Sequence[PatientMetrics]) -> CohortMetrics:
    """Pool counts and average per-patient rates (population std)"""
    if not patients:
        raise InvalidArgumentError("cannot aggregate an empty cohort")
    frame = patients_frame(patients)
    tp, fn, fp = int(frame['tp'].sum()), int(frame['fn'].sum()), int(frame['fp'].sum())
    with_gt = frame[frame['n_gt'] > 0]
    recall_pw = _mean_std(with_gt['tp'] / with_gt['n_gt'])
    fppp = _mean_std(frame['fp'])
    dice_all = _mean_std(frame['dice_patient'])
    dice_tp = _mean_std(frame['dice_tp'])
    gt_perc = _mean_std(frame['gt_perc'])
    return CohortMetrics(
        n_patients=len(frame), tp=tp, fn=fn, fp=fp,
        recall_global=tp / (tp + fn) if tp + fn else float('nan'),
        recall_pw_mean=recall_pw[0], recall_pw_std=recall_pw[1],
        fppp_mean=fppp[0], fppp_std=fppp[1],
        dice_mean=dice_all[0], dice_std=dice_all[1],
        dice_tp_mean=dice_tp[0], dice_tp_std=dice_tp[1],
        gt_perc_mean=gt_perc[0], gt_perc_std=gt_perc[1],
    )


# ---------------------------------------------------------------------------
# Stratification
# ---------------------------------------------------------------------------

def outcomes_frame(outcomes: Sequence[GTOutcome]) -> pd.DataFrame:
    rows = []
    for o in outcomes:
        row = asdict(o)
        row['relevant'] = o.relevant
        rows.append(row)
    frame = pd.DataFrame(rows, columns=OUTCOME_COLUMNS)
    for column in ('detected', 'relevant'):
        frame[column] = frame[column].astype(bool)
    for column in ('short_axis_mm', 'volume_ml', 'pair_dice', 'covered_perc'):
        frame[column] = frame[column].astype(float)
    return frame


def _select(frame: pd.DataFrame, key: str) -> pd.DataFrame:
    """Rows of a stratum key: 'band:group', 'category:<cat>' or 'station:<code>'"""
    kind, _, value = key.partition(':')
    if kind in SIZE_BANDS and value in STATION_GROUPS:
        sub = frame[frame['short_axis_mm'] >= SIZE_BANDS[kind]]
        return sub[sub['relevant']] if value == 'relevant' else sub
    if kind == 'category' and value in SIZE_CATEGORIES:
        return frame[frame['size_category'] == value]
    if kind == 'station' and value in STATION_CODES:
        return frame[frame['primaries'].map(lambda p: value in p).astype(bool)]
    raise InvalidArgumentError(f"unknown stratum key '{key}'")


def _per_patient(sub: pd.DataFrame) -> pd.DataFrame:
    return sub.groupby('patient_id', sort=True).agg(
        n=('gt_id', 'size'),
        det=('detected', 'sum'),
        dice_tp=('pair_dice', 'mean'),
        gt_perc=('covered_perc', 'mean'),
    )


@dataclass
class StratumMetrics:
    key: str
    n_gt: int
    detected: int
    n_patients: int
    recall: float
    recall_pw_mean: float
    recall_pw_std: float
    dice_tp_mean: float
    dice_tp_std: float
    gt_perc_mean: float
    gt_perc_std: float

    def to_dict(self) -> Dict[str, Any]:
        return {k: _nan_to_none(v) for k, v in asdict(self).items()}

    def table_row(self) -> Dict[str, str]:
        return {
            'Dice-TP': fmt_mean_std(self.dice_tp_mean, self.dice_tp_std),
            'GT-Perc': fmt_mean_std(self.gt_perc_mean, self.gt_perc_std, scale=1.0),
            'Recall': 'n/a' if math.isnan(self.recall) else f"{self.recall * 100:.2f}",
            'Recall-PW': fmt_mean_std(self.recall_pw_mean, self.recall_pw_std),
        }


def stratum_metrics(frame: pd.DataFrame, key: str) -> StratumMetrics:
    sub = _select(frame, key)
    per_patient = _per_patient(sub)
    n_gt = len(sub)
    detected = int(sub['detected'].sum())
    recall_pw = _mean_std(per_patient['det'] / per_patient['n'])
    dice_tp = _mean_std(per_patient['dice_tp'])
    gt_perc = _mean_std(per_patient['gt_perc'])
    return StratumMetrics(key, n_gt, detected, len(per_patient),
                          detected / n_gt if n_gt else float('nan'),
                          recall_pw[0], recall_pw[1], dice_tp[0], dice_tp[1], gt_perc[0], gt_perc[1])


def station_recall(frame: pd.DataFrame, band: str = 'all') -> List[Tuple[str, int, int]]:
    """(station, detected, total) per primary station; multi-primary clusters count for each"""
    if band not in SIZE_BANDS:
        raise InvalidArgumentError(f"unknown size band '{band}'")
    sub = frame[frame['short_axis_mm'] >= SIZE_BANDS[band]]
    exploded = sub.explode('primaries')
    counts = exploded.groupby('primaries')['detected'].agg(['sum', 'size'])
    triples = []
    for code in STATION_CODES:
        if code in counts.index:
            triples.append((code, int(counts.loc[code, 'sum']), int(counts.loc[code, 'size'])))
    return triples


@dataclass
class StratifiedReport:
    strata: Dict[str, StratumMetrics] = field(default_factory=dict)
    station_recall: Dict[str, List[Tuple[str, int, int]]] = field(default_factory=dict)

    def get(self, key: str) -> StratumMetrics:
        if key not in self.strata:
            raise InvalidArgumentError(f"unknown stratum key '{key}'")
        return self.strata[key]

    def size_station_frame(self) -> pd.DataFrame:
        """Size band x station group table of the four detection measurements"""
        rows = []
        for band in SIZE_BANDS:
            for group in STATION_GROUPS:
                key = f"{band}:{group}"
                if key in self.strata:
                    rows.append({'Size': band, 'Stations': group, **self.strata[key].table_row()})
        return pd.DataFrame(rows, columns=['Size', 'Stations', 'Dice-TP', 'GT-Perc', 'Recall', 'Recall-PW'])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'strata': {k: v.to_dict() for k, v in self.strata.items()},
            'station_recall': {band: [list(t) for t in triples] for band, triples in self.station_recall.items()},
        }


def stratify(outcomes: Sequence[GTOutcome], axes: Sequence[str] = STRATIFY_AXES) -> StratifiedReport:
    """Recompute detection metrics restricted to GT instances of each stratum"""
    unknown = [a for a in axes if a not in STRATIFY_AXES]
    if unknown:
        raise InvalidArgumentError(f"unknown stratification axes {unknown}, expected {list(STRATIFY_AXES)}")
    frame = outcomes_frame(outcomes)
    report = StratifiedReport()
    if 'station_group' in axes:
        for key in REPORT_STRATA:
            report.strata[key] = stratum_metrics(frame, key)
    if 'size_category' in axes:
        for category in SIZE_CATEGORIES:
            key = f"category:{category}"
            report.strata[key] = stratum_metrics(frame, key)
    if 'primary_station' in axes:
        for band in ('all', 'ge10'):
            report.station_recall[band] = station_recall(frame, band)
        for code, _, _ in report.station_recall['all']:
            key = f"station:{code}"
            report.strata[key] = stratum_metrics(frame, key)
    return report


def station_quality(outcomes: Sequence[GTOutcome], band: str = 'ge10',
                    group: str = 'relevant') -> Dict[str, Dict[str, Any]]:
    """Per primary station: Dice-TP and GT-Perc distributions of detected instances"""
    frame = _select(outcomes_frame(outcomes), f"{band}:{group}")
    detected = frame[frame['detected']].explode('primaries')
    quality = {}
    for code in STATION_CODES:
        sub = detected[detected['primaries'] == code]
        if sub.empty:
            continue
        entry = {'n': int(len(sub))}
        for column, name in (('pair_dice', 'dice_tp'), ('covered_perc', 'gt_perc')):
            values = sub[column].astype(float)
            entry[name] = [float(v) for v in values]
            entry[f"{name}_summary"] = {
                'min': float(values.min()), 'q1': float(values.quantile(0.25)),
                'median': float(values.median()), 'q3': float(values.quantile(0.75)),
                'max': float(values.max()),
            }
        quality[code] = entry
    return quality


# ---------------------------------------------------------------------------
# Station agreement
# ---------------------------------------------------------------------------

def station_agreement_grade(a: StationInfo, b: StationInfo) -> str:
    """perfect: same primary; good: same station set, other primary; bad: anything else"""
    if a.primary == b.primary:
        return GRADE_PERFECT
    if set(a.stations) == set(b.stations):
        return GRADE_GOOD
    return GRADE_BAD


def grade_station_tables(first: Dict[int, StationInfo], second: Dict[int, StationInfo]) -> Dict[str, Any]:
    """Grade a second reading of the same labels and list the bad primary confusions"""
    shared = sorted(set(first) & set(second))
    if not shared:
        raise InvalidArgumentError("station tables share no labels")
    counts = {GRADE_PERFECT: 0, GRADE_GOOD: 0, GRADE_BAD: 0}
    confusions: Dict[Tuple[str, str], int] = {}
    for label_id in shared:
        grade = station_agreement_grade(first[label_id], second[label_id])
        counts[grade] += 1
        if grade == GRADE_BAD:
            pair = (first[label_id].primary, second[label_id].primary)
            confusions[pair] = confusions.get(pair, 0) + 1
    missing = sorted(set(first) ^ set(second))
    if missing:
        logger.warning(f"Labels read only once, left out of grading: {missing}")
    return {
        'n': len(shared),
        'counts': counts,
        'percent': {g: 100.0 * c / len(shared) for g, c in counts.items()},
        'bad_confusions': [{'first': a, 'second': b, 'count': c} for (a, b), c in sorted(confusions.items())],
    }


# ---------------------------------------------------------------------------
# Dataset statistics
# ---------------------------------------------------------------------------

NODE_COLUMNS = ['patient_id', 'label_id', 'short_axis_mm', 'volume_ml', 'n_stations', 'primary']


def node_frame(stations: Dict[int, StationInfo], patient_id: str = '',
               instances: Optional[InstanceSet] = None) -> pd.DataFrame:
    """One row per annotated node; measurements come from instances when given, else the sidecar"""
    rows = []
    for label_id in sorted(stations):
        info = stations[label_id]
        short_axis, volume = info.short_axis_mm, float('nan')
        if instances is not None:
            inst = instances.get(label_id)
            short_axis, volume = inst.short_axis_mm, inst.volume_ml
        rows.append({'patient_id': patient_id, 'label_id': label_id,
                     'short_axis_mm': float('nan') if short_axis is None else short_axis,
                     'volume_ml': volume, 'n_stations': len(info.stations), 'primary': info.primary})
    return pd.DataFrame(rows, columns=NODE_COLUMNS)


def dataset_statistics(frames: Sequence[pd.DataFrame]) -> Dict[str, Any]:
    """Size-category counts, volume summary, NA and multi-station counts, primary distribution"""
    nodes = pd.concat(list(frames), ignore_index=True) if frames else pd.DataFrame(columns=NODE_COLUMNS)
    measured = nodes['short_axis_mm'].dropna()
    categories = measured.apply(size_category) if not measured.empty else pd.Series(dtype=object)
    volumes = nodes['volume_ml'].dropna().astype(float)
    primaries = nodes['primary'].value_counts()
    return {
        'n_patients': int(nodes['patient_id'].nunique()),
        'n_nodes': int(len(nodes)),
        'n_unmeasured': int(len(nodes) - len(measured)),
        'size_categories': {c: int((categories == c).sum()) for c in SIZE_CATEGORIES},
        'volume_ml': None if volumes.empty else {
            'mean': float(volumes.mean()), 'std': float(volumes.std(ddof=0)),
            'min': float(volumes.min()), 'max': float(volumes.max()),
        },
        'unassigned': int((nodes['primary'] == 'NA').sum()),
        'multi_station': {
            'ge2': int((nodes['n_stations'] >= 2).sum()),
            'ge3': int((nodes['n_stations'] >= 3).sum()),
        },
        'primary_distribution': {code: int(primaries[code]) for code in STATION_CODES if code in primaries.index},
    }


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    name: str
    pt: float
    patients: List[PatientMetrics]
    outcomes: List[GTOutcome]
    cohort: CohortMetrics
    stratified: StratifiedReport

    def patient_strata(self) -> Dict[str, Dict[str, Dict[str, Any]]]:
        """Per patient, per report stratum: recall counts, Dice-TP and GT-Perc"""
        frame = outcomes_frame(self.outcomes)
        result: Dict[str, Dict[str, Dict[str, Any]]] = {}
        for p in sorted(self.patients, key=lambda m: m.patient_id):
            mine = frame[frame['patient_id'] == p.patient_id]
            strata = {}
            for key in REPORT_STRATA:
                sub = _select(mine, key)
                detected = sub[sub['detected']]
                strata[key] = {
                    'recall_num': int(len(detected)),
                    'recall_den': int(len(sub)),
                    'dice_tp': float(detected['pair_dice'].mean()) if not detected.empty else float('nan'),
                    'gt_perc': float(sub['covered_perc'].mean()) if not sub.empty else float('nan'),
                }
            result[p.patient_id] = strata
        return result

    def csv_rows(self) -> List[Dict[str, Any]]:
        by_id = {p.patient_id: p for p in self.patients}
        rows = []
        for patient_id, strata in self.patient_strata().items():
            p = by_id[patient_id]
            for key, values in strata.items():
                whole = key == 'all:all'
                rows.append({
                    'patient_id': patient_id, 'stratum': key, 'PT': p.pt,
                    'dice': p.dice_patient if whole else None,
                    'dice_tp': p.dice_tp if whole else values['dice_tp'],
                    'gt_perc': p.gt_perc if whole else values['gt_perc'],
                    'recall_num': p.tp if whole else values['recall_num'],
                    'recall_den': p.n_gt if whole else values['recall_den'],
                    'fppp': p.fp if whole else None,
                })
        return rows

    def to_dict(self) -> Dict[str, Any]:
        strata = self.patient_strata()
        return {
            'name': self.name,
            'pt': self.pt,
            'cohort': self.cohort.to_dict(),
            'stratified': self.stratified.to_dict(),
            'patients': {
                p.patient_id: {'metrics': p.to_dict(), 'strata': strata[p.patient_id]}
                for p in sorted(self.patients, key=lambda m: m.patient_id)
            },
        }


def build_report(name: str, pt: float, patients: Sequence[PatientMetrics],
                 outcomes: Sequence[GTOutcome], axes: Sequence[str] = STRATIFY_AXES) -> EvalReport:
    if patients:
        cohort = aggregate(patients)
    else:
        cohort = CohortMetrics(0, 0, 0, 0, *([float('nan')] * 11))
    return EvalReport(name, pt, sorted(patients, key=lambda m: m.patient_id), list(outcomes),
                      cohort, stratify(outcomes, axes))
