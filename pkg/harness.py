#!/usr/bin/env python3
"""
Cross-Validation Harness
Patient-level fold splitting, per-fold threshold selection and evaluation of
precomputed probability maps, tabular cohort reports and stage timing of
the preprocessing/evaluation chain.
"""

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import InvalidArgumentError, ManifestError
from evalkit import (
    PT_LATTICE, CohortMetrics, EvalReport, GTOutcome, PatientMetrics, ThresholdCurve,
    aggregate, build_report, evaluate_patient, fmt_mean_std, grade_station_tables, pair_instances,
    patient_metrics, select_best_threshold, station_quality, stratify, sweep_thresholds,
)
from instancer import InstanceSet, cluster_ground_truth, extract_instances
from pipeline import (
    PreprocessConfig, ensemble_all, ensemble_max, extract_slabs, preprocess, restore_original_space, stitch_slabs,
)
from volio import (
    SCHEMA_VERSIONS, TOOLKIT_VERSION,
    read_annotation, read_json, read_stations, read_volume, write_json, write_report,
)
from voxelgrid import KIND_PROBABILITY, VoxelGrid

logger = logging.getLogger(__name__)

REQUIRED_ROLES = ('gt_labels', 'gt_stations')
FOLD_TABLE_COLUMNS = ['Fold', 'PT', '#LN', 'Dice', 'Recall', 'Recall-PW', 'FPPP', 'GT-Perc']
COMPARISON_COLUMNS = ['Experiment', 'PT', 'Dice', 'Dice-TP', 'GT-Perc', 'Recall', 'Recall-PW', 'FPPP']
TIMING_STAGES = ('load', 'preprocess', 'slab_stitch', 'ensemble', 'restore', 'instancer', 'metrics')


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------

@dataclass
class FoldSplit:
    k: int
    seed: int
    assignment: Dict[str, int]

    def folds(self) -> List[List[str]]:
        members: List[List[str]] = [[] for _ in range(self.k)]
        for patient_id, fold in self.assignment.items():
            members[fold].append(patient_id)
        return [sorted(m) for m in members]

    def sizes(self) -> List[int]:
        return [len(m) for m in self.folds()]

    def to_dict(self) -> Dict[str, Any]:
        return {'k': self.k, 'seed': self.seed, 'assignment': dict(sorted(self.assignment.items()))}


def split_folds(patient_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle of the sorted ids, then round-robin fold assignment"""
    ids = sorted(str(p) for p in patient_ids)
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("patient ids must be unique")
    if k < 2:
        raise InvalidArgumentError(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise InvalidArgumentError(f"{len(ids)} patients cannot fill {k} folds")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(ids))
    return FoldSplit(k, seed, {ids[index]: position % k for position, index in enumerate(order)})


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class PatientEntry:
    patient_id: str
    paths: Dict[str, str]
    prob_maps: Dict[str, str]
    benchmark: bool = False

    def path(self, role: str) -> str:
        path = self.paths.get(role)
        if not path:
            raise ManifestError(self.patient_id, role)
        if not os.path.exists(path):
            raise ManifestError(self.patient_id, role, f"file not found: {path}")
        return path

    def prob_path(self, config: str) -> str:
        path = self.prob_maps.get(config)
        role = f"prob_maps[{config}]"
        if not path:
            raise ManifestError(self.patient_id, role)
        if not os.path.exists(path):
            raise ManifestError(self.patient_id, role, f"file not found: {path}")
        return path


@dataclass
class Manifest:
    patients: Dict[str, PatientEntry]
    ensembles: Dict[str, List[str]] = field(default_factory=dict)
    path: Optional[str] = None

    def patient_ids(self) -> List[str]:
        return sorted(self.patients)

    def configurations(self) -> List[str]:
        """Single-model configurations followed by ensembles"""
        singles = sorted({c for p in self.patients.values() for c in p.prob_maps})
        return singles + sorted(self.ensembles)

    def members(self, config: str) -> List[str]:
        return list(self.ensembles.get(config, [config]))


def load_manifest(path: str) -> Manifest:
    """Read a cohort manifest; relative paths resolve against the manifest's directory"""
    data = read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    if not isinstance(data, dict) or not isinstance(data.get('patients'), dict) or not data['patients']:
        raise ManifestError('*', 'patients', "missing or empty")

    def resolve(value: str) -> str:
        return value if os.path.isabs(value) else os.path.join(base, value)

    patients = {}
    for patient_id, entry in sorted(data['patients'].items()):
        for role in REQUIRED_ROLES:
            if not entry.get(role):
                raise ManifestError(patient_id, role)
        paths = {role: resolve(entry[role])
                 for role in ('ct', 'gt_labels', 'gt_stations', 'gt_stations_second', 'lung_mask')
                 if entry.get(role)}
        prob_maps = {name: resolve(p) for name, p in sorted(entry.get('prob_maps', {}).items())}
        patients[patient_id] = PatientEntry(patient_id, paths, prob_maps, bool(entry.get('benchmark', False)))

    ensembles = {name: list(members) for name, members in sorted(data.get('ensembles', {}).items())}
    for name, members in ensembles.items():
        if len(members) < 2:
            raise ManifestError('*', f"ensembles[{name}]", "needs at least two members")
        for patient in patients.values():
            for member in members:
                if member not in patient.prob_maps:
                    raise ManifestError(patient.patient_id, f"prob_maps[{member}]", f"missing (ensemble {name})")

    logger.info(f"Loaded manifest {path}: {len(patients)} patients, {len(ensembles)} ensembles")
    return Manifest(patients, ensembles, path)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CVConfig:
    folds: int = 5
    seed: int = 20210601
    connectivity: int = 26
    min_pair_dice: float = 0.0
    min_fp_voxels: int = 0
    pt: Optional[float] = None  # None sweeps the lattice per fold
    thresholds: Tuple[float, ...] = PT_LATTICE
    jobs: int = 1
    best_config: Optional[str] = None

    @classmethod
    def from_config(cls, config, **overrides) -> 'CVConfig':
        values = {
            'folds': int(config.get('harness', 'folds')),
            'seed': int(config.get('harness', 'seed')),
            'connectivity': int(config.get('evaluation', 'connectivity')),
            'min_pair_dice': float(config.get('evaluation', 'min_pair_dice')),
            'min_fp_voxels': int(config.get('evaluation', 'min_fp_voxels')),
            'thresholds': tuple(config.get_thresholds()),
            'jobs': config.get_jobs(),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class CohortEvaluator:
    """Per-patient ground truth, sweeps and metrics with caching; thread-safe"""

    def __init__(self, manifest: Manifest, cfg: CVConfig):
        self.manifest = manifest
        self.cfg = cfg
        self._lock = threading.Lock()
        self._gt: Dict[str, InstanceSet] = {}
        self._curves: Dict[Tuple[str, str], ThresholdCurve] = {}
        self._results: Dict[Tuple[str, str, float], Tuple[PatientMetrics, List[GTOutcome]]] = {}
        self.prob_reads: List[Tuple[str, str]] = []

    def ground_truth(self, patient_id: str) -> InstanceSet:
        with self._lock:
            cached = self._gt.get(patient_id)
        if cached is not None:
            return cached
        entry = self.manifest.patients[patient_id]
        ann = read_annotation(entry.path('gt_labels'), entry.path('gt_stations'))
        _, clusters = cluster_ground_truth(ann, self.cfg.connectivity)
        clusters.measure()
        with self._lock:
            self._gt[patient_id] = clusters
        return clusters

    def probability(self, patient_id: str, config: str) -> VoxelGrid:
        entry = self.manifest.patients[patient_id]
        grids = [read_volume(entry.prob_path(member), kind=KIND_PROBABILITY)
                 for member in self.manifest.members(config)]
        with self._lock:
            self.prob_reads.append((patient_id, config))
        return ensemble_all(grids)

    def curve(self, patient_id: str, config: str) -> ThresholdCurve:
        key = (patient_id, config)
        with self._lock:
            cached = self._curves.get(key)
        if cached is not None:
            return cached
        gts = self.ground_truth(patient_id)
        curve = sweep_thresholds(self.probability(patient_id, config), gts.foreground(),
                                 self.cfg.thresholds, patient_id)
        with self._lock:
            self._curves[key] = curve
        return curve

    def evaluate(self, patient_id: str, config: str, pt: float) -> Tuple[PatientMetrics, List[GTOutcome]]:
        key = (patient_id, config, pt)
        with self._lock:
            cached = self._results.get(key)
        if cached is not None:
            return cached
        gts = self.ground_truth(patient_id)
        result = evaluate_patient(self.probability(patient_id, config), gts, pt, patient_id,
                                  self.cfg.connectivity, self.cfg.min_pair_dice, self.cfg.min_fp_voxels)
        with self._lock:
            self._results[key] = result
        return result


def _run_all(fn: Callable, items: Sequence, jobs: int) -> List:
    """Map preserving input order, threaded when jobs > 1"""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _pt_cell(pt: Optional[float]) -> str:
    return '-' if pt is None else f"{pt:.1f}"


@dataclass
class ConfigResult:
    """Cross-validation outcome of one model or ensemble configuration"""
    name: str
    fold_pts: List[float]
    fold_cohorts: List[CohortMetrics]
    fold_counts: List[int]
    total: CohortMetrics
    total_pt: Optional[float]
    patients: List[PatientMetrics]
    outcomes: List[GTOutcome]
    global_pt: float
    global_cohort: CohortMetrics

    def fold_table(self) -> pd.DataFrame:
        rows = []
        for index, (pt, cohort) in enumerate(zip(self.fold_pts, self.fold_cohorts)):
            rows.append(_fold_row(str(index), pt, cohort))
        rows.append(_fold_row('Total', self.total_pt, self.total))
        return pd.DataFrame(rows, columns=FOLD_TABLE_COLUMNS)

    def comparison_row(self) -> Dict[str, Any]:
        cells = self.global_cohort.table_row()
        return {'Experiment': self.name, 'PT': _pt_cell(self.global_pt),
                **{c: cells[c] for c in COMPARISON_COLUMNS[2:]}}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'fold_pts': self.fold_pts,
            'fold_counts': self.fold_counts,
            'folds': [c.to_dict() for c in self.fold_cohorts],
            'total': self.total.to_dict(),
            'total_pt': self.total_pt,
            'global_pt': self.global_pt,
            'global': self.global_cohort.to_dict(),
            'fold_table': self.fold_table().to_dict(orient='records'),
        }


def _fold_row(fold: str, pt: Optional[float], cohort: CohortMetrics) -> Dict[str, Any]:
    cells = cohort.table_row()
    return {'Fold': fold, 'PT': _pt_cell(pt), '#LN': cohort.n_gt, 'Dice': cells['Dice'],
            'Recall': cells['Recall'], 'Recall-PW': cells['Recall-PW'], 'FPPP': cells['FPPP'],
            'GT-Perc': cells['GT-Perc']}


@dataclass
class CVReport:
    split: FoldSplit
    cfg: CVConfig
    results: Dict[str, ConfigResult]
    best_config: str
    best_report: EvalReport
    station_quality: Dict[str, Any]
    benchmark: Optional[Dict[str, Any]] = None
    agreement: Optional[Dict[str, Any]] = None

    def comparison_table(self) -> pd.DataFrame:
        return pd.DataFrame([r.comparison_row() for r in self.results.values()], columns=COMPARISON_COLUMNS)

    def size_station_table(self) -> pd.DataFrame:
        return self.best_report.stratified.size_station_frame()

    def benchmark_table(self) -> Optional[pd.DataFrame]:
        if self.benchmark is None:
            return None
        return pd.DataFrame(self.benchmark['table'])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema': f"report/{SCHEMA_VERSIONS['report']}",
            'toolkit_version': TOOLKIT_VERSION,
            'split': self.split.to_dict(),
            'settings': {
                'connectivity': self.cfg.connectivity,
                'min_pair_dice': self.cfg.min_pair_dice,
                'min_fp_voxels': self.cfg.min_fp_voxels,
                'pt': self.cfg.pt if self.cfg.pt is not None else 'sweep',
                'thresholds': list(self.cfg.thresholds),
            },
            'configurations': {name: r.to_dict() for name, r in self.results.items()},
            'comparison': self.comparison_table().to_dict(orient='records'),
            'best_config': self.best_config,
            'size_station': self.size_station_table().to_dict(orient='records'),
            'stratified': self.best_report.stratified.to_dict(),
            'station_quality': self.station_quality,
            'benchmark': self.benchmark,
            'agreement': self.agreement,
        }


def evaluate_fold(evaluator: CohortEvaluator, config: str,
                  members: Sequence[str]) -> Tuple[float, List[PatientMetrics], List[GTOutcome]]:
    """Pick the threshold on the fold's own patients, then evaluate them at it"""
    cfg = evaluator.cfg
    if cfg.pt is None:
        pt = select_best_threshold(_run_all(lambda pid: evaluator.curve(pid, config), members, cfg.jobs))
    else:
        pt = cfg.pt
    results = _run_all(lambda pid: evaluator.evaluate(pid, config, pt), members, cfg.jobs)
    return pt, [m for m, _ in results], [o for _, group in results for o in group]


def _evaluate_configuration(evaluator: CohortEvaluator, config: str, split: FoldSplit) -> ConfigResult:
    cfg = evaluator.cfg
    fold_pts, fold_cohorts, fold_counts = [], [], []
    patients: List[PatientMetrics] = []
    outcomes: List[GTOutcome] = []

    for fold_index, members in enumerate(split.folds()):
        pt, fold_metrics, fold_outcomes = evaluate_fold(evaluator, config, members)
        outcomes.extend(fold_outcomes)
        patients.extend(fold_metrics)
        cohort = aggregate(fold_metrics)
        fold_pts.append(pt)
        fold_cohorts.append(cohort)
        fold_counts.append(cohort.n_gt)
        logger.info(f"[{config}] fold {fold_index}: PT={pt:.1f}, {cohort.n_gt} clusters, "
                    f"recall-PW {fmt_mean_std(cohort.recall_pw_mean, cohort.recall_pw_std)}")

    total = aggregate(patients)
    if total.n_gt != sum(fold_counts):
        raise InvalidArgumentError(f"[{config}] pooled count {total.n_gt} differs from fold sum {sum(fold_counts)}")
    total_pt = fold_pts[0] if len(set(fold_pts)) == 1 else None

    ids = [pid for members in split.folds() for pid in members]
    if cfg.pt is None:
        global_pt = select_best_threshold(_run_all(lambda pid: evaluator.curve(pid, config), ids, cfg.jobs))
    else:
        global_pt = cfg.pt
    global_metrics = [m for m, _ in _run_all(lambda pid: evaluator.evaluate(pid, config, global_pt), ids, cfg.jobs)]

    return ConfigResult(config, fold_pts, fold_cohorts, fold_counts, total, total_pt,
                        patients, outcomes, global_pt, aggregate(global_metrics))


def _agreement(manifest: Manifest, patient_ids: Sequence[str]) -> Optional[Dict[str, Any]]:
    """Pooled station-agreement grading over patients that carry a second station reading"""
    graded = []
    for patient_id in patient_ids:
        entry = manifest.patients[patient_id]
        if 'gt_stations_second' not in entry.paths:
            continue
        first = read_stations(entry.path('gt_stations'))
        second = read_stations(entry.path('gt_stations_second'))
        graded.append(grade_station_tables(first, second))
    if not graded:
        return None
    counts = {g: sum(r['counts'][g] for r in graded) for g in graded[0]['counts']}
    n = sum(r['n'] for r in graded)
    confusions: Dict[Tuple[str, str], int] = {}
    for r in graded:
        for c in r['bad_confusions']:
            confusions[(c['first'], c['second'])] = confusions.get((c['first'], c['second']), 0) + c['count']
    return {
        'n_patients': len(graded),
        'n': n,
        'counts': counts,
        'percent': {g: 100.0 * c / n for g, c in counts.items()},
        'bad_confusions': [{'first': a, 'second': b, 'count': c} for (a, b), c in sorted(confusions.items())],
    }


def _benchmark_section(result: ConfigResult, benchmark_ids: Sequence[str]) -> Optional[Dict[str, Any]]:
    if not benchmark_ids:
        return None
    subset = set(benchmark_ids)
    patients = [p for p in result.patients if p.patient_id in subset]
    outcomes = [o for o in result.outcomes if o.patient_id in subset]
    stratified = stratify(outcomes, ('station_group',))
    cohort = aggregate(patients)
    table = stratified.size_station_frame()
    table['FPPP'] = fmt_mean_std(cohort.fppp_mean, cohort.fppp_std, scale=1.0)
    return {
        'patients': sorted(subset),
        'cohort': cohort.to_dict(),
        'table': table.to_dict(orient='records'),
    }


def run_cross_validation(manifest: Manifest, cfg: CVConfig = CVConfig()) -> CVReport:
    """Evaluate every configuration fold by fold, selecting the threshold on each test fold"""
    split = split_folds(manifest.patient_ids(), cfg.folds, cfg.seed)
    logger.info(f"Cross-validation: {len(manifest.patients)} patients, folds {split.sizes()}, seed {cfg.seed}")
    evaluator = CohortEvaluator(manifest, cfg)

    configs = manifest.configurations()
    if not configs:
        raise ManifestError('*', 'prob_maps', "no configurations listed")
    results = {name: _evaluate_configuration(evaluator, name, split) for name in configs}

    if cfg.best_config is not None:
        if cfg.best_config not in results:
            raise InvalidArgumentError(f"unknown configuration '{cfg.best_config}'")
        best = cfg.best_config
    else:
        best = max(configs, key=lambda n: (np.nan_to_num(results[n].total.recall_pw_mean, nan=-1.0),
                                           -configs.index(n)))
    chosen = results[best]
    best_report = build_report(best, chosen.total_pt if chosen.total_pt is not None else float('nan'),
                               chosen.patients, chosen.outcomes)

    benchmark_ids = [pid for pid, p in manifest.patients.items() if p.benchmark]
    return CVReport(
        split=split,
        cfg=cfg,
        results=results,
        best_config=best,
        best_report=best_report,
        station_quality=station_quality(chosen.outcomes),
        benchmark=_benchmark_section(chosen, benchmark_ids),
        agreement=_agreement(manifest, benchmark_ids or manifest.patient_ids()),
    )


def write_cv_report(report: CVReport, out_dir: str) -> Dict[str, str]:
    """report.json plus one CSV per table"""
    os.makedirs(out_dir, exist_ok=True)
    written = {'report': os.path.join(out_dir, 'report.json')}
    write_json(report.to_dict(), written['report'])

    tables = {f"folds_{name}": r.fold_table() for name, r in report.results.items()}
    tables['comparison'] = report.comparison_table()
    tables['size_station'] = report.size_station_table()
    if report.benchmark_table() is not None:
        tables['benchmark'] = report.benchmark_table()
    for band, triples in report.best_report.stratified.station_recall.items():
        tables[f"station_recall_{band}"] = pd.DataFrame(triples, columns=['station', 'detected', 'total'])
    for name, frame in tables.items():
        path = os.path.join(out_dir, f"{name}.csv")
        frame.to_csv(path, index=False, lineterminator='\n')
        written[name] = path

    written['patients'] = os.path.join(out_dir, 'patients.csv')
    write_report(report.best_report, written['patients'], 'csv')
    logger.info(f"Cross-validation report written to {out_dir}")
    return written


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

@dataclass
class TimingReport:
    repeats: int
    samples: Dict[str, List[float]]
    totals: List[float]

    def mean_std(self, stage: str) -> Tuple[float, float]:
        values = np.asarray(self.samples[stage])
        return float(values.mean()), float(values.std())

    def to_dict(self) -> Dict[str, Any]:
        stages = {}
        for stage in self.samples:
            mean, std = self.mean_std(stage)
            stages[stage] = {'mean_s': mean, 'std_s': std, 'samples': self.samples[stage]}
        totals = np.asarray(self.totals)
        return {'repeats': self.repeats, 'stages': stages,
                'total': {'mean_s': float(totals.mean()), 'std_s': float(totals.std()), 'samples': self.totals}}

    def frame(self) -> pd.DataFrame:
        rows = [{'stage': s, 'mean_s': self.mean_std(s)[0], 'std_s': self.mean_std(s)[1]} for s in self.samples]
        return pd.DataFrame(rows, columns=['stage', 'mean_s', 'std_s'])


def benchmark_timing(ct_path: str, cfg: PreprocessConfig = PreprocessConfig(), repeats: int = 5,
                     connectivity: int = 26, lung_mask_path: Optional[str] = None) -> TimingReport:
    """Wall-clock the processing chain; the normalized CT stands in for network output"""
    if repeats < 1:
        raise InvalidArgumentError(f"repeats must be at least 1, got {repeats}")
    samples: Dict[str, List[float]] = {stage: [] for stage in TIMING_STAGES}
    totals: List[float] = []

    for run in range(repeats):
        start = time.perf_counter()
        marks = [start]

        ct = read_volume(ct_path)
        lung = read_volume(lung_mask_path) if lung_mask_path else None
        marks.append(time.perf_counter())

        norm, record = preprocess(ct, cfg, lung)
        marks.append(time.perf_counter())

        slabs = extract_slabs(norm, cfg.slab)
        stitched = stitch_slabs([s.grid for s in slabs.slabs], slabs)
        marks.append(time.perf_counter())

        fused = ensemble_max(stitched, norm)
        marks.append(time.perf_counter())

        restored = restore_original_space(fused, record)
        marks.append(time.perf_counter())

        dets = extract_instances(restored, 0.5, connectivity)
        marks.append(time.perf_counter())

        pairing = pair_instances(dets, dets)
        patient_metrics(pairing, dets, dets, restored, 0.5)
        marks.append(time.perf_counter())

        for stage, (a, b) in zip(TIMING_STAGES, zip(marks, marks[1:])):
            samples[stage].append(b - a)
        totals.append(marks[-1] - start)
        logger.info(f"Timing run {run + 1}/{repeats}: {totals[-1]:.2f}s")

    return TimingReport(repeats, samples, totals)
