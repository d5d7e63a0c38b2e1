#!/usr/bin/env python3
"""
Lymph-Node Toolkit command line
Composable pipeline steps (preprocess, slab, stitch, ensemble, restore,
instances), cohort evaluation and cross-validation, phantom generation,
timing and dataset statistics.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from config.config_manager import ConfigManager, get_config_manager
from errors import IO_ERRORS, InvalidArgumentError, ToolkitError
from evalkit import build_report, dataset_statistics, node_frame, select_best_threshold
from harness import (
    CohortEvaluator, CVConfig, benchmark_timing, load_manifest, run_cross_validation, write_cv_report,
)
from instancer import annotated_instances, extract_instances
from phantom import ProbabilityQuality, generate_phantom, load_spec, make_cohort, synth_probability, write_phantom
from pipeline import (
    MODE_FULLVOL, MODE_SLAB, PreprocessConfig, SlabSet,
    ensemble_all, extract_slabs, preprocess, restore_original_space, stitch_slabs,
)
from report_figures import build_figures, write_figures
from volio import (
    SCHEMA_VERSIONS, TOOLKIT_VERSION,
    json_text, read_annotation, read_geometry, read_json, read_stations, read_volume,
    write_geometry, write_instances, write_json, write_report, write_volume,
)
from voxelgrid import KIND_BINARY, KIND_CT, KIND_PROBABILITY

logger = logging.getLogger('ln_toolkit')

LOG_FORMAT = '[%(asctime)s] %(levelname)s: %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


class UsageError(ToolkitError):
    """Unknown subcommand, flag or malformed flag value"""


class ToolkitArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _threshold_arg(value: str) -> Optional[float]:
    """'sweep' or a threshold in [0, 1]"""
    if value == 'sweep':
        return None
    try:
        pt = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'sweep' or a number, got '{value}'")
    if not 0.0 <= pt <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in [0, 1], got {pt}")
    return pt


def _pt_value(value: str) -> float:
    pt = _threshold_arg(value)
    if pt is None:
        raise argparse.ArgumentTypeError("a fixed threshold is required here")
    return pt


def version_text() -> str:
    schemas = ', '.join(f"{name}/{version}" for name, version in sorted(SCHEMA_VERSIONS.items()))
    return f"ln-toolkit {TOOLKIT_VERSION} (schemas: {schemas})"


def _emit(data, out: Optional[str]) -> None:
    """Machine output to a file, or stdout when no path is given"""
    if out:
        write_json(data, out)
    else:
        sys.stdout.write(json_text(data))


def _sidecar_path(volume_path: str, suffix: str) -> str:
    for ext in ('.nii.gz', '.nii'):
        if volume_path.endswith(ext):
            return volume_path[:-len(ext)] + suffix
    return volume_path + suffix


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_preprocess(args, config: ConfigManager) -> int:
    cfg = PreprocessConfig.from_config(config, args.mode, slab_size=args.slab_size, stride=args.stride)
    ct = read_volume(args.ct, kind=KIND_CT)
    lung = read_volume(args.lung_mask, kind=KIND_BINARY) if args.lung_mask else None
    grid, record = preprocess(ct, cfg, lung)
    record_path = args.record or _sidecar_path(args.output, '.geometry.json')
    write_volume(grid, args.output)
    write_geometry(record, record_path)
    logger.info(f"Wrote {args.output} and {record_path}")
    return 0


def cmd_slab(args, config: ConfigManager) -> int:
    cfg = PreprocessConfig.from_config(config, MODE_SLAB, slab_size=args.slab_size, stride=args.stride)
    vol = read_volume(args.volume)
    slabs = extract_slabs(vol, cfg.slab)
    os.makedirs(args.output, exist_ok=True)
    for index, slab in enumerate(slabs.slabs):
        write_volume(slab.grid, os.path.join(args.output, f"slab_{index:03d}.nii.gz"))
    write_json(slabs.layout(), os.path.join(args.output, 'layout.json'))
    logger.info(f"Wrote {len(slabs)} slabs to {args.output}")
    return 0


def cmd_stitch(args, config: ConfigManager) -> int:
    layout = SlabSet.from_layout(read_json(args.layout))
    preds = [read_volume(path, kind=KIND_PROBABILITY) for path in args.predictions]
    write_volume(stitch_slabs(preds, layout), args.output)
    return 0


def cmd_ensemble(args, config: ConfigManager) -> int:
    grids = [read_volume(path, kind=KIND_PROBABILITY) for path in args.inputs]
    write_volume(ensemble_all(grids), args.output)
    logger.info(f"Fused {len(grids)} probability maps into {args.output}")
    return 0


def cmd_restore(args, config: ConfigManager) -> int:
    prob = read_volume(args.prob, kind=KIND_PROBABILITY)
    write_volume(restore_original_space(prob, read_geometry(args.record)), args.output)
    return 0


def cmd_instances(args, config: ConfigManager) -> int:
    pt = args.pt
    connectivity = args.connectivity or int(config.get('evaluation', 'connectivity'))
    instances = extract_instances(read_volume(args.prob, kind=KIND_PROBABILITY), pt, connectivity).measure()
    if args.labels:
        write_volume(instances.to_grid(), args.labels)
    if args.output:
        write_instances(instances, args.output, pt=pt)
    else:
        data = instances.to_dict()
        data['pt'] = pt
        _emit(data, None)
    logger.info(f"{len(instances)} instances at PT {pt}")
    return 0


def _cv_config(args, config: ConfigManager, **extra) -> CVConfig:
    return CVConfig.from_config(
        config, folds=getattr(args, 'folds', None), seed=getattr(args, 'seed', None),
        connectivity=args.connectivity, min_pair_dice=args.min_pair_dice,
        min_fp_voxels=args.min_fp_voxels, jobs=args.jobs or None, **extra)


def cmd_evaluate(args, config: ConfigManager) -> int:
    """Every manifest patient at one threshold per configuration, no folds"""
    manifest = load_manifest(args.manifest)
    cfg = _cv_config(args, config)
    cfg.pt = args.pt
    evaluator = CohortEvaluator(manifest, cfg)
    configs = args.configs or manifest.configurations()
    unknown = [c for c in configs if c not in manifest.configurations()]
    if unknown:
        raise InvalidArgumentError(f"unknown configurations {unknown}")

    os.makedirs(args.output, exist_ok=True)
    ids = manifest.patient_ids()
    for name in configs:
        if cfg.pt is None:
            pt = select_best_threshold([evaluator.curve(pid, name) for pid in ids])
        else:
            pt = cfg.pt
        results = [evaluator.evaluate(pid, name, pt) for pid in ids]
        report = build_report(name, pt, [m for m, _ in results], [o for _, group in results for o in group])
        write_report(report, os.path.join(args.output, f"{name}.json"), 'json')
        write_report(report, os.path.join(args.output, f"{name}.csv"), 'csv')
        logger.info(f"[{name}] PT {pt:.1f}: recall {report.cohort.recall_global:.3f}, "
                    f"FPPP {report.cohort.fppp_mean:.2f}")
    return 0


def cmd_crossval(args, config: ConfigManager) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _cv_config(args, config, pt=args.pt, best_config=args.best_config)
    report = run_cross_validation(manifest, cfg)
    written = write_cv_report(report, args.output)
    if args.figures:
        write_figures(build_figures(read_json(written['report'])), os.path.join(args.output, 'figures.json'))
    logger.info(f"Best configuration: {report.best_config}")
    return 0


def cmd_phantom(args, config: ConfigManager) -> int:
    quality = ProbabilityQuality.from_dict(read_json(args.quality)) if args.quality else None
    if args.spec:
        spec = load_spec(args.spec)
        paths = write_phantom(spec, args.out)
        if quality is not None:
            _, ann = generate_phantom(spec)
            write_volume(synth_probability(ann, quality), os.path.join(args.out, 'prob.nii.gz'))
        logger.info(f"Phantom written: {sorted(paths)}")
        return 0
    configs = {'default': quality} if quality is not None else None
    manifest_path = make_cohort(args.out, n_patients=args.cohort, seed=args.seed or 0,
                                n_nodes=args.nodes, configs=configs)
    logger.info(f"Cohort manifest: {manifest_path}")
    return 0


def cmd_bench(args, config: ConfigManager) -> int:
    cfg = PreprocessConfig.from_config(config, args.mode, slab_size=args.slab_size, stride=args.stride)
    repeats = args.repeats or int(config.get('harness', 'timing_repeats'))
    connectivity = args.connectivity or int(config.get('evaluation', 'connectivity'))
    timing = benchmark_timing(args.ct, cfg, repeats, connectivity, args.lung_mask)
    _emit(timing.to_dict(), args.output)
    return 0


def cmd_stats(args, config: ConfigManager) -> int:
    """Node counts from station sidecars; --measure re-measures nodes from the label volumes"""
    manifest = load_manifest(args.manifest)
    frames = []
    for patient_id in manifest.patient_ids():
        entry = manifest.patients[patient_id]
        if args.measure:
            ann = read_annotation(entry.path('gt_labels'), entry.path('gt_stations'))
            frames.append(node_frame(ann.stations, patient_id, annotated_instances(ann).measure()))
        else:
            frames.append(node_frame(read_stations(entry.path('gt_stations')), patient_id))
    _emit(dataset_statistics(frames), args.output)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--connectivity', type=int, choices=(6, 18, 26), help='Neighbourhood for labeling')
    parser.add_argument('--min-pair-dice', type=float, help='Minimum Dice for a detection/GT pair')
    parser.add_argument('--min-fp-voxels', type=int, help='Detections at or below this size are not FPs')
    parser.add_argument('--jobs', type=int, help='Patient-level worker threads (default from config)')


def _add_slab_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--slab-size', type=int, help='Slab depth in slices (default from config)')
    parser.add_argument('--stride', type=int, help='Slab stride in slices (default from config)')


def build_parser() -> ToolkitArgumentParser:
    parser = ToolkitArgumentParser(prog='ln_toolkit',
                                   description='Mediastinal lymph-node pipeline and evaluation toolkit')
    parser.add_argument('--version', action='version', version=version_text())
    parser.add_argument('--log-level', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'),
                        help='Diagnostics level on stderr (default from config)')
    parser.add_argument('--config', help='Toolkit configuration JSON')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=ToolkitArgumentParser)
    sub.required = True

    p = sub.add_parser('preprocess', help='Resample, crop to the lungs, resize and normalize a CT')
    p.add_argument('ct')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--mode', choices=(MODE_SLAB, MODE_FULLVOL), default=MODE_SLAB)
    p.add_argument('--lung-mask')
    p.add_argument('--record', help='Geometry sidecar path (default next to the output)')
    _add_slab_flags(p)

    p = sub.add_parser('slab', help='Split a volume into overlapping z-slabs')
    p.add_argument('volume')
    p.add_argument('-o', '--output', required=True, help='Output directory')
    _add_slab_flags(p)

    p = sub.add_parser('stitch', help='Average slab predictions back onto the parent volume')
    p.add_argument('layout', help='layout.json written by the slab command')
    p.add_argument('predictions', nargs='+')
    p.add_argument('-o', '--output', required=True)

    p = sub.add_parser('ensemble', help='Voxelwise maximum of probability maps')
    p.add_argument('inputs', nargs='+')
    p.add_argument('-o', '--output', required=True)

    p = sub.add_parser('restore', help='Map a network-space probability map back to patient space')
    p.add_argument('prob')
    p.add_argument('--record', required=True)
    p.add_argument('-o', '--output', required=True)

    p = sub.add_parser('instances', help='Threshold, label and measure a probability map')
    p.add_argument('prob')
    p.add_argument('--pt', type=_pt_value, default=0.5)
    p.add_argument('--connectivity', type=int, choices=(6, 18, 26))
    p.add_argument('--labels', help='Also write the instance label volume')
    p.add_argument('-o', '--output')

    p = sub.add_parser('evaluate', help='Evaluate every manifest patient')
    p.add_argument('--manifest', required=True)
    p.add_argument('--pt', type=_threshold_arg, default=None, help="Threshold or 'sweep' (default)")
    p.add_argument('--configs', nargs='+', help='Configurations to evaluate (default all)')
    p.add_argument('-o', '--output', default='evaluation', help='Output directory')
    _add_eval_flags(p)

    p = sub.add_parser('crossval', help='Patient-level k-fold evaluation with per-fold thresholds')
    p.add_argument('--manifest', required=True)
    p.add_argument('--folds', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--pt', type=_threshold_arg, default=None, help="Threshold or 'sweep' (default)")
    p.add_argument('--best-config', help='Configuration used for the stratified tables')
    p.add_argument('--figures', action='store_true', help='Also write plotly figure JSON')
    p.add_argument('-o', '--output', default='crossval', help='Output directory')
    _add_eval_flags(p)

    p = sub.add_parser('phantom', help='Generate a synthetic phantom or cohort')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--spec', help='Phantom spec JSON')
    source.add_argument('--cohort', type=int, help='Number of random patients')
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--seed', type=int)
    p.add_argument('--nodes', type=int, default=5)
    p.add_argument('--quality', help='Probability degradation JSON')

    p = sub.add_parser('bench', help='Time the processing chain on one CT')
    p.add_argument('ct')
    p.add_argument('--lung-mask')
    p.add_argument('--mode', choices=(MODE_SLAB, MODE_FULLVOL), default=MODE_SLAB)
    p.add_argument('--repeats', type=int)
    p.add_argument('--connectivity', type=int, choices=(6, 18, 26))
    p.add_argument('-o', '--output')
    _add_slab_flags(p)

    p = sub.add_parser('stats', help='Dataset node statistics')
    p.add_argument('--manifest', required=True)
    p.add_argument('--measure', action='store_true', help='Measure nodes from the label volumes')
    p.add_argument('-o', '--output')

    return parser


COMMANDS = {
    'preprocess': cmd_preprocess,
    'slab': cmd_slab,
    'stitch': cmd_stitch,
    'ensemble': cmd_ensemble,
    'restore': cmd_restore,
    'instances': cmd_instances,
    'evaluate': cmd_evaluate,
    'crossval': cmd_crossval,
    'phantom': cmd_phantom,
    'bench': cmd_bench,
    'stats': cmd_stats,
}


def _configure_logging(level: str) -> None:
    logging.basicConfig(stream=sys.stderr, format=LOG_FORMAT, datefmt=LOG_DATEFMT)
    logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))


def dispatch(argv: List[str]) -> int:
    """Run one subcommand and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except SystemExit as e:
        # --help and --version
        return e.code if isinstance(e.code, int) else 0

    try:
        config = ConfigManager(args.config) if args.config else get_config_manager()
        _configure_logging(args.log_level or config.get('logging', 'level', 'INFO'))
        return COMMANDS[args.command](args, config)
    except IO_ERRORS as e:
        logger.error(f"I/O error: {e}")
        return 2
    except ToolkitError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
