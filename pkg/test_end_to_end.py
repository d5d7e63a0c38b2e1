#!/usr/bin/env python3
"""
End-to-end checks on synthetic cohorts: cross-validated detection metrics for
perfect and degraded probability maps, clustered ground truth, and the
preprocess/restore geometry round trip
"""

import shutil
import tempfile

import numpy as np

from evalkit import dice, evaluate_patient
from harness import CVConfig, load_manifest, run_cross_validation
from instancer import cluster_ground_truth, threshold
from phantom import EllipsoidSpec, NodeSpec, PhantomSpec, ProbabilityQuality, generate_phantom, lung_mask_of, make_cohort
from pipeline import MODE_FULLVOL, MODE_SLAB, PreprocessConfig, preprocess, restore_original_space
from volio import Annotation, StationInfo
from voxelgrid import VoxelGrid, KIND_BINARY, KIND_LABEL, KIND_PROBABILITY, replay


def test_cohort_detection():
    """Ten phantoms with five nodes each, evaluated at a fixed threshold"""
    print("Testing cohort detection metrics...")

    work_dir = tempfile.mkdtemp()
    try:
        configs = {
            'perfect': ProbabilityQuality(),
            'degraded': ProbabilityQuality(drop_ids=(1, 2), fp_blobs=3, seed=8),
        }
        manifest = load_manifest(make_cohort(work_dir, n_patients=10, seed=1, n_nodes=5, configs=configs))
        report = run_cross_validation(manifest, CVConfig(folds=5, seed=3, pt=0.5))

        perfect = report.results['perfect'].total
        assert perfect.n_gt == 50
        assert perfect.recall_global == 1.0
        assert perfect.recall_pw_mean == 1.0
        assert perfect.fppp_mean == 0.0
        assert perfect.dice_mean >= 0.99

        degraded = report.results['degraded'].total
        assert abs(degraded.recall_global - 0.6) < 1e-12
        assert abs(degraded.recall_pw_mean - 0.6) < 1e-12
        assert degraded.recall_pw_std == 0.0
        assert degraded.fppp_mean == 3.0
        assert report.best_config == 'perfect'
    finally:
        shutil.rmtree(work_dir)

    print("✓ Perfect maps find every node; degraded maps find 60% with 3 FPs each")


def test_clustered_scene():
    """Seven touching annotations count as three nodes"""
    print("\nTesting a clustered scene...")

    labels = np.zeros((32, 16, 16), dtype=np.uint16)
    labels[2:5, 4:8, 4:8] = 1
    labels[5:8, 4:8, 4:8] = 2
    labels[8:10, 4:8, 4:8] = 3
    labels[14:17, 4:7, 4:7] = 4
    labels[17:20, 7:10, 7:10] = 5
    labels[24:27, 8:12, 8:12] = 6
    labels[27:29, 8:12, 8:12] = 7
    stations = {i: StationInfo(i, ('4',), '4') for i in range(1, 8)}
    ann = Annotation(VoxelGrid(labels, kind=KIND_LABEL), stations)

    _, gts = cluster_ground_truth(ann, 26)
    gts.measure()
    prob = VoxelGrid((labels != 0).astype(np.float32), kind=KIND_PROBABILITY)
    metrics, outcomes = evaluate_patient(prob, gts, 0.5)
    assert (metrics.tp, metrics.fn, metrics.fp) == (3, 0, 0)
    assert metrics.dice_patient == 1.0
    assert len(outcomes) == 3

    # predicting only the first member of each group still detects the cluster
    partial = VoxelGrid(np.isin(labels, [1, 4, 6]).astype(np.float32), kind=KIND_PROBABILITY)
    metrics, _ = evaluate_patient(partial, gts, 0.5)
    assert (metrics.tp, metrics.fn, metrics.fp) == (3, 0, 0)

    print("✓ Clustered scene scores three true positives")


def _round_trip_spec():
    return PhantomSpec(
        dims=(64, 64, 48),
        lungs=[EllipsoidSpec((18.0, 32.0, 24.0), (8.0, 14.0, 18.0)),
               EllipsoidSpec((46.0, 32.0, 24.0), (8.0, 14.0, 18.0))],
        nodes=[NodeSpec(1, (32.0, 24.0, 20.0), (6.0, 5.0, 6.0), ('7',)),
               NodeSpec(2, (32.0, 40.0, 28.0), (5.0, 7.0, 5.0), ('4',)),
               NodeSpec(3, (26.0, 32.0, 14.0), (5.0, 5.0, 5.0), ('10',))],
        seed=12,
    )


def test_geometry_round_trip():
    """Ground truth pushed into network space and restored keeps its shape"""
    print("\nTesting geometry round trip...")

    spec = _round_trip_spec()
    ct, ann = generate_phantom(spec)
    truth = ann.labels.values != 0
    region = lung_mask_of(spec).values.astype(bool) | truth
    region_mask = VoxelGrid(region.astype(np.uint8), spacing=ct.spacing, kind=KIND_BINARY)

    for mode in (MODE_FULLVOL, MODE_SLAB):
        _, record = preprocess(ct, PreprocessConfig(mode=mode), region_mask)
        as_prob = VoxelGrid(truth.astype(np.float32), spacing=ct.spacing, origin=ct.origin, kind=KIND_PROBABILITY)
        network_space = replay(as_prob, record)
        assert network_space.dims == record.output_dims

        restored = restore_original_space(network_space, record)
        assert restored.dims == ct.dims
        score = dice(threshold(restored, 0.5), truth)
        assert score >= 0.95, f"{mode}: round-trip Dice {score:.4f}"

    print("✓ Round trip keeps Dice >= 0.95 in both modes")


def main():
    """Run all tests"""
    print("=" * 60)
    print("END-TO-END TESTS")
    print("=" * 60)

    try:
        test_cohort_detection()
        test_clustered_scene()
        test_geometry_round_trip()

        print("\n" + "=" * 60)
        print("ALL TESTS PASSED! ✓")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ TEST FAILED: {e}")
        raise


if __name__ == '__main__':
    main()
