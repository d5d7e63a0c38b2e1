#!/usr/bin/env python3
"""
Test script for preprocessing, slab decomposition/stitching and ensembling
"""

import numpy as np

from errors import InvalidArgumentError, NoLungFoundError
from pipeline import (
    PreprocessConfig, SlabSet, SlabSpec, MODE_FULLVOL, MODE_SLAB,
    ensemble_all, ensemble_max, extract_slabs, lung_bbox, preprocess,
    restore_original_space, stack_priors, stitch_slabs,
)
from voxelgrid import BoundingBox, VoxelGrid, KIND_BINARY, KIND_CT, KIND_PROBABILITY


def _chest_scene() -> VoxelGrid:
    """Air around a soft-tissue block holding two air-filled lungs"""
    values = np.full((40, 40, 20), -1000, dtype=np.int16)
    values[5:35, 5:35, :] = 40
    values[8:16, 10:30, 3:17] = -800
    values[22:32, 10:28, 4:18] = -800
    return VoxelGrid(values, kind=KIND_CT)


def test_slab_coverage_and_overlap():
    """Every depth is covered and consecutive slabs overlap by slab_size - stride"""
    print("Testing slab coverage...")

    for size in (32, 64):
        spec = SlabSpec(slab_size=size, stride=8)
        for depth in range(1, 201):
            starts = spec.starts(depth)
            assert starts == sorted(set(starts))
            covered = np.zeros(depth, dtype=bool)
            for z in starts:
                covered[z:z + size] = True
            assert covered.all(), f"depth {depth} not covered with slab size {size}"
            if depth >= size:
                assert starts[-1] == depth - size
                overlaps = [size - (b - a) for a, b in zip(starts, starts[1:])]
                for overlap in overlaps[:-1]:
                    assert overlap == size - 8
                for overlap in overlaps[-1:]:
                    assert overlap >= size - 8
            else:
                assert starts == [0]

    try:
        SlabSpec(slab_size=8, stride=16)
        assert False, "expected stride > slab size rejection"
    except InvalidArgumentError:
        pass

    print("✓ Slab coverage and overlap hold (24 and 56 shared slices)")


def test_stitch_reproduces_grid():
    """Slab views of one grid stitch back bit-for-bit, padded or not"""
    print("\nTesting slab stitching...")

    rng = np.random.default_rng(5)
    spec = SlabSpec(slab_size=32, stride=8)
    for depth in (1, 7, 31, 32, 33, 57, 100, 143):
        grid = VoxelGrid(rng.random((3, 2, depth), dtype=np.float32), spacing=(1.0, 1.0, 1.0))
        slab_set = extract_slabs(grid, spec)
        for slab in slab_set.slabs:
            assert slab.grid.dims == (3, 2, 32)
        if depth < 32:
            assert len(slab_set) == 1
            assert slab_set.slabs[0].valid_depth == depth
            assert np.all(slab_set.slabs[0].grid.values[:, :, depth:] == 0)
        stitched = stitch_slabs([slab.grid for slab in slab_set.slabs], slab_set)
        assert np.array_equal(stitched.values, grid.values)

    grid = VoxelGrid(rng.random((3, 2, 40), dtype=np.float32))
    slab_set = extract_slabs(grid, spec)
    from_disk = SlabSet.from_layout(slab_set.layout())
    assert from_disk.z_starts() == [0, 8]
    assert np.array_equal(stitch_slabs([slab.grid for slab in slab_set.slabs], from_disk).values, grid.values)
    try:
        stitch_slabs([slab.grid for slab in slab_set.slabs][:-1], slab_set)
        assert False, "expected count mismatch"
    except InvalidArgumentError:
        pass

    print("✓ Stitching is exact")


def test_ensemble_algebra():
    print("\nTesting ensemble algebra...")

    rng = np.random.default_rng(9)
    for _ in range(20):
        a, b, c = (VoxelGrid(rng.random((6, 5, 4), dtype=np.float32)) for _ in range(3))
        ab = ensemble_max(a, b)
        assert np.array_equal(ab.values, ensemble_max(b, a).values)
        assert np.array_equal(ensemble_max(ab, c).values, ensemble_max(a, ensemble_max(b, c)).values)
        assert np.array_equal(ensemble_max(a, a).values, a.values)
        assert np.all(ab.values >= a.values) and np.all(ab.values >= b.values)
        assert np.array_equal(ensemble_all([a, b, c]).values, ensemble_max(ab, c).values)

    try:
        ensemble_max(VoxelGrid(np.zeros((2, 2, 2))), VoxelGrid(np.zeros((2, 2, 3))))
        assert False, "expected geometry mismatch"
    except InvalidArgumentError:
        pass

    print("✓ Ensemble algebra holds")


def test_stack_priors():
    print("\nTesting prior stacking...")

    ct = VoxelGrid(np.full((4, 4, 4), 0.5))
    first = np.zeros((4, 4, 4), dtype=np.uint8)
    first[0, 0, 0] = 1
    second = np.zeros((4, 4, 4), dtype=np.uint8)
    second[3, 3, 3] = 1
    sample = stack_priors(ct, [VoxelGrid(first, kind=KIND_BINARY), VoxelGrid(second, kind=KIND_BINARY)])
    assert sample.n_channels == 2
    assert sample.channels[1].values.sum() == 2
    assert sample.to_array().shape == (2, 4, 4, 4)

    assert stack_priors(ct, []).n_channels == 1

    try:
        stack_priors(ct, [VoxelGrid(np.zeros((4, 4, 5), dtype=np.uint8), kind=KIND_BINARY)])
        assert False, "expected geometry mismatch"
    except InvalidArgumentError:
        pass

    print("✓ Prior stacking works")


def test_lung_bbox():
    print("\nTesting lung bounding box...")

    ct = _chest_scene()
    box = lung_bbox(ct)
    assert box == BoundingBox((8, 10, 3), (31, 29, 17))

    mask = np.zeros(ct.dims, dtype=np.uint8)
    mask[12:20, 11:15, 5:9] = 1
    assert lung_bbox(ct, VoxelGrid(mask, kind=KIND_BINARY)) == BoundingBox((12, 11, 5), (19, 14, 8))

    try:
        lung_bbox(ct, VoxelGrid(np.zeros(ct.dims, dtype=np.uint8), kind=KIND_BINARY))
        assert False, "expected empty mask failure"
    except NoLungFoundError:
        pass

    soft = VoxelGrid(np.full((10, 10, 10), 40, dtype=np.int16), kind=KIND_CT)
    try:
        lung_bbox(soft)
        assert False, "expected no lung"
    except NoLungFoundError:
        pass

    print("✓ Lung bounding box works")


def test_preprocess_and_restore():
    """Both modes log an invertible record; restoration lands on the source geometry"""
    print("\nTesting preprocess and restore...")

    ct = _chest_scene()
    for mode, expected in ((MODE_FULLVOL, (128, 128, 144)), (MODE_SLAB, (256, 192, 15))):
        cfg = PreprocessConfig(mode=mode)
        norm, record = preprocess(ct, cfg)
        assert norm.kind == KIND_PROBABILITY
        assert norm.dims == expected
        assert record.output_dims == expected
        assert 0.0 <= norm.values.min() and norm.values.max() <= 1.0

        again, _ = preprocess(ct, cfg)
        assert np.array_equal(again.values, norm.values)

        restored = restore_original_space(norm.with_values(np.ones(norm.dims, dtype=np.float32)), record)
        assert restored.dims == ct.dims
        assert restored.spacing == ct.spacing
        box = BoundingBox((8, 10, 3), (31, 29, 17))
        assert np.allclose(restored.values[box.slices()], 1.0)
        outside = np.ones(ct.dims, dtype=bool)
        outside[box.slices()] = False
        assert np.all(restored.values[outside] == 0)

        try:
            restore_original_space(VoxelGrid(np.zeros((4, 4, 4))), record)
            assert False, "expected record mismatch"
        except InvalidArgumentError:
            pass

    print("✓ Preprocess and restore work")


def main():
    """Run all tests"""
    print("=" * 60)
    print("PIPELINE TESTS")
    print("=" * 60)

    try:
        test_slab_coverage_and_overlap()
        test_stitch_reproduces_grid()
        test_ensemble_algebra()
        test_stack_priors()
        test_lung_bbox()
        test_preprocess_and_restore()

        print("\n" + "=" * 60)
        print("ALL TESTS PASSED! ✓")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ TEST FAILED: {e}")
        raise


if __name__ == '__main__':
    main()
