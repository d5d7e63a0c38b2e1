#!/usr/bin/env python3
"""
Test script for the voxel grid core: geometry operations and their records
"""

import numpy as np

from errors import InvalidArgumentError, OutOfBoundsError
from voxelgrid import (
    BoundingBox, GeometryRecord, NormalizeStep, VoxelGrid,
    KIND_BINARY, KIND_CT, KIND_LABEL, KIND_PROBABILITY,
    clip_normalize, crop, isotropic_dims, paste, replay, resample_isotropic, resize,
)


def test_grid_validation():
    """Kinds are validated and cast to their storage dtype"""
    print("Testing grid validation...")

    ct = VoxelGrid(np.zeros((4, 3, 2), dtype=np.int32), spacing=(0.5, 0.5, 2.0), kind=KIND_CT)
    assert ct.values.dtype == np.int16
    assert ct.dims == (4, 3, 2)

    prob = VoxelGrid(np.full((2, 2, 2), 0.5, dtype=np.float64), kind=KIND_PROBABILITY)
    assert prob.values.dtype == np.float32

    binary = VoxelGrid(np.ones((2, 2, 2), dtype=bool), kind=KIND_BINARY)
    assert binary.values.dtype == np.uint8

    for bad_values, kind in [
        (np.full((2, 2, 2), 1.5), KIND_PROBABILITY),
        (np.full((2, 2, 2), 2), KIND_BINARY),
        (np.full((2, 2, 2), -1), KIND_LABEL),
        (np.full((2, 2, 2), 40000), KIND_CT),
        (np.zeros((2, 2)), KIND_PROBABILITY),
    ]:
        try:
            VoxelGrid(bad_values, kind=kind)
            assert False, f"expected rejection for kind {kind}"
        except InvalidArgumentError:
            pass

    try:
        VoxelGrid(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))
        assert False, "expected rejection of zero spacing"
    except InvalidArgumentError:
        pass

    print("✓ Grid validation works")


def test_isotropic_dims():
    """Reference CT shape maps onto the 1 mm lattice with half-up rounding"""
    print("\nTesting isotropic dims...")

    assert isotropic_dims((512, 512, 767), (0.68, 0.68, 0.5), 1.0) == (348, 348, 384)
    assert isotropic_dims((1, 1, 1), (0.2, 0.2, 0.2), 1.0) == (1, 1, 1)
    assert isotropic_dims((10, 10, 3), (1.0, 1.0, 0.5), 1.0) == (10, 10, 2)

    print("✓ Isotropic dims are correct")


def test_resample_identity_and_constant():
    """1 mm input is unchanged; constant grids stay constant"""
    print("\nTesting isotropic resampling...")

    rng = np.random.default_rng(3)
    ct = VoxelGrid(rng.integers(-1000, 1000, size=(6, 5, 4)), kind=KIND_CT)
    out, step = resample_isotropic(ct, 1.0)
    assert np.array_equal(out.values, ct.values)
    assert step.new_dims == ct.dims

    const_ct = VoxelGrid(np.full((20, 20, 9), 40), spacing=(0.7, 0.7, 2.5), kind=KIND_CT)
    out, step = resample_isotropic(const_ct, 1.0)
    assert out.dims == (14, 14, 23)
    assert out.spacing == (1.0, 1.0, 1.0)
    assert np.all(out.values == 40)

    const_prob = VoxelGrid(np.full((9, 7, 5), 0.3), spacing=(0.5, 0.8, 3.0))
    out, _ = resample_isotropic(const_prob, 1.0)
    assert np.max(np.abs(out.values - np.float32(0.3))) < 1e-6

    for bad in (0.0, -1.0):
        try:
            resample_isotropic(const_prob, bad)
            assert False, "expected rejection of non-positive spacing"
        except InvalidArgumentError:
            pass

    print("✓ Isotropic resampling works")


def test_resample_extent_and_labels():
    """Extent changes stay under one voxel and nearest resampling adds no labels"""
    print("\nTesting extent preservation and label resampling...")

    labels = np.zeros((30, 25, 11), dtype=np.uint16)
    labels[3:9, 4:10, 2:5] = 3
    labels[15:22, 10:20, 6:10] = 7
    grid = VoxelGrid(labels, spacing=(0.68, 0.68, 2.5), kind=KIND_LABEL)
    out, _ = resample_isotropic(grid, 1.0)

    for before, after in zip(grid.extent_mm(), out.extent_mm()):
        assert abs(before - after) < 1.0
    assert set(np.unique(out.values)) <= {0, 3, 7}
    assert {3, 7} <= set(np.unique(out.values))

    print("✓ Extent and labels preserved")


def test_clip_normalize():
    print("\nTesting clip normalization...")

    ct = VoxelGrid(np.array([-1000, -250, 125, 500, 3000]).reshape(5, 1, 1), kind=KIND_CT)
    out = clip_normalize(ct, -250, 500)
    assert out.kind == KIND_PROBABILITY
    assert np.allclose(out.values[:, 0, 0], [0.0, 0.0, 0.5, 1.0, 1.0])
    assert np.all(np.diff(out.values[:, 0, 0]) >= 0)

    try:
        clip_normalize(ct, 500, 500)
        assert False, "expected rejection of empty window"
    except InvalidArgumentError:
        pass

    print("✓ Clip normalization works")


def test_crop_and_paste():
    """Crop copies the box verbatim and paste restores it"""
    print("\nTesting crop and paste...")

    rng = np.random.default_rng(7)
    grid = VoxelGrid(rng.random((10, 8, 6)), spacing=(0.5, 0.5, 2.0), origin=(10.0, 20.0, 30.0))
    box = BoundingBox((2, 1, 3), (6, 5, 5))
    cropped, step = crop(grid, box)

    assert cropped.dims == (5, 5, 3)
    assert cropped.spacing == grid.spacing
    assert cropped.origin == (11.0, 20.5, 36.0)
    assert np.array_equal(cropped.values, grid.values[2:7, 1:6, 3:6])
    assert step.pre_dims == grid.dims

    host = paste(cropped, box, grid.dims)
    assert host.origin == grid.origin
    assert np.array_equal(host.values[box.slices()], grid.values[box.slices()])
    assert host.values.sum() == cropped.values.sum()

    try:
        crop(grid, BoundingBox((0, 0, 0), (10, 7, 5)))
        assert False, "expected out-of-bounds"
    except OutOfBoundsError:
        pass

    print("✓ Crop and paste work")


def test_resize():
    print("\nTesting resize...")

    grid = VoxelGrid(np.full((10, 20, 5), 0.25), spacing=(1.0, 1.0, 2.0))
    out, step = resize(grid, (20, 10, 5))
    assert out.dims == (20, 10, 5)
    assert np.allclose(out.spacing, (0.5, 2.0, 2.0))
    assert np.max(np.abs(out.values - np.float32(0.25))) < 1e-6

    same, _ = resize(grid, grid.dims)
    assert np.array_equal(same.values, grid.values)

    try:
        resize(grid, (0, 10, 5))
        assert False, "expected rejection of zero target dim"
    except InvalidArgumentError:
        pass

    print("✓ Resize works")


def test_record_serialization_and_replay():
    """Records replay forward to the processed dims and survive JSON"""
    print("\nTesting geometry records...")

    ct = VoxelGrid(np.full((40, 30, 12), 100), spacing=(0.8, 0.8, 2.0), kind=KIND_CT)
    record = GeometryRecord.for_grid(ct)
    g, step = resample_isotropic(ct, 1.0)
    record.append(step)
    g, step = crop(g, BoundingBox((2, 2, 1), (25, 20, 20)))
    record.append(step)
    g, step = resize(g, (16, 16, 10))
    record.append(step)
    record.append(NormalizeStep(-250.0, 500.0))

    assert record.forward_dims() == g.dims

    restored = GeometryRecord.from_dict(record.to_dict())
    assert restored.to_dict() == record.to_dict()
    assert restored.forward_dims() == g.dims

    mask = VoxelGrid(np.ones(ct.dims, dtype=np.uint8), spacing=ct.spacing, kind=KIND_BINARY)
    replayed = replay(mask, restored)
    assert replayed.dims == g.dims
    assert np.all(replayed.values == 1)

    try:
        replay(VoxelGrid(np.ones((3, 3, 3), dtype=np.uint8), kind=KIND_BINARY), record)
        assert False, "expected dims mismatch"
    except InvalidArgumentError:
        pass

    print("✓ Geometry records work")


def main():
    """Run all tests"""
    print("=" * 60)
    print("VOXEL GRID TESTS")
    print("=" * 60)

    try:
        test_grid_validation()
        test_isotropic_dims()
        test_resample_identity_and_constant()
        test_resample_extent_and_labels()
        test_clip_normalize()
        test_crop_and_paste()
        test_resize()
        test_record_serialization_and_replay()

        print("\n" + "=" * 60)
        print("ALL TESTS PASSED! ✓")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ TEST FAILED: {e}")
        raise


if __name__ == '__main__':
    main()
