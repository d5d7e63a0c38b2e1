#!/usr/bin/env python3
"""
Test script for volume, station sidecar and report I/O
"""

import os
import shutil
import tempfile

import nibabel as nib
import numpy as np

from errors import ConsistencyError, InvalidArgumentError, UnsupportedFormatError, VolumeFormatError
from volio import (
    Annotation, StationInfo, REPORT_COLUMNS,
    read_annotation, read_geometry, read_json, read_volume,
    write_annotation, write_geometry, write_json, write_report, write_volume,
)
from voxelgrid import (
    BoundingBox, GeometryRecord, VoxelGrid,
    KIND_BINARY, KIND_CT, KIND_LABEL, KIND_PROBABILITY, crop, resample_isotropic,
)


class _StaticReport:
    """Minimal report object exposing the two views write_report consumes"""

    def __init__(self, rows):
        self.rows = rows

    def csv_rows(self):
        return list(self.rows)

    def to_dict(self):
        return {'name': 'static', 'rows': self.rows}


def test_volume_round_trip():
    """Every supported kind survives write/read bit-exactly"""
    print("Testing volume round trip...")

    work_dir = tempfile.mkdtemp()
    try:
        rng = np.random.default_rng(11)
        grids = [
            VoxelGrid(rng.integers(-1024, 3000, size=(7, 6, 5)), spacing=(0.68, 0.68, 0.5),
                      origin=(-120.5, 33.0, 7.25), kind=KIND_CT),
            VoxelGrid(rng.random((5, 4, 3), dtype=np.float32), spacing=(1.0, 1.0, 2.0), kind=KIND_PROBABILITY),
            VoxelGrid(rng.integers(0, 2, size=(4, 4, 4)), kind=KIND_BINARY),
            VoxelGrid(rng.integers(0, 400, size=(3, 5, 2)), kind=KIND_LABEL),
        ]
        for i, grid in enumerate(grids):
            for ext in ('.nii', '.nii.gz'):
                path = os.path.join(work_dir, f"grid_{i}{ext}")
                write_volume(grid, path)
                back = read_volume(path)
                assert back.kind == grid.kind
                assert back.values.dtype == grid.values.dtype
                assert np.array_equal(back.values, grid.values)
                assert np.allclose(back.spacing, grid.spacing)
                assert np.allclose(back.origin, grid.origin)

        tiny = VoxelGrid(np.zeros((1, 1, 1), dtype=np.uint8), kind=KIND_BINARY)
        path = os.path.join(work_dir, "tiny.nii")
        write_volume(tiny, path)
        assert read_volume(path).dims == (1, 1, 1)

        leftovers = [name for name in os.listdir(work_dir) if name.startswith('.')]
        assert leftovers == []

        print("✓ Volume round trip works")
    finally:
        shutil.rmtree(work_dir)


def test_malformed_and_unsupported_volumes():
    print("\nTesting malformed and unsupported volumes...")

    work_dir = tempfile.mkdtemp()
    try:
        garbage = os.path.join(work_dir, "garbage.nii")
        with open(garbage, 'wb') as f:
            f.write(b"not a nifti file at all")
        try:
            read_volume(garbage)
            assert False, "expected format error for garbage"
        except VolumeFormatError:
            pass

        full = os.path.join(work_dir, "full.nii")
        write_volume(VoxelGrid(np.ones((20, 20, 20), dtype=np.float32)), full)
        truncated = os.path.join(work_dir, "truncated.nii")
        with open(full, 'rb') as f:
            payload = f.read()
        with open(truncated, 'wb') as f:
            f.write(payload[:len(payload) // 2])
        try:
            read_volume(truncated)
            assert False, "expected format error for truncated file"
        except VolumeFormatError:
            pass

        float64_path = os.path.join(work_dir, "double.nii")
        nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float64), np.eye(4)), float64_path)
        try:
            read_volume(float64_path)
            assert False, "expected unsupported dtype"
        except UnsupportedFormatError:
            pass

        sheared = np.eye(4)
        sheared[0, 1] = 0.3
        shear_path = os.path.join(work_dir, "shear.nii")
        nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.int16), sheared), shear_path)
        try:
            read_volume(shear_path)
            assert False, "expected unsupported affine"
        except UnsupportedFormatError:
            pass

        try:
            read_volume(os.path.join(work_dir, "missing.nii"))
            assert False, "expected missing file"
        except FileNotFoundError:
            pass

        print("✓ Malformed and unsupported volumes rejected")
    finally:
        shutil.rmtree(work_dir)


def test_untagged_volume_kind_from_dtype():
    print("\nTesting kind inference...")

    work_dir = tempfile.mkdtemp()
    try:
        path = os.path.join(work_dir, "labels.nii.gz")
        nib.save(nib.Nifti1Image(np.arange(8, dtype=np.uint16).reshape(2, 2, 2), np.eye(4)), path)
        assert read_volume(path).kind == KIND_LABEL
        print("✓ Kind inferred from dtype")
    finally:
        shutil.rmtree(work_dir)


def test_station_info_validation():
    print("\nTesting station info validation...")

    info = StationInfo(3, ('7', 4), '4', 'right')
    assert info.stations == ('4', '7')
    assert info.primaries == frozenset(['4'])
    assert StationInfo.from_dict(info.to_dict()) == info

    sub = StationInfo(5, ('3P', '3a'), '3p')
    assert sub.stations == ('3a', '3p')

    for kwargs in [
        dict(label_id=1, stations=('4',), primary='7'),
        dict(label_id=0, stations=('4',), primary='4'),
        dict(label_id=1, stations=('15',), primary='15'),
        dict(label_id=1, stations=(), primary='4'),
    ]:
        try:
            StationInfo(**kwargs)
            assert False, f"expected rejection of {kwargs}"
        except InvalidArgumentError:
            pass

    print("✓ Station info validation works")


def test_annotation_consistency():
    """Grid labels and sidecar entries must match one-to-one"""
    print("\nTesting annotation consistency...")

    work_dir = tempfile.mkdtemp()
    try:
        values = np.zeros((6, 6, 6), dtype=np.uint16)
        values[0:2, 0:2, 0:2] = 3
        values[4:6, 4:6, 4:6] = 4
        labels = VoxelGrid(values, kind=KIND_LABEL)
        annotation = Annotation(labels, {3: StationInfo(3, ('4', '7'), '4', 'right'),
                                         4: StationInfo(4, ('10',), '10', 'left')})
        label_path = os.path.join(work_dir, "gt.nii.gz")
        meta_path = os.path.join(work_dir, "gt.json")
        write_annotation(annotation, label_path, meta_path)

        back = read_annotation(label_path, meta_path)
        assert back.label_ids() == [3, 4]
        assert back.stations[3].stations == ('4', '7')

        sidecar = read_json(meta_path)
        sidecar['labels'] = [entry for entry in sidecar['labels'] if entry['id'] != 4]
        sidecar['labels'].append({'id': 9, 'stations': ['2'], 'primary': '2'})
        write_json(sidecar, meta_path)
        try:
            read_annotation(label_path, meta_path)
            assert False, "expected consistency error"
        except ConsistencyError as e:
            assert e.offending == [4]
            assert '4' in str(e)

        print("✓ Annotation consistency enforced")
    finally:
        shutil.rmtree(work_dir)


def test_geometry_sidecar():
    print("\nTesting geometry sidecar...")

    work_dir = tempfile.mkdtemp()
    try:
        ct = VoxelGrid(np.zeros((10, 10, 10), dtype=np.int16), spacing=(0.5, 0.5, 2.0), kind=KIND_CT)
        record = GeometryRecord.for_grid(ct)
        grid, step = resample_isotropic(ct)
        record.append(step)
        grid, step = crop(grid, BoundingBox((0, 0, 0), (3, 3, 9)))
        record.append(step)

        path = os.path.join(work_dir, "record.json")
        write_geometry(record, path)
        back = read_geometry(path)
        assert back.forward_dims() == grid.dims
        assert back.to_dict() == record.to_dict()

        print("✓ Geometry sidecar works")
    finally:
        shutil.rmtree(work_dir)


def test_report_writing():
    """CSV has fixed columns and identical input writes identical bytes"""
    print("\nTesting report writing...")

    work_dir = tempfile.mkdtemp()
    try:
        empty_csv = os.path.join(work_dir, "empty.csv")
        write_report(_StaticReport([]), empty_csv, 'csv')
        with open(empty_csv, 'r', encoding='utf-8') as f:
            assert f.read() == ','.join(REPORT_COLUMNS) + '\n'

        rows = [
            {'patient_id': 'p1', 'stratum': 'all:all', 'PT': 0.5, 'dice': 0.8, 'dice_tp': 0.75,
             'gt_perc': 90.0, 'recall_num': 2, 'recall_den': 3, 'fppp': 1.0},
            {'patient_id': 'p1', 'stratum': 'ge10:relevant', 'PT': 0.5, 'dice': None,
             'dice_tp': float('nan'), 'gt_perc': float('nan'), 'recall_num': 0, 'recall_den': 0,
             'fppp': None},
        ]
        first = os.path.join(work_dir, "a.csv")
        second = os.path.join(work_dir, "b.csv")
        write_report(_StaticReport(rows), first, 'csv')
        write_report(_StaticReport(rows), second, 'csv')
        with open(first, 'rb') as a, open(second, 'rb') as b:
            content = a.read()
            assert content == b.read()
        lines = content.decode('utf-8').splitlines()
        assert lines[1] == 'p1,all:all,0.5,0.8,0.75,90,2,3,1'
        assert lines[2] == 'p1,ge10:relevant,0.5,,,,0,0,'

        json_path = os.path.join(work_dir, "report.json")
        write_report(_StaticReport(rows), json_path, 'json')
        data = read_json(json_path)
        assert data['rows'][1]['dice_tp'] is None
        assert data['schema'] == 'report/1'

        try:
            write_report(_StaticReport(rows), json_path, 'xml')
            assert False, "expected unknown format"
        except InvalidArgumentError:
            pass

        try:
            write_report(_StaticReport(rows), os.path.join(work_dir, "no_dir", "r.csv"), 'csv')
            assert False, "expected I/O error"
        except OSError:
            pass

        print("✓ Report writing works")
    finally:
        shutil.rmtree(work_dir)


def main():
    """Run all tests"""
    print("=" * 60)
    print("VOLUME I/O TESTS")
    print("=" * 60)

    try:
        test_volume_round_trip()
        test_malformed_and_unsupported_volumes()
        test_untagged_volume_kind_from_dtype()
        test_station_info_validation()
        test_annotation_consistency()
        test_geometry_sidecar()
        test_report_writing()

        print("\n" + "=" * 60)
        print("ALL TESTS PASSED! ✓")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ TEST FAILED: {e}")
        raise


if __name__ == '__main__':
    main()
