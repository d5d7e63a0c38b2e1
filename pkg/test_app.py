#!/usr/bin/env python3
"""
Test script for the report browser routes
"""

import os
import shutil
import tempfile

from app import app
from config.config_manager import get_config_manager
from harness import CVConfig, load_manifest, run_cross_validation, write_cv_report
from phantom import make_cohort


def _results_with_run(work_dir):
    manifest_path = make_cohort(os.path.join(work_dir, 'cohort'), n_patients=3, seed=2, n_nodes=2)
    report = run_cross_validation(load_manifest(manifest_path), CVConfig(folds=3, pt=0.5))
    results = os.path.join(work_dir, 'results')
    write_cv_report(report, os.path.join(results, 'run1'))
    os.makedirs(os.path.join(results, 'empty'))
    return results


def test_health():
    print("Testing health endpoint...")

    work_dir = tempfile.mkdtemp()
    try:
        client = app.test_client()
        app.config['RESULTS_FOLDER'] = work_dir
        response = client.get('/health')
        assert response.status_code == 200
        assert response.get_json()['status'] == 'healthy'

        app.config['RESULTS_FOLDER'] = os.path.join(work_dir, 'missing')
        response = client.get('/health')
        assert response.status_code == 503
        assert response.get_json()['status'] == 'degraded'
    finally:
        shutil.rmtree(work_dir)

    print("✓ Health endpoint reports results folder state")


def test_report_routes():
    print("\nTesting report routes...")

    work_dir = tempfile.mkdtemp()
    try:
        app.config['RESULTS_FOLDER'] = _results_with_run(work_dir)
        client = app.test_client()

        runs = client.get('/').get_json()['runs']
        assert [r['run_id'] for r in runs] == ['run1']
        assert runs[0]['best_config'] == 'perfect'
        assert runs[0]['n_patients'] == 3 and runs[0]['folds'] == 3
        assert runs[0]['recall_pw_mean'] == 1.0

        response = client.get('/api/report/run1')
        assert response.status_code == 200
        assert response.get_json()['configurations']['perfect']['total']['n_gt'] == 6
        assert client.get('/api/report/nope').status_code == 404
        assert client.get('/api/report/empty').status_code == 404

        response = client.get('/api/figures/run1')
        assert response.status_code == 200
        figures = response.get_json()
        assert 'station_recall' in figures and 'folds_perfect' in figures
        assert figures['station_recall']['data'][0]['type'] == 'bar'

        response = client.get('/download/run1/comparison')
        assert response.status_code == 200
        assert response.data.decode('utf-8').startswith('Experiment,PT')
        response.close()
        assert client.get('/download/run1/bogus').status_code == 400
        assert client.get('/download/run1/figures').status_code == 404
        assert client.get('/download/nope/json').status_code == 404
    finally:
        shutil.rmtree(work_dir)

    print("✓ Report routes serve finished runs")


def test_read_only_settings():
    print("\nTesting read-only browser settings...")

    assert app.secret_key is None
    assert app.config['MAX_CONTENT_LENGTH'] is None
    assert sorted(get_config_manager().get_section('web')) == ['results_folder']
    assert all(rule.methods <= {'GET', 'HEAD', 'OPTIONS'} for rule in app.url_map.iter_rules())

    print("✓ No session key, upload limit or upload route")


def main():
    """Run all tests"""
    print("=" * 60)
    print("REPORT BROWSER TESTS")
    print("=" * 60)

    try:
        test_health()
        test_report_routes()
        test_read_only_settings()

        print("\n" + "=" * 60)
        print("ALL TESTS PASSED! ✓")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ TEST FAILED: {e}")
        raise


if __name__ == '__main__':
    main()
