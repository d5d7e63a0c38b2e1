#!/usr/bin/env python3
"""
Lymph-Node Toolkit Report Browser
Read-only web access to finished cross-validation runs: report JSON, plotly
figures and table downloads. Each run is a directory under the results folder
written by `ln_toolkit.py crossval -o <results>/<run_id>`.
"""

import os
import logging
from datetime import datetime

from flask import Flask, jsonify, send_file
from werkzeug.utils import secure_filename

from config.config_manager import get_config_manager
from errors import IO_ERRORS
from report_figures import build_figures, figures_payload
from volio import read_json, TOOLKIT_VERSION

app = Flask(__name__)

config = get_config_manager()
app.config['RESULTS_FOLDER'] = config.get('web', 'results_folder')

if not app.debug:
    logging.basicConfig(level=logging.INFO)
    app.logger.setLevel(logging.INFO)
    app.logger.info('Lymph-node report browser startup')

# download kind -> file inside a run directory
DOWNLOADS = {
    'json': ('report.json', 'application/json'),
    'figures': ('figures.json', 'application/json'),
    'patients': ('patients.csv', 'text/csv'),
    'comparison': ('comparison.csv', 'text/csv'),
    'size_station': ('size_station.csv', 'text/csv'),
    'benchmark': ('benchmark.csv', 'text/csv'),
    'station_recall_all': ('station_recall_all.csv', 'text/csv'),
    'station_recall_ge10': ('station_recall_ge10.csv', 'text/csv'),
}


def results_folder():
    return app.config['RESULTS_FOLDER']


def run_dir(run_id):
    """Directory of a run, or None for unsafe or unknown ids"""
    safe = secure_filename(run_id)
    if not safe or safe != run_id:
        return None
    path = os.path.join(results_folder(), safe)
    if not os.path.isfile(os.path.join(path, 'report.json')):
        return None
    return path


def load_report(run_id):
    path = run_dir(run_id)
    if path is None:
        return None
    return read_json(os.path.join(path, 'report.json'))


def run_summary(run_id, report):
    best = report.get('best_config')
    total = report.get('configurations', {}).get(best, {}).get('total', {})
    return {
        'run_id': run_id,
        'best_config': best,
        'configurations': list(report.get('configurations', {})),
        'n_patients': len(report.get('split', {}).get('assignment', {})),
        'folds': report.get('split', {}).get('k'),
        'recall_pw_mean': total.get('recall_pw_mean'),
        'fppp_mean': total.get('fppp_mean'),
        'toolkit_version': report.get('toolkit_version'),
    }


@app.route('/health')
def health_check():
    """Health check endpoint for Render.com and monitoring"""
    folder = results_folder()
    readable = os.path.isdir(folder) and os.access(folder, os.R_OK)
    status = {
        'status': 'healthy' if readable else 'degraded',
        'timestamp': datetime.now().isoformat(),
        'results_dir_readable': readable,
        'toolkit_version': TOOLKIT_VERSION,
    }
    if not readable:
        status['warning'] = f"Results folder {folder} is not readable"
    return jsonify(status), 200 if readable else 503


@app.route('/')
def index():
    """Run index, newest first"""
    runs = []
    folder = results_folder()
    if os.path.isdir(folder):
        for name in os.listdir(folder):
            try:
                report = load_report(name)
            except IO_ERRORS as e:
                app.logger.warning(f"Skipping run {name}: {e}")
                continue
            if report is None:
                continue
            summary = run_summary(name, report)
            summary['modified'] = datetime.fromtimestamp(
                os.path.getmtime(os.path.join(folder, name, 'report.json'))).isoformat()
            runs.append(summary)
    runs.sort(key=lambda r: (r['modified'], r['run_id']), reverse=True)
    return jsonify({'runs': runs})


@app.route('/api/report/<run_id>')
def get_report(run_id):
    try:
        report = load_report(run_id)
    except IO_ERRORS as e:
        app.logger.error(f"Unreadable report {run_id}: {e}")
        return jsonify({'error': str(e)}), 500
    if report is None:
        return jsonify({'error': f"Run not found: {run_id}"}), 404
    return jsonify(report)


@app.route('/api/figures/<run_id>')
def get_figures(run_id):
    path = run_dir(run_id)
    if path is None:
        return jsonify({'error': f"Run not found: {run_id}"}), 404
    try:
        cached = os.path.join(path, 'figures.json')
        if os.path.isfile(cached):
            return jsonify(read_json(cached))
        return jsonify(figures_payload(build_figures(read_json(os.path.join(path, 'report.json')))))
    except IO_ERRORS as e:
        app.logger.error(f"Figures failed for {run_id}: {e}")
        return jsonify({'error': str(e)}), 500


@app.route('/download/<run_id>/<kind>')
def download_file(run_id, kind):
    if kind not in DOWNLOADS:
        return jsonify({'error': 'Invalid file type'}), 400
    path = run_dir(run_id)
    if path is None:
        return jsonify({'error': f"Run not found: {run_id}"}), 404
    filename, mimetype = DOWNLOADS[kind]
    file_path = os.path.join(path, filename)
    if not os.path.isfile(file_path):
        return jsonify({'error': f"{filename} not present for run {run_id}"}), 404
    return send_file(os.path.abspath(file_path), mimetype=mimetype, as_attachment=True,
                     download_name=f"{run_id}_{filename}")


if __name__ == '__main__':
    # Get port from environment variable (for Render.com) or default to 5000
    port = int(os.environ.get('PORT', 5000))
    debug_mode = os.environ.get('FLASK_DEBUG', 'False').lower() == 'true'

    print(f"Starting report browser on port {port} with debug={debug_mode}")
    app.run(host='0.0.0.0', port=port, debug=debug_mode)
