"""
Run Routes - JSON API over the run registry
"""

import json
import os

from flask import Blueprint, jsonify
from database import get_all_runs, get_run_by_id, get_run_evaluations
from run_service import run_summary

runs_bp = Blueprint('runs', __name__, url_prefix='/api/runs')

def _public(run):
    run = dict(run)
    run['config'] = json.loads(run.pop('config_json'))
    return run

@runs_bp.route('')
def list_runs():
    """List every recorded run, newest first."""
    runs = [_public(run) for run in get_all_runs()]
    return jsonify({'runs': runs, 'count': len(runs)})

@runs_bp.route('/<int:run_id>')
def get_run(run_id):
    """
    Registry record of one run.
    Finished simulations also carry their manifest and diagnostics summary.
    """
    run = get_run_by_id(run_id)
    if not run:
        return jsonify({'error': f'Run {run_id} not found'}), 404

    result = _public(run)
    result['summary'] = None
    if run['kind'] == 'simulate' and os.path.exists(os.path.join(run['output_dir'], 'manifest.json')):
        result['summary'] = run_summary(run['output_dir'])
    return jsonify(result)

@runs_bp.route('/<int:run_id>/evaluations')
def get_evaluations(run_id):
    """Calibration evaluations in order; failed simulations have a null loss."""
    if not get_run_by_id(run_id):
        return jsonify({'error': f'Run {run_id} not found'}), 404

    evaluations = [
        {'index': row['eval_index'], 'theta': json.loads(row['theta_json']), 'loss': row['loss']}
        for row in get_run_evaluations(run_id)
    ]
    return jsonify({'run_id': run_id, 'evaluations': evaluations, 'count': len(evaluations)})
