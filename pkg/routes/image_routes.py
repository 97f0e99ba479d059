"""
Image Routes - rasterized frames and space-time slices as PGM
"""

import os

from flask import Blueprint, Response, jsonify, request
from database import get_run_by_id
from frames import encode_pgm
from run_service import render_frame_pgm, render_slice
from tensor3 import ViscompmError

images_bp = Blueprint('images', __name__, url_prefix='/api/runs')

PGM_MIMETYPE = 'image/x-portable-graymap'

def _finished_simulation(run_id):
    """Output directory of a finished simulation run, or an error response."""
    run = get_run_by_id(run_id)
    if not run:
        return None, (jsonify({'error': f'Run {run_id} not found'}), 404)
    if run['kind'] != 'simulate' or run['status'] != 'done':
        return None, (jsonify({'error': f'Run {run_id} is not a finished simulation'}), 409)
    return run['output_dir'], None

@images_bp.route('/<int:run_id>/frames/<int:frame>.pgm')
def frame_image(run_id, frame):
    """Orthographic rasterization of one frame dump."""
    output_dir, error = _finished_simulation(run_id)
    if error:
        return error
    if not os.path.exists(os.path.join(output_dir, 'frame_%04d.bin' % frame)):
        return jsonify({'error': f'Run {run_id} has no frame {frame}'}), 404
    try:
        data = render_frame_pgm(output_dir, frame)
    except ViscompmError as e:
        return jsonify({'error': str(e)}), 422
    return Response(data, mimetype=PGM_MIMETYPE)

@images_bp.route('/<int:run_id>/slice.pgm')
def slice_image(run_id):
    """Space-time slice at image row `row` (time runs down the image)."""
    output_dir, error = _finished_simulation(run_id)
    if error:
        return error
    row = request.args.get('row', type=int)
    if row is None:
        return jsonify({'error': 'Query parameter row is required'}), 400
    try:
        image = render_slice(output_dir, row)
    except ViscompmError as e:
        return jsonify({'error': str(e)}), 400
    return Response(encode_pgm(image), mimetype=PGM_MIMETYPE)
