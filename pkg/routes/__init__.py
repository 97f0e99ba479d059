"""
Routes Package - Initialize all route blueprints
"""

from .run_routes import runs_bp
from .image_routes import images_bp

def register_blueprints(app):
    """Register all route blueprints with the Flask app."""
    app.register_blueprint(runs_bp)
    app.register_blueprint(images_bp)
