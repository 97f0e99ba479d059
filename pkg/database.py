"""
Database module for the run registry
Records simulation and calibration runs and every calibration evaluation
"""

import os
import sqlite3
from datetime import datetime
from typing import Dict, List, Optional

# Database configuration
DATABASE = os.environ.get('VISCOMPM_DB', 'viscompm.db')

def get_db_connection():
    """Get a database connection."""
    conn = sqlite3.connect(DATABASE)
    conn.row_factory = sqlite3.Row  # This enables column access by name
    return conn

def init_database():
    """Initialize the database with required tables."""
    db_conn = get_db_connection()

    db_conn.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            kind TEXT NOT NULL,
            output_dir TEXT NOT NULL,
            config_json TEXT NOT NULL,
            status TEXT NOT NULL,
            message TEXT,
            created_at TEXT NOT NULL
        )
    ''')

    db_conn.execute('''
        CREATE TABLE IF NOT EXISTS evaluations (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            eval_index INTEGER NOT NULL,
            theta_json TEXT NOT NULL,
            loss REAL,
            FOREIGN KEY (run_id) REFERENCES runs (id)
        )
    ''')

    db_conn.commit()
    db_conn.close()

def insert_run(kind: str, output_dir: str, config_json: str) -> Optional[int]:
    """Insert a new run in 'running' state; returns its id, or None on failure."""
    conn = get_db_connection()
    try:
        cursor = conn.execute('''
            INSERT INTO runs (kind, output_dir, config_json, status, created_at)
            VALUES (?, ?, ?, ?, ?)
        ''', (kind, output_dir, config_json, 'running', datetime.now().isoformat()))
        conn.commit()
        run_id = cursor.lastrowid
        conn.close()
        return run_id
    except sqlite3.Error:
        conn.close()
        return None

def update_run_status(run_id: int, status: str, message: str) -> bool:
    """Set the final status ('done' or 'failed') and message of a run."""
    conn = get_db_connection()
    try:
        conn.execute('''
            UPDATE runs SET status = ?, message = ? WHERE id = ?
        ''', (status, message, run_id))
        conn.commit()
        conn.close()
        return True
    except sqlite3.Error:
        conn.close()
        return False

def insert_evaluation(run_id: int, eval_index: int, theta_json: str, loss: float) -> bool:
    """Insert one calibration evaluation. Failed simulations are stored with a NULL loss."""
    conn = get_db_connection()
    try:
        conn.execute('''
            INSERT INTO evaluations (run_id, eval_index, theta_json, loss)
            VALUES (?, ?, ?, ?)
        ''', (run_id, eval_index, theta_json, loss if loss != float('inf') else None))
        conn.commit()
        conn.close()
        return True
    except sqlite3.Error:
        conn.close()
        return False

def get_all_runs() -> List[Dict]:
    """Get all runs, newest first."""
    conn = get_db_connection()
    runs = conn.execute('SELECT * FROM runs ORDER BY id DESC').fetchall()
    conn.close()
    return [dict(run) for run in runs]

def get_run_by_id(run_id: int) -> Optional[Dict]:
    """Get a specific run by ID."""
    conn = get_db_connection()
    run = conn.execute('SELECT * FROM runs WHERE id = ?', (run_id,)).fetchone()
    conn.close()
    return dict(run) if run else None

def get_run_evaluations(run_id: int) -> List[Dict]:
    """Get the evaluations of a calibration run in evaluation order."""
    conn = get_db_connection()
    rows = conn.execute('''
        SELECT eval_index, theta_json, loss FROM evaluations
        WHERE run_id = ? ORDER BY eval_index
    ''', (run_id,)).fetchall()
    conn.close()
    return [dict(row) for row in rows]
