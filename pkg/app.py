"""
Flask report service for normalization experiments.

Serves finished run directories under SBN_REPORTS_DIR and runs new
experiments synchronously on request.
"""

import csv
import logging
import os
import re
from datetime import datetime

from flask import Flask, abort, current_app, jsonify, request, send_file

from errors import ErrorCode, NormError
from experiment.config import config_from_dict
from experiment.runner import run_experiment
from reporting.csv_writer import RUN_FILES, SUMMARY_FILE
from reporting.report_builder import compare_table

logging.basicConfig(level=os.environ.get("SBN_LOG_LEVEL", "INFO").upper())
logger = logging.getLogger(__name__)

RUN_NAME_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def reports_root() -> str:
    return os.path.abspath(current_app.config["REPORTS_DIR"])


def _run_dir(name: str) -> str:
    if not RUN_NAME_PATTERN.match(name):
        raise NormError(ErrorCode.INVALID_ARGUMENT, f"invalid run name {name!r}")
    return os.path.join(reports_root(), name)


def _list_runs():
    root = reports_root()
    if not os.path.isdir(root):
        return []
    return sorted(name for name in os.listdir(root)
                  if os.path.isfile(os.path.join(root, name, SUMMARY_FILE)))


def _read_summary(run_dir: str):
    with open(os.path.join(run_dir, SUMMARY_FILE), "r", newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    for row in rows:
        for key, value in row.items():
            if key != "method":
                row[key] = float(value)
    return rows


def create_app(reports_dir: str = None) -> Flask:
    flask_app = Flask(__name__)
    flask_app.config["REPORTS_DIR"] = reports_dir or os.environ.get("SBN_REPORTS_DIR", "./reports")
    return flask_app


app = create_app()


@app.errorhandler(NormError)
def norm_error(error: NormError):
    logger.error(f"Request failed: {error}")
    return jsonify({"success": False, "error": error.code.value, "message": error.message}), 400


@app.errorhandler(404)
def not_found_error(error):
    return jsonify({"success": False, "error": "not-found", "message": "resource not found"}), 404


@app.route("/api/health")
def health_check():
    """Health check endpoint."""
    return jsonify({
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "reports_dir": reports_root(),
        "runs": len(_list_runs()),
    })


@app.route("/api/reports")
def list_reports():
    return jsonify({"success": True, "runs": _list_runs()})


@app.route("/api/reports/<name>")
def get_report(name):
    run_dir = _run_dir(name)
    if not os.path.isfile(os.path.join(run_dir, SUMMARY_FILE)):
        abort(404)
    return jsonify({"success": True, "name": name, "summary": _read_summary(run_dir),
                    "files": [f for f in RUN_FILES if os.path.isfile(os.path.join(run_dir, f))]})


@app.route("/download/<name>/<filename>")
def download_file(name, filename):
    """Download one of a run's CSV or JSON files."""
    run_dir = _run_dir(name)
    if filename not in RUN_FILES:
        abort(404)
    path = os.path.join(run_dir, filename)
    if not os.path.isfile(path):
        logger.warning(f"Run file not found: {name}/{filename}")
        abort(404)
    return send_file(path, as_attachment=True, download_name=filename)


@app.route("/api/experiments", methods=["POST"])
def create_experiment():
    """Run an experiment config synchronously into SBN_REPORTS_DIR/<name>."""
    payload = request.get_json(silent=True)
    if not isinstance(payload, dict):
        raise NormError(ErrorCode.BAD_CONFIG, "request body must be a JSON config object")
    config = config_from_dict(payload)
    run_dir = _run_dir(config.name)
    logger.info(f"Starting experiment {config.name!r} into {run_dir}")
    report = run_experiment(config, out_dir=run_dir)
    text, _ = compare_table(report)
    return jsonify({"success": True, "name": config.name, "summary": _read_summary(run_dir),
                    "table": text})


if __name__ == "__main__":
    port = int(os.environ.get("PORT", 5000))
    logger.info(f"Serving reports from {os.path.abspath(app.config['REPORTS_DIR'])} on port {port}")
    app.run(host="0.0.0.0", port=port)
