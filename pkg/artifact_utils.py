#!/usr/bin/env python3
"""
Utility functions for run artifacts: output directories, JSON reports,
CSV tables and run manifests.
"""

import glob
import hashlib
import json
import logging
import os
import platform
import re
import time
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from constants import APP_VERSION, ARTIFACT_NAMES
from print_utils import print_warning

logger = logging.getLogger(__name__)


def sanitize_artifact_name(name):
    """Make a report name safe for the filesystem."""
    sanitized = re.sub(r'[<>:"/\\|?*\s]', '_', str(name))
    sanitized = re.sub(r'_+', '_', sanitized).strip('_') or "artifact"
    if len(sanitized) > 120:
        middle_hash = hashlib.md5(sanitized.encode()).hexdigest()[:8]
        sanitized = sanitized[:56] + '_' + middle_hash + '_' + sanitized[-56:]
    return sanitized


def ensure_out_dir(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def artifact_path(out_dir, key):
    """Path of a named artifact (see ARTIFACT_NAMES) inside ``out_dir``."""
    return os.path.join(out_dir, ARTIFACT_NAMES[key])


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def save_json(data, path):
    """Write ``data`` as indented JSON; numpy scalars and arrays are converted."""
    ensure_out_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def load_json(path):
    """
    Read a JSON artifact.

    Returns:
        The parsed data, or None when the file is missing or corrupted
    """
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, IOError, UnicodeDecodeError) as e:
        print_warning(f"Corrupted artifact {path}: {e}")
        return None


def save_csv(frame, path):
    ensure_out_dir(os.path.dirname(os.path.abspath(path)))
    pd.DataFrame(frame).to_csv(path, index=False)
    return path


def save_text(text, path):
    ensure_out_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def build_manifest(subcommand, config, config_digest, extra=None):
    """Reproducibility record for one CLI run; ``config`` is the post-override config."""
    return {
        "subcommand": subcommand,
        "config_hash": config_digest,
        "seed": config["run"]["seed"],
        "config": config,
        "versions": {
            "edlab": APP_VERSION,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
        },
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "artifacts": {},
        **(extra or {}),
    }


def write_manifest(out_dir, manifest):
    """Write manifest.json listing every artifact currently in ``out_dir``."""
    manifest["artifacts"] = {a["name"]: a["size"] for a in list_artifacts(out_dir)
                             if a["name"] != ARTIFACT_NAMES["manifest"]}
    return save_json(manifest, artifact_path(out_dir, "manifest"))


def list_artifacts(out_dir):
    """Files in a run directory with their metadata, sorted by name."""
    if not os.path.isdir(out_dir):
        return []
    artifacts = []
    for path in sorted(glob.glob(os.path.join(out_dir, "*"))):
        if not os.path.isfile(path):
            continue
        try:
            stats = os.stat(path)
        except OSError as e:
            logger.warning("cannot stat %s: %s", path, e)
            continue
        artifacts.append({
            "name": os.path.basename(path),
            "path": path,
            "size": stats.st_size,
            "mtime": stats.st_mtime,
        })
    return artifacts


def describe_age(mtime, now=None):
    """Short human-readable age of an artifact."""
    seconds = max(0, int((now or time.time()) - mtime))
    if seconds < 60:
        return f"{seconds}s"
    if seconds < 3600:
        return f"{seconds // 60}m"
    if seconds < 86400:
        return f"{seconds // 3600}h"
    return f"{seconds // 86400}d"
