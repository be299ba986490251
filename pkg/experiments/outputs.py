"""
Run directories: tables/*.csv, plotdata/*.csv, reports/*.json and manifest.json.

Everything written here is a pure function of the validated config, so two
runs with the same config produce byte-identical trees. Floats are written
with repr (shortest round-trip form) and non-finite values as inf/-inf/nan.
"""

import csv
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
from django.conf import settings

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_CHUNK_BYTES = 1024 * 1024


def sha256_file(path):
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(_CHUNK_BYTES), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _float_text(value):
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _float_text(float(value))
    return str(value)


def jsonable(value):
    """Plain JSON types; non-finite floats become strings so the output stays strict JSON."""
    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [jsonable(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else _float_text(value)
    return value


def default_output_dir(kind, digest):
    return Path(settings.LAB_OUTPUT_DIR) / f"{kind}-{digest[:12]}"


class RunDirectory:
    """Writer for one run's output tree; records a checksum for every file it writes."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts = {}

    def path(self, relative):
        target = self.root / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def register(self, relative):
        """Record a file written by another writer (image CSVs, binary matrices)."""
        target = self.root / relative
        self.artifacts[str(relative)] = {
            "sha256": sha256_file(target),
            "size_bytes": target.stat().st_size,
        }
        logger.debug("Artifact %s sha256=%s", relative, self.artifacts[str(relative)]["sha256"])
        return target

    def register_files(self, paths):
        """Register absolute paths under the root, as returned by sampling.storage."""
        return [self.register(Path(path).relative_to(self.root).as_posix()) for path in paths]

    def write_csv(self, relative, fieldnames, rows):
        target = self.path(relative)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: format_cell(row.get(key)) for key in fieldnames})
        return self.register(relative)

    def write_json(self, relative, payload):
        target = self.path(relative)
        target.write_text(
            json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n",
            encoding="utf-8",
        )
        return self.register(relative)

    def write_manifest(self, header):
        """manifest.json lists every other artifact; it is not listed in itself."""
        payload = {**header, "artifacts": dict(sorted(self.artifacts.items()))}
        target = self.root / MANIFEST_NAME
        target.write_text(
            json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n",
            encoding="utf-8",
        )
        logger.info("Wrote %s with %d artifacts", target, len(self.artifacts))
        return target
