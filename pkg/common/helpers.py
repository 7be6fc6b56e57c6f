import os
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def init(level=None):
    log_level = (level or os.environ.get("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=log_level, format="%(levelname)s %(message)s")


def get_version():
    with open(REPO_ROOT / "version.txt") as file:
        return file.read().strip()


def read_json(path):
    with open(path, "r", encoding="utf-8") as file:
        return json.loads(file.read())


def _encode_floats(value):
    # JSON has no infinity; unrated branches carry +inf limits
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _encode_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode_floats(v) for v in value]
    return value


def decode_float(value):
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return float(value)


def dump_json(data):
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_encode_floats(data), sort_keys=True, indent=2) + "\n"


def write_json(path, data):
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        file.write(dump_json(data))
    logging.debug(f"Wrote {path}")
    return path


def utc_timestamp():
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
