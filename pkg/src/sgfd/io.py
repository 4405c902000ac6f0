"""Versioned CSV/JSON writers shared by every artifact."""

import csv
import hashlib
import json
from pathlib import Path

from sgfd._errors import InvalidArgument

FORMAT_VERSION = 1


def write_csv(path, fieldnames, rows):
    """Write rows under a ``#format_version=N`` line and a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path):
    with Path(path).open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("#format_version="):
            raise InvalidArgument(f"{path}: missing format_version line")
        version = int(first.strip().split("=", 1)[1])
        if version != FORMAT_VERSION:
            raise InvalidArgument(f"{path}: unsupported format_version {version}")
        return list(csv.DictReader(fh))


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": FORMAT_VERSION, **obj}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
