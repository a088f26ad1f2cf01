"""Atomic file writers for reports, checkpoints, and exports.

Every output lands via temp-file-plus-rename so interrupted runs never
leave truncated artifacts behind.
"""

from __future__ import annotations

import json
import os
import tempfile


def write_atomic_bytes(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_atomic_text(path, text: str):
    write_atomic_bytes(path, text.encode("utf-8"))


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format(v) for v in row))
    write_atomic_text(path, "\n".join(lines) + "\n")


def write_json(path, payload):
    write_atomic_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)
