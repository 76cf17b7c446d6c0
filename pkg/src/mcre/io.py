"""Deterministic CSV/JSON emission with atomic writes and a manifest."""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def fmt(v) -> str:
    """17 significant digits for floats; plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class OutputWriter:
    """Single writer for one run: every file goes through here and into the manifest."""

    def __init__(self, out_dir, cfg_hash: str, meta: dict | None = None):
        self.dir = Path(out_dir)  # created on first write, so an empty run leaves nothing
        self.hash = cfg_hash
        self.meta = dict(meta or {})
        self.files = []

    def csv(self, name: str, header, rows):
        lines = [f"# config_sha256={self.hash}", ",".join(header)]
        lines += [",".join(fmt(v) for v in row) for row in rows]
        _atomic_write(self.dir / name, ("\n".join(lines) + "\n").encode("utf-8"))
        self.files.append({"file": name, "rows": len(rows), "kind": "csv"})

    def json(self, name: str, obj):
        body = {"config_sha256": self.hash, **to_jsonable(obj)}
        _atomic_write(self.dir / name, (json.dumps(body, indent=2, sort_keys=True) + "\n")
                      .encode("utf-8"))
        self.files.append({"file": name, "rows": 1, "kind": "json"})

    def finalize(self):
        manifest = {"config_sha256": self.hash, "files": self.files, **to_jsonable(self.meta)}
        _atomic_write(self.dir / "manifest.json",
                      (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        return self.dir / "manifest.json"


def read_csv_body(path) -> str:
    """CSV contents without the config-hash comment line."""
    with open(path) as fh:
        return "".join(line for line in fh if not line.startswith("#"))
