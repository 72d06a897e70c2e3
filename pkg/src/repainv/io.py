"""File formats: binary PGM images with raw float sidecars, CSV tables and
JSON summaries that carry provenance hashes."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, img: np.ndarray, maxval: int = 255):
    """8-bit binary graymap (P5) of an image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    q = np.round(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    path.write_bytes(header + q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pix.reshape(h, w).astype(np.float64) / maxval


def write_raw(path: str | Path, arr: np.ndarray):
    """Little-endian float64 dump plus a one-line JSON shape header file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    path.write_bytes(arr.tobytes())
    path.with_name(path.name + ".json").write_text(json.dumps({"dtype": "<f8", "shape": list(arr.shape)}))


def read_raw(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]).astype(np.float64)


def write_image(stem: str | Path, img: np.ndarray):
    """``stem.pgm`` for viewing and ``stem.f64`` for exact values."""
    stem = Path(stem)
    write_pgm(stem.with_suffix(".pgm"), img)
    write_raw(stem.with_suffix(".f64"), img)


def write_csv(path: str | Path, rows: list[dict], header_comment: dict | None = None):
    """CSV with optional ``# key=value`` provenance lines on top."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as fh:
        for k, v in (header_comment or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: str | Path, obj: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
