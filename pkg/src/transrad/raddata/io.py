"""Dataset directory I/O.

Layout: one subdirectory per split (``train/``, ``test/``) containing a
``<frame_id>.rad`` / ``<frame_id>.ann`` pair per frame, plus a
``labels.txt`` at the dataset root listing class names (one per line,
defining class_id order).

``.rad``: 16-byte header (magic ``RAD1`` + three little-endian uint32
shape fields R, A, D) followed by float32 little-endian values in C
row-major order.  ``.ann``: UTF-8 text, one record per line:
``class_id r_center a_center d_center w h depth``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .cube import Annotation3D, FrameRecord, RadCube

_MAGIC = b"RAD1"
_HEADER = struct.Struct("<4sIII")


def save_frame(record: FrameRecord, directory: Path | str):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    r, a, d = record.cube.shape
    with open(directory / f"{record.frame_id}.rad", "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, r, a, d))
        fh.write(np.ascontiguousarray(record.cube.values, dtype="<f4").tobytes())
    lines = [
        f"{ann.class_id} {ann.center[0]!r} {ann.center[1]!r} {ann.center[2]!r} "
        f"{ann.size[0]!r} {ann.size[1]!r} {ann.size[2]!r}"
        for ann in record.annotations
    ]
    (directory / f"{record.frame_id}.ann").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )


def save_frames(frames: list[FrameRecord], directory: Path | str):
    for record in frames:
        save_frame(record, directory)


def load_frame(directory: Path | str, frame_id: str) -> FrameRecord:
    directory = Path(directory)
    rad_path = directory / f"{frame_id}.rad"
    ann_path = directory / f"{frame_id}.ann"
    if not rad_path.is_file():
        raise DataError(f"frame '{frame_id}': missing cube file {rad_path}")
    if not ann_path.is_file():
        raise DataError(f"frame '{frame_id}': missing annotation file {ann_path}")

    raw = rad_path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"frame '{frame_id}': cube file shorter than its header")
    magic, r, a, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataError(f"frame '{frame_id}': bad magic {magic!r}")
    expected = _HEADER.size + 4 * r * a * d
    if len(raw) != expected:
        raise DataError(
            f"frame '{frame_id}': cube payload is {len(raw)} bytes, "
            f"header shape ({r}, {a}, {d}) needs {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(r, a, d)
    try:
        cube = RadCube(values.copy())
    except ValueError as exc:
        raise DataError(f"frame '{frame_id}': {exc}") from exc

    annotations = []
    for ln, line in enumerate(ann_path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DataError(
                f"frame '{frame_id}': annotation line {ln} has {len(parts)} fields, expected 7"
            )
        try:
            ann = Annotation3D(
                int(parts[0]),
                tuple(float(v) for v in parts[1:4]),
                tuple(float(v) for v in parts[4:7]),
            )
            ann.validate_against(cube.shape)
        except ValueError as exc:
            raise DataError(f"frame '{frame_id}': annotation line {ln}: {exc}") from exc
        annotations.append(ann)
    return FrameRecord(cube, annotations, frame_id)


def load_frames(directory: Path | str) -> list[FrameRecord]:
    """Load every ``.rad``/``.ann`` pair under ``directory``, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    frame_ids = sorted(p.stem for p in directory.glob("*.rad"))
    return [load_frame(directory, fid) for fid in frame_ids]


def write_labels(root: Path | str, names: list[str]):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")


def read_labels(root: Path | str) -> list[str]:
    path = Path(root) / "labels.txt"
    if not path.is_file():
        raise DataError(f"missing labels file {path}")
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        raise DataError(f"labels file {path} is empty")
    return names
