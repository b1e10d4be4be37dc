"""File formats: tensors, checkpoints, dataset manifests, CSV reports, heatmaps.

Tensor file (little-endian)::

    b"CCAMTNSR" | u32 version=1 | u32 dtype=1 (float32) | u32 rank | rank x u32 extents
    | row-major float32 payload

Checkpoint file::

    b"CCAMCKPT" | u32 version=1 | u32 entry count
    | per entry: u32 name length, UTF-8 name, tensor file bytes
    | u32 metadata length, UTF-8 "key=value" lines

All writers go through a temp file and ``os.replace`` so readers never see
a partial file.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .localization import Box

TENSOR_MAGIC = b"CCAMTNSR"
CKPT_MAGIC = b"CCAMCKPT"
VERSION = 1
DTYPE_F32 = 1
REPORT_HEADER = ("metric", "value", "count_correct", "count_total")


class FormatError(ValueError):
    """Structurally invalid file contents."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    """Unknown version or dtype code."""


class DuplicateNameError(FormatError):
    pass


class ManifestParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
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


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


# -- tensors -----------------------------------------------------------------


def encode_tensor(t) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0:
        raise FormatError("rank-0 tensors cannot be stored")
    if any(extent < 1 for extent in t.shape):
        raise FormatError(f"zero extent in shape {t.shape}")
    header = TENSOR_MAGIC + struct.pack(f"<III{t.ndim}I", VERSION, DTYPE_F32, t.ndim, *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def _decode_tensor(r: _Reader) -> np.ndarray:
    if r.take(len(TENSOR_MAGIC), "magic") != TENSOR_MAGIC:
        raise BadMagicError("not a tensor file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported tensor version {version}")
    dtype = r.u32("dtype")
    if dtype != DTYPE_F32:
        raise UnsupportedFormatError(f"unsupported dtype code {dtype}")
    rank = r.u32("rank")
    if rank == 0:
        raise FormatError("rank-0 tensors are not allowed")
    shape = tuple(r.u32("extents") for _ in range(rank))
    if 0 in shape:
        raise FormatError(f"zero extent in shape {shape}")
    count = int(np.prod(shape))
    payload = r.take(4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data)
    t = _decode_tensor(r)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after tensor payload")
    return t


def save_tensor(path, t) -> None:
    atomic_write(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- checkpoints ---------------------------------------------------------------


def encode_checkpoint(tensors: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]],
                      metadata: Mapping[str, str] | None = None) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DuplicateNameError(f"duplicate tensor names: {', '.join(dupes)}")
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<II", VERSION, len(items)))
    for name, t in items:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw + encode_tensor(t))
    lines = []
    for key, value in sorted((metadata or {}).items()):
        if "=" in key or "\n" in key or "\n" in str(value):
            raise FormatError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    meta = "".join(lines).encode("utf-8")
    out.write(struct.pack("<I", len(meta)) + meta)
    return out.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(data)
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("entry count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        tensors[name] = _decode_tensor(r)
    meta_raw = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after metadata")
    metadata = {}
    for line in meta_raw.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad metadata line {line!r}")
        metadata[key] = value
    return tensors, metadata


def save_checkpoint(path, tensors, metadata=None) -> None:
    atomic_write(path, encode_checkpoint(tensors, metadata))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())


# -- manifests -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    tensor_path: str
    label: int
    boxes: tuple[Box, ...]


def _format_boxes(boxes: Iterable[Box]) -> str:
    return ";".join(",".join(str(v) for v in b.as_tuple()) for b in boxes)


def format_manifest(entries: Iterable[ManifestEntry]) -> str:
    lines = []
    for e in entries:
        if "\t" in e.image_id or "\t" in e.tensor_path:
            raise ValueError(f"tab inside manifest field for {e.image_id!r}")
        lines.append(f"{e.image_id}\t{e.tensor_path}\t{e.label}\t{_format_boxes(e.boxes)}\n")
    return "".join(lines)


def parse_manifest(text: str) -> list[ManifestEntry]:
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestParseError(line_no, f"expected 4 tab-separated fields, got {len(fields)}")
        image_id, path, label, box_field = fields
        try:
            label_value = int(label)
        except ValueError:
            raise ManifestParseError(line_no, f"bad label {label!r}") from None
        boxes = []
        for chunk in box_field.split(";"):
            parts = chunk.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError("need x0,y0,x1,y1")
                boxes.append(Box(*(int(p) for p in parts)))
            except ValueError as exc:
                raise ManifestParseError(line_no, f"bad box {chunk!r}: {exc}") from None
        entries.append(ManifestEntry(image_id, path, label_value, tuple(boxes)))
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    atomic_write(path, format_manifest(entries).encode("utf-8"))


def read_manifest(path) -> list[ManifestEntry]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


# -- reports -------------------------------------------------------------------


def format_report(rows: Iterable[tuple[str, float, int, int]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for metric, value, correct, total in rows:
        writer.writerow([metric, repr(float(value)), int(correct), int(total)])
    return buf.getvalue()


def parse_report(text: str) -> list[tuple[str, float, int, int]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != REPORT_HEADER:
        raise FormatError(f"bad report header {header!r}")
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise FormatError(f"line {line_no}: expected 4 columns")
        rows.append((row[0], float(row[1]), int(row[2]), int(row[3])))
    return rows


def write_report(path, rows) -> None:
    atomic_write(path, format_report(rows).encode("utf-8"))


def read_report(path) -> list[tuple[str, float, int, int]]:
    return parse_report(Path(path).read_text(encoding="utf-8"))


# -- heatmaps ------------------------------------------------------------------

# blue -> cyan -> green -> yellow -> red
_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_COLORS = np.array(
    [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=float
)
PRED_COLOR = (0, 0, 255)
GT_COLOR = (255, 0, 0)


def colorize(m: np.ndarray) -> np.ndarray:
    v = np.clip(m, 0.0, 1.0)
    rgb = np.stack([np.interp(v, _STOPS, _COLORS[:, c]) for c in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def _outline(img: np.ndarray, box: Box, value) -> None:
    h, w = img.shape[:2]
    x1, y1 = min(box.x1, w) - 1, min(box.y1, h) - 1
    img[box.y0, box.x0 : x1 + 1] = value
    img[y1, box.x0 : x1 + 1] = value
    img[box.y0 : y1 + 1, box.x0] = value
    img[box.y0 : y1 + 1, x1] = value


def encode_heatmap(m, style: str = "gray", box: Box | None = None,
                   gt_box: Box | None = None) -> bytes:
    """PGM (gray) or PPM (color) bytes for a map with values in [0, 1]."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {m.shape}")
    h, w = m.shape
    if style == "gray":
        img = np.rint(np.clip(m, 0.0, 1.0) * 255).astype(np.uint8)
        magic, pred_value, gt_value = b"P5", 255, 128
    elif style == "color":
        img = colorize(m)
        magic, pred_value, gt_value = b"P6", PRED_COLOR, GT_COLOR
    else:
        raise ValueError(f"unknown style {style!r}")
    if gt_box is not None:
        _outline(img, gt_box, gt_value)
    if box is not None:
        _outline(img, box, pred_value)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def render_heatmap(m, path, style: str = "gray", box: Box | None = None,
                   gt_box: Box | None = None) -> None:
    atomic_write(path, encode_heatmap(m, style, box, gt_box))


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the P5/P6 files written here (used by tests and tools)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise FormatError("not a P5/P6 file written by render_heatmap")
    w, h = (int(v) for v in parts[1].split())
    channels = 1 if parts[0] == b"P5" else 3
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != w * h * channels:
        raise TruncatedError("pixel payload size mismatch")
    return pixels.reshape((h, w) if channels == 1 else (h, w, 3))
