"""Dense map containers and the manifest format.

Binary layout shared by PMAP (probability / prior maps) and LMAP (label maps),
all integers little-endian::

    offset  size  field
    0       4     magic, b"PMAP" or b"LMAP"
    4       2     format version (uint16, currently 1)
    6       1     dtype tag (1 = float32, 2 = uint8)
    7       1     flags (bit 0: prior semantics, skip per-pixel sum check)
    8       4     C (uint32); for LMAP the class count, 0 if unknown
    12      4     H (uint32)
    16      4     W (uint32)
    20      ...   payload, row-major. PMAP: C*H*W float32; LMAP: H*W uint8
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE = 255
FORMAT_VERSION = 1
SUM_TOLERANCE = 1e-4

PMAP_MAGIC = b"PMAP"
LMAP_MAGIC = b"LMAP"
DTYPE_FLOAT32 = 1
DTYPE_UINT8 = 2
FLAG_PRIOR = 0x01

_HEADER = struct.Struct("<4sHBBIII")
# refuse to allocate more than this many payload bytes from an untrusted header
MAX_PAYLOAD_BYTES = 1 << 34


class FormatError(ValueError):
    """Raised for malformed map files or manifests."""


class ValidationError(ValueError):
    """Raised when map contents break a documented invariant."""


def check_prob_values(values: np.ndarray, tol: float = SUM_TOLERANCE) -> None:
    if values.ndim != 3:
        raise ValidationError(f"probability map must be C x H x W, got shape {values.shape}")
    c, h, w = values.shape
    if c < 2 or h < 1 or w < 1:
        raise ValidationError(f"need C >= 2, H >= 1, W >= 1, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("probability map contains non-finite values")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValidationError("probability values outside [0, 1]")
    sums = values.sum(axis=0, dtype=np.float64)
    bad = np.abs(sums - 1.0) > tol
    if bad.any():
        r, col = np.argwhere(bad)[0]
        raise ValidationError(
            f"probability-sum violation at pixel ({r}, {col}): sum={sums[r, col]:.6g}"
        )


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, float32, shape (C, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        check_prob_values(values)

    @classmethod
    def unchecked(cls, values) -> "ProbMap":
        """Wrap ``values`` without validation (test hook for scaled maps)."""
        obj = object.__new__(cls)
        values = np.ascontiguousarray(values)
        object.__setattr__(obj, "values", values)
        return obj

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)


def check_label_values(labels: np.ndarray, num_classes: int | None) -> None:
    if labels.ndim != 2:
        raise ValidationError(f"label map must be H x W, got shape {labels.shape}")
    if num_classes is None or num_classes <= 0:
        return
    bad = (labels >= num_classes) & (labels != IGNORE)
    if bad.any():
        r, col = np.argwhere(bad)[0]
        raise ValidationError(
            f"class-range error: value {labels[r, col]} at ({r}, {col}) with C={num_classes}"
        )


def _write(path, magic, dtype_tag, flags, dims, payload: bytes) -> None:
    header = _HEADER.pack(magic, FORMAT_VERSION, dtype_tag, flags, *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def _read(path, magic: bytes, dtype_tag: int):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    got_magic, version, tag, flags, c, h, w = _HEADER.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if tag != dtype_tag:
        raise FormatError(f"{path}: unexpected dtype tag {tag}")
    itemsize = 4 if tag == DTYPE_FLOAT32 else 1
    planes = c if magic == PMAP_MAGIC else 1
    nbytes = planes * h * w * itemsize
    if nbytes > MAX_PAYLOAD_BYTES:
        raise FormatError(f"{path}: dimension overflow ({c} x {h} x {w})")
    payload = data[_HEADER.size:]
    if len(payload) < nbytes:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {nbytes} bytes)")
    if len(payload) > nbytes:
        raise FormatError(f"{path}: {len(payload) - nbytes} trailing bytes")
    return flags, (c, h, w), payload


def save_prob_map(m, path, prior: bool = False) -> None:
    values = np.ascontiguousarray(np.asarray(m), dtype="<f4")
    if values.ndim != 3:
        raise ValidationError(f"expected C x H x W array, got shape {values.shape}")
    flags = FLAG_PRIOR if prior else 0
    _write(path, PMAP_MAGIC, DTYPE_FLOAT32, flags, values.shape, values.tobytes())


def load_prob_map_raw(path) -> tuple[np.ndarray, bool]:
    """Return the float32 payload and the prior flag, without the sum check."""
    flags, (c, h, w), payload = _read(path, PMAP_MAGIC, DTYPE_FLOAT32)
    values = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
    return values, bool(flags & FLAG_PRIOR)


def load_prob_map(path) -> ProbMap:
    values, is_prior = load_prob_map_raw(path)
    if is_prior:
        raise FormatError(f"{path}: file holds a spatial prior, not a probability map")
    return ProbMap(values)


def save_label_map(labels, path, num_classes: int = 0) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    check_label_values(labels, num_classes)
    h, w = labels.shape
    _write(path, LMAP_MAGIC, DTYPE_UINT8, 0, (num_classes, h, w), labels.tobytes())


def load_label_map(path, num_classes: int | None = None) -> np.ndarray:
    """Load an LMAP file. Values >= C (other than IGNORE) are rejected.

    ``num_classes`` overrides the class count stored in the header.
    """
    _, (c, h, w), payload = _read(path, LMAP_MAGIC, DTYPE_UINT8)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
    check_label_values(labels, num_classes if num_classes is not None else c)
    return labels


def label_map_classes(path) -> int:
    """Class count recorded in an LMAP header (0 if unknown)."""
    _, (c, _, _), _ = _read(path, LMAP_MAGIC, DTYPE_UINT8)
    return c


@dataclass
class ManifestRecord:
    id: str
    role: str
    prob_path: Path | None
    label_path: Path | None


@dataclass
class Manifest:
    records: list[ManifestRecord]
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def by_role(self, role: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.role == role]

    @property
    def num_source(self) -> int:
        return len(self.by_role("source"))

    @property
    def num_target(self) -> int:
        return len(self.by_role("target"))


def _resolve(base: Path, field_value: str) -> Path | None:
    if field_value == "-":
        return None
    p = Path(field_value)
    return p if p.is_absolute() else base / p


def read_manifest(path) -> Manifest:
    """Parse a tab-separated manifest: ``id role prob_path label_path``.

    Lines starting with ``#`` are comments; ``# classes: a,b,c`` declares class
    names. Relative paths resolve against the manifest's directory. The class
    count is taken from the referenced maps and must agree across all of them.
    """
    path = Path(path)
    base = path.parent
    text = path.read_text(encoding="utf-8")
    records: list[ManifestRecord] = []
    names: list[str] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("classes:"):
                names = [s.strip() for s in body[len("classes:"):].split(",") if s.strip()]
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        rid, role, prob, label = fields
        if role not in ("source", "target"):
            raise FormatError(f"{path}:{lineno}: role must be source or target, got {role!r}")
        if rid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        rec = ManifestRecord(rid, role, _resolve(base, prob), _resolve(base, label))
        if rec.prob_path is None and rec.label_path is None:
            raise FormatError(f"{path}:{lineno}: record {rid!r} has neither prob nor label path")
        for p in (rec.prob_path, rec.label_path):
            if p is not None and not p.exists():
                raise FormatError(f"{path}:{lineno}: missing file {p}")
        records.append(rec)
    if not records:
        raise FormatError("empty manifest")

    counts = set()
    for rec in records:
        if rec.prob_path is not None:
            _, (c, _, _), _ = _read(rec.prob_path, PMAP_MAGIC, DTYPE_FLOAT32)
            counts.add(c)
        if rec.label_path is not None:
            c = label_map_classes(rec.label_path)
            if c:
                counts.add(c)
    if names:
        counts.add(len(names))
    if len(counts) > 1:
        raise FormatError(f"{path}: inconsistent class counts {sorted(counts)}")
    if not counts:
        raise FormatError(f"{path}: cannot determine class count")
    return Manifest(records, counts.pop(), names)


def write_manifest(path, records, class_names=None) -> None:
    """Write records as a manifest; paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent
    lines = []
    if class_names:
        lines.append("# classes: " + ",".join(class_names))
    for rec in records:
        cols = [rec.id, rec.role]
        for p in (rec.prob_path, rec.label_path):
            if p is None:
                cols.append("-")
            else:
                cols.append(Path(os.path.relpath(p, base)).as_posix())
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
