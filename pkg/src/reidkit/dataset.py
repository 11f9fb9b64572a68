"""Image metadata and embedding ingestion.

Metadata is a UTF-8 CSV with header ``image_id,identity_id,camera_id,role``.
Embeddings live in a little-endian binary container::

    b"REMB" | u32 version (=1) | u32 count | u32 dim | count*dim float32

Row ``i`` of an embedding file aligns with the ``i``-th metadata record of the
matching role, so records are kept in file order and never sorted.
"""

from __future__ import annotations

import csv
import enum
import io
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Role",
    "ImageRecord",
    "Dataset",
    "DatasetError",
    "MalformedRow",
    "DuplicateImageId",
    "EmptySplit",
    "EmbeddingFormatError",
    "BadMagic",
    "CountMismatch",
    "DimMismatch",
    "NonFiniteValue",
    "TruncatedFile",
    "METADATA_HEADER",
    "load_metadata",
    "parse_metadata",
    "dump_metadata",
    "write_metadata",
    "load_embeddings",
    "read_matrix",
    "write_matrix",
    "encode_matrix",
    "load_dataset",
    "validate_dataset",
]

METADATA_HEADER = ("image_id", "identity_id", "camera_id", "role")
MAGIC = b"REMB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    """Base class for ingestion failures."""


class MalformedRow(DatasetError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicateImageId(DatasetError):
    def __init__(self, image_id: str, line: int):
        super().__init__(f"line {line}: duplicate image_id {image_id!r}")
        self.image_id = image_id
        self.line = line


class EmptySplit(DatasetError):
    pass


class EmbeddingFormatError(DatasetError):
    """Base class for problems with a binary embedding container."""


class BadMagic(EmbeddingFormatError):
    pass


class TruncatedFile(EmbeddingFormatError):
    pass


class CountMismatch(EmbeddingFormatError):
    pass


class DimMismatch(DatasetError):
    pass


class NonFiniteValue(EmbeddingFormatError):
    def __init__(self, row: int, col: int):
        super().__init__(f"non-finite value at row {row}, col {col}")
        self.row = row
        self.col = col


class Role(enum.Enum):
    QUERY = "query"
    GALLERY = "gallery"


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    identity_id: int
    camera_id: int
    role: Role

    def __post_init__(self):
        if self.identity_id < 0 or self.camera_id < 0:
            raise ValueError(f"{self.image_id}: identity_id and camera_id must be nonnegative")


def _freeze(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Query and gallery records with optional row-aligned embeddings.

    Embedding arrays are stored read-only so a loaded dataset can be shared
    between worker threads.
    """

    queries: tuple[ImageRecord, ...]
    gallery: tuple[ImageRecord, ...]
    query_embeddings: np.ndarray | None = field(default=None, compare=False)
    gallery_embeddings: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "gallery", tuple(self.gallery))
        if not self.queries:
            raise EmptySplit("dataset has no query records")
        if not self.gallery:
            raise EmptySplit("dataset has no gallery records")
        ids = set()
        for rec in self.queries + self.gallery:
            if rec.image_id in ids:
                raise DuplicateImageId(rec.image_id, 0)
            ids.add(rec.image_id)
        qe = _freeze(self.query_embeddings)
        ge = _freeze(self.gallery_embeddings)
        for name, emb, recs in (("query", qe, self.queries), ("gallery", ge, self.gallery)):
            if emb is None:
                continue
            if emb.ndim != 2 or emb.shape[1] < 1:
                raise DimMismatch(f"{name} embeddings must be a count x dim matrix, got shape {emb.shape}")
            if emb.shape[0] != len(recs):
                raise CountMismatch(
                    f"{name} embeddings have {emb.shape[0]} rows but metadata has {len(recs)} {name} records"
                )
            _check_finite(emb)
        if qe is not None and ge is not None and qe.shape[1] != ge.shape[1]:
            raise DimMismatch(f"query dim {qe.shape[1]} != gallery dim {ge.shape[1]}")
        object.__setattr__(self, "query_embeddings", qe)
        object.__setattr__(self, "gallery_embeddings", ge)

    def with_embeddings(self, query_embeddings: np.ndarray, gallery_embeddings: np.ndarray) -> "Dataset":
        return Dataset(self.queries, self.gallery, query_embeddings, gallery_embeddings)

    @property
    def records(self) -> tuple[ImageRecord, ...]:
        return self.queries + self.gallery


# --------------------------------------------------------------------------- metadata


def parse_metadata(lines: Iterable[str]) -> Dataset:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(1, "missing header") from None
    if tuple(h.strip() for h in header) != METADATA_HEADER:
        raise MalformedRow(1, f"expected header {','.join(METADATA_HEADER)}")

    queries: list[ImageRecord] = []
    gallery: list[ImageRecord] = []
    seen: set[str] = set()
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise MalformedRow(line, f"expected 4 fields, got {len(row)}")
        image_id, ident, cam, role = (c.strip() for c in row)
        if not image_id:
            raise MalformedRow(line, "empty image_id")
        try:
            identity_id = int(ident)
            camera_id = int(cam)
        except ValueError:
            raise MalformedRow(line, "identity_id and camera_id must be integers") from None
        if identity_id < 0 or camera_id < 0:
            raise MalformedRow(line, "identity_id and camera_id must be nonnegative")
        try:
            r = Role(role)
        except ValueError:
            raise MalformedRow(line, f"role must be 'query' or 'gallery', got {role!r}") from None
        if image_id in seen:
            raise DuplicateImageId(image_id, line)
        seen.add(image_id)
        rec = ImageRecord(image_id, identity_id, camera_id, r)
        (queries if r is Role.QUERY else gallery).append(rec)

    if not queries:
        raise EmptySplit("metadata has zero query rows")
    if not gallery:
        raise EmptySplit("metadata has zero gallery rows")
    return Dataset(tuple(queries), tuple(gallery))


def load_metadata(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8", newline="") as f:
        return parse_metadata(f)


def dump_metadata(records: Sequence[ImageRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METADATA_HEADER)
    for r in records:
        w.writerow((r.image_id, r.identity_id, r.camera_id, r.role.value))
    return buf.getvalue()


def write_metadata(path: str | os.PathLike, records: Sequence[ImageRecord]) -> None:
    Path(path).write_text(dump_metadata(records), encoding="utf-8")


# --------------------------------------------------------------------------- embeddings


def _check_finite(a: np.ndarray) -> None:
    bad = ~np.isfinite(a)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NonFiniteValue(int(row), int(col))


def encode_matrix(values: np.ndarray) -> bytes:
    a = np.asarray(values, dtype="<f4")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    return _HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1]) + a.tobytes(order="C")


def write_matrix(path: str | os.PathLike, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_matrix(values))


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    """Read any REMB container, checking only its own framing and finiteness."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[: len(data)]:
            raise BadMagic(f"{path}: not a REMB file")
        raise TruncatedFile(f"{path}: {len(data)} bytes is shorter than the 16-byte header")
    magic, version, count, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise EmbeddingFormatError(f"{path}: dim must be positive")
    expected = _HEADER.size + 4 * count * dim
    if len(data) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes for {count}x{dim}, got {len(data)}")
    if len(data) > expected:
        raise EmbeddingFormatError(f"{path}: {len(data) - expected} trailing bytes")
    a = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size)
    a = a.reshape(count, dim).astype(np.float32)
    _check_finite(a)
    return a


def load_embeddings(path: str | os.PathLike, expected_count: int, expected_dim: int | None = None) -> np.ndarray:
    a = read_matrix(path)
    if a.shape[0] != expected_count:
        raise CountMismatch(f"{path}: {a.shape[0]} rows, expected {expected_count}")
    if expected_dim is not None and a.shape[1] != expected_dim:
        raise DimMismatch(f"{path}: dim {a.shape[1]}, expected {expected_dim}")
    return a


def load_dataset(
    metadata: str | os.PathLike,
    query_embeddings: str | os.PathLike | None = None,
    gallery_embeddings: str | os.PathLike | None = None,
) -> Dataset:
    d = load_metadata(metadata)
    if query_embeddings is None and gallery_embeddings is None:
        return d
    qe = load_embeddings(query_embeddings, len(d.queries)) if query_embeddings is not None else None
    ge = None
    if gallery_embeddings is not None:
        ge = load_embeddings(gallery_embeddings, len(d.gallery), None if qe is None else qe.shape[1])
    return Dataset(d.queries, d.gallery, qe, ge)


# --------------------------------------------------------------------------- diagnostics


def validate_dataset(d: Dataset) -> list[str]:
    """Coverage diagnostics; never raises.

    Flags query identities with no gallery targets, identities seen under a
    single camera, and gallery cameras holding exactly one image.
    """
    warnings: list[str] = []
    gallery_ids = {r.identity_id for r in d.gallery}
    for ident in sorted({r.identity_id for r in d.queries} - gallery_ids):
        warnings.append(f"identity {ident}: no targets")

    cams_by_id: dict[int, set[int]] = defaultdict(set)
    for r in d.queries + d.gallery:
        cams_by_id[r.identity_id].add(r.camera_id)
    for ident in sorted(cams_by_id):
        if len(cams_by_id[ident]) == 1:
            warnings.append(f"identity {ident}: single camera")

    per_cam: dict[int, int] = defaultdict(int)
    for r in d.gallery:
        per_cam[r.camera_id] += 1
    for cam in sorted(per_cam):
        if per_cam[cam] == 1:
            warnings.append(f"camera {cam}: singleton")
    return warnings
