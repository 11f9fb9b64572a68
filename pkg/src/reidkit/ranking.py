"""Query-to-gallery distances, protocol filtering and deterministic ranking.

Ranking files are UTF-8 text with one line per query::

    <query_image_id>:<gallery_id_1>,<gallery_id_2>,...

in rank order. They are written by ``rank`` and read back by ``eval``.
"""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset, DimMismatch, ImageRecord
from .parallel import ordered_map

__all__ = [
    "DistanceMetric",
    "ProtocolFilter",
    "RankedList",
    "ZeroNormRow",
    "RankingFileError",
    "l2_normalize",
    "pairwise_distances",
    "apply_protocol_filter",
    "rank_gallery",
    "rank_all",
    "dump_rankings",
    "write_rankings",
    "parse_rankings",
    "read_rankings",
]

# fixed so chunking (and hence float results) never depends on thread count
QUERY_CHUNK = 64


class DistanceMetric(enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


class ProtocolFilter(enum.Enum):
    STANDARD = "standard"
    NONE = "none"


class ZeroNormRow(ValueError):
    def __init__(self, side: str, row: int):
        super().__init__(f"{side} row {row} has zero norm")
        self.side = side
        self.row = row


class RankingFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RankedList:
    """Gallery indices for one query, ascending by distance.

    ``distances`` is aligned with ``ordered_gallery`` when the list was
    produced in-process and ``None`` when it was read from a ranking file.
    """

    query_index: int
    ordered_gallery: np.ndarray
    distances: np.ndarray | None = None

    def __post_init__(self):
        og = np.array(self.ordered_gallery, dtype=np.int64).reshape(-1)
        og.setflags(write=False)
        object.__setattr__(self, "ordered_gallery", og)
        if self.distances is not None:
            d = np.array(self.distances, dtype=np.float64).reshape(-1)
            if d.shape != og.shape:
                raise ValueError("distances must align with ordered_gallery")
            d.setflags(write=False)
            object.__setattr__(self, "distances", d)

    def __len__(self) -> int:
        return len(self.ordered_gallery)

    def __eq__(self, other):
        if not isinstance(other, RankedList):
            return NotImplemented
        return self.query_index == other.query_index and np.array_equal(self.ordered_gallery, other.ordered_gallery)

    def __hash__(self):
        return hash((self.query_index, self.ordered_gallery.tobytes()))

    def tolist(self) -> list[int]:
        return self.ordered_gallery.tolist()


# --------------------------------------------------------------------------- distances


def _norms(x: np.ndarray, side: str) -> np.ndarray:
    n = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = np.flatnonzero(n == 0)
    if zero.size:
        raise ZeroNormRow(side, int(zero[0]))
    return n


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization in float32; zero rows raise ZeroNormRow."""
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 / _norms(x64, "embedding")[:, None]).astype(np.float32)


def pairwise_distances(
    q: np.ndarray, g: np.ndarray, metric: DistanceMetric = DistanceMetric.COSINE
) -> np.ndarray:
    """``|q| x |g|`` distance matrix.

    Inputs are float32; products are accumulated in float64. Cosine distance
    is ``1 - cos`` clipped to ``[0, 2]``.
    """
    q = np.asarray(q, dtype=np.float32)
    g = np.asarray(g, dtype=np.float32)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimMismatch(f"cannot compare shapes {q.shape} and {g.shape}")
    q64 = q.astype(np.float64)
    g64 = g.astype(np.float64)
    dots = q64 @ g64.T
    if metric is DistanceMetric.COSINE:
        qn = _norms(q64, "query")
        gn = _norms(g64, "gallery")
        d = 1.0 - dots / np.outer(qn, gn)
        return np.clip(d, 0.0, 2.0)
    if metric is DistanceMetric.EUCLIDEAN:
        sq = np.einsum("ij,ij->i", q64, q64)[:, None] + np.einsum("ij,ij->i", g64, g64)[None, :] - 2.0 * dots
        return np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


# --------------------------------------------------------------------------- protocol


def _retained(q_ident: int, q_cam: int, g_ident: np.ndarray, g_cam: np.ndarray, f: ProtocolFilter) -> np.ndarray:
    if f is ProtocolFilter.NONE:
        return np.arange(len(g_ident), dtype=np.int64)
    if f is ProtocolFilter.STANDARD:
        return np.flatnonzero(~((g_ident == q_ident) & (g_cam == q_cam))).astype(np.int64)
    raise ValueError(f"unknown protocol {f!r}")


def _labels(gallery: Sequence[ImageRecord]) -> tuple[np.ndarray, np.ndarray]:
    ident = np.fromiter((r.identity_id for r in gallery), dtype=np.int64, count=len(gallery))
    cam = np.fromiter((r.camera_id for r in gallery), dtype=np.int64, count=len(gallery))
    return ident, cam


def apply_protocol_filter(query: ImageRecord, gallery: Sequence[ImageRecord], f: ProtocolFilter) -> list[int]:
    """Gallery indices kept under ``f``, in original order.

    ``STANDARD`` drops entries sharing both identity and camera with the
    query; ``NONE`` keeps everything.
    """
    ident, cam = _labels(gallery)
    return _retained(query.identity_id, query.camera_id, ident, cam, f).tolist()


# --------------------------------------------------------------------------- ranking


def rank_gallery(distances: np.ndarray, retained: Iterable[int] | None = None, query_index: int = 0) -> RankedList:
    """Stable ascending sort of ``distances`` restricted to ``retained``.

    Ties resolve to the smaller gallery index.
    """
    distances = np.asarray(distances, dtype=np.float64).reshape(-1)
    if retained is None:
        idx = np.arange(len(distances), dtype=np.int64)
    else:
        idx = np.unique(np.fromiter(retained, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= len(distances)):
            raise IndexError("retained index out of range for distance row")
    d = distances[idx]
    order = np.argsort(d, kind="stable")
    return RankedList(query_index, idx[order], d[order])


def rank_all(
    d: Dataset,
    metric: DistanceMetric = DistanceMetric.COSINE,
    protocol: ProtocolFilter = ProtocolFilter.STANDARD,
    normalize: bool = True,
    threads: int | None = None,
) -> list[RankedList]:
    """Rank the gallery for every query; output is independent of ``threads``."""
    if d.query_embeddings is None or d.gallery_embeddings is None:
        raise ValueError("dataset has no embeddings to rank")
    q, g = d.query_embeddings, d.gallery_embeddings
    if q.shape[1] != g.shape[1]:
        raise DimMismatch(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    if normalize:
        q, g = l2_normalize(q), l2_normalize(g)
    g_ident, g_cam = _labels(d.gallery)

    def work(start: int) -> list[RankedList]:
        stop = min(start + QUERY_CHUNK, len(d.queries))
        block = pairwise_distances(q[start:stop], g, metric)
        out = []
        for i in range(start, stop):
            rec = d.queries[i]
            keep = _retained(rec.identity_id, rec.camera_id, g_ident, g_cam, protocol)
            row = block[i - start]
            order = np.argsort(row[keep], kind="stable")
            out.append(RankedList(i, keep[order], row[keep][order]))
        return out

    chunks = ordered_map(work, range(0, len(d.queries), QUERY_CHUNK), threads)
    return [r for chunk in chunks for r in chunk]


# --------------------------------------------------------------------------- ranking files


def dump_rankings(rankings: Sequence[RankedList], d: Dataset) -> str:
    buf = io.StringIO()
    for r in rankings:
        ids = ",".join(d.gallery[j].image_id for j in r.ordered_gallery)
        buf.write(f"{d.queries[r.query_index].image_id}:{ids}\n")
    return buf.getvalue()


def write_rankings(path: str | os.PathLike, rankings: Sequence[RankedList], d: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_rankings(rankings, d))


def parse_rankings(lines: Iterable[str], d: Dataset) -> list[RankedList]:
    """Parse ranking lines into lists aligned with ``d.queries``.

    Every query must appear exactly once; unknown ids and repeated gallery
    ids within a line are rejected.
    """
    q_index = {r.image_id: i for i, r in enumerate(d.queries)}
    g_index = {r.image_id: j for j, r in enumerate(d.gallery)}
    found: dict[int, RankedList] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        qid, sep, rest = line.partition(":")
        if not sep:
            raise RankingFileError(f"line {lineno}: missing ':' separator")
        qid = qid.strip()
        if qid not in q_index:
            raise RankingFileError(f"line {lineno}: unknown query id {qid!r}")
        qi = q_index[qid]
        if qi in found:
            raise RankingFileError(f"line {lineno}: query {qid!r} listed twice")
        order = []
        seen = set()
        for gid in (t.strip() for t in rest.split(",")) if rest.strip() else ():
            if gid not in g_index:
                raise RankingFileError(f"line {lineno}: unknown gallery id {gid!r}")
            if gid in seen:
                raise RankingFileError(f"line {lineno}: gallery id {gid!r} repeated")
            seen.add(gid)
            order.append(g_index[gid])
        found[qi] = RankedList(qi, order)
    missing = [d.queries[i].image_id for i in range(len(d.queries)) if i not in found]
    if missing:
        raise RankingFileError(f"no ranking for {len(missing)} queries, first {missing[0]!r}")
    return [found[i] for i in range(len(d.queries))]


def read_rankings(path: str | os.PathLike, d: Dataset) -> list[RankedList]:
    with open(path, encoding="utf-8", newline="") as f:
        return parse_rankings(f, d)
