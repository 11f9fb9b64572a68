"""Ranking measures: CMC@k, AP/mAP and the cross-camera generalization measure.

For one query and one camera ``c`` the CGM is computed on the camera
sub-gallery (the ranked list with targets from every other camera removed)::

    CGM(q, c) = mean over the targets of c of 1 / (E(k) + 1)

where ``E(k)`` counts the errors (non-targets) ahead of the k-th target.
``CGM(q)`` is the plain mean over the cameras that own at least one target,
and ``mCGM`` the plain mean over valid queries.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import Dataset, ImageRecord
from .parallel import ordered_map
from .ranking import ProtocolFilter, RankedList

__all__ = [
    "MetricError",
    "NoTargets",
    "EmptySubGallery",
    "AllQueriesInvalid",
    "RelevanceList",
    "CameraSubGallery",
    "QueryResult",
    "EvalReport",
    "MEASURES",
    "relevance_list",
    "cmc_at_k",
    "average_precision",
    "errors_before_targets",
    "errors_before_targets_full",
    "build_camera_subgalleries",
    "cgm_per_camera",
    "cgm_query",
    "mean_cgm",
    "evaluate_query",
    "evaluate_all",
    "report_csv",
    "report_markdown",
    "per_query_csv",
]

MEASURES = ("cmc", "map", "mcgm")


class MetricError(ValueError):
    pass


class NoTargets(MetricError):
    pass


class EmptySubGallery(MetricError):
    pass


class AllQueriesInvalid(MetricError):
    pass


@dataclass(frozen=True, eq=False)
class RelevanceList:
    """Target flags along a ranked list, with the camera of each entry."""

    flags: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        f = np.array(self.flags, dtype=bool).reshape(-1)
        c = np.array(self.cameras, dtype=np.int64).reshape(-1)
        if f.shape != c.shape:
            raise ValueError(f"flags ({f.size}) and cameras ({c.size}) must align")
        f.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "flags", f)
        object.__setattr__(self, "cameras", c)

    def __len__(self) -> int:
        return self.flags.size

    def __eq__(self, other):
        if not isinstance(other, RelevanceList):
            return NotImplemented
        return np.array_equal(self.flags, other.flags) and np.array_equal(self.cameras, other.cameras)

    @property
    def n_targets(self) -> int:
        return int(self.flags.sum())

    @property
    def target_cameras(self) -> list[int]:
        return sorted(set(self.cameras[self.flags].tolist()))


@dataclass(frozen=True, eq=False)
class CameraSubGallery:
    camera: int
    flags: np.ndarray

    def __post_init__(self):
        f = np.array(self.flags, dtype=bool).reshape(-1)
        f.setflags(write=False)
        object.__setattr__(self, "flags", f)

    @property
    def n_targets(self) -> int:
        return int(self.flags.sum())


def relevance_list(
    ranked: RankedList,
    query: ImageRecord,
    gallery: Sequence[ImageRecord],
    protocol: ProtocolFilter | None = None,
) -> RelevanceList:
    ident = np.fromiter((gallery[j].identity_id for j in ranked.ordered_gallery), dtype=np.int64, count=len(ranked))
    cams = np.fromiter((gallery[j].camera_id for j in ranked.ordered_gallery), dtype=np.int64, count=len(ranked))
    return _relevance(query, ident, cams, protocol)


def _relevance(query: ImageRecord, ident: np.ndarray, cams: np.ndarray, protocol: ProtocolFilter | None) -> RelevanceList:
    flags = ident == query.identity_id
    if protocol is ProtocolFilter.STANDARD:
        keep = ~(flags & (cams == query.camera_id))
        flags, cams = flags[keep], cams[keep]
    return RelevanceList(flags, cams)


def _require_targets(rel: RelevanceList) -> None:
    if not rel.flags.any():
        raise NoTargets("ranked list holds no target of the query identity")


# --------------------------------------------------------------------------- CMC / AP


def cmc_at_k(rel: RelevanceList, k: int) -> int:
    """1 if a target appears in the top ``k`` (clamped to the list length)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_targets(rel)
    return int(rel.flags[:k].any())


def average_precision(rel: RelevanceList) -> float:
    """Mean over targets of the precision at each target's rank."""
    _require_targets(rel)
    pos = np.flatnonzero(rel.flags) + 1.0
    hits = np.arange(1, pos.size + 1, dtype=np.float64)
    return float(np.mean(hits / pos))


# --------------------------------------------------------------------------- CGM


def errors_before_targets(flags: np.ndarray) -> np.ndarray:
    """``E(k)`` for every target of a (sub-)gallery, in rank order."""
    flags = np.asarray(flags, dtype=bool)
    errs = np.cumsum(~flags)
    return errs[flags]


def errors_before_targets_full(rel: RelevanceList, camera: int) -> np.ndarray:
    """``E(k)`` for the targets of ``camera`` counted on the full ranked list.

    Other cameras' targets are never errors, so this must agree with
    counting on the camera sub-gallery.
    """
    errs = np.cumsum(~rel.flags)
    return errs[rel.flags & (rel.cameras == camera)]


def build_camera_subgalleries(rel: RelevanceList) -> list[CameraSubGallery]:
    """One sub-gallery per camera owning a target, in ascending camera order."""
    subs = []
    for cam in rel.target_cameras:
        keep = ~rel.flags | (rel.cameras == cam)
        subs.append(CameraSubGallery(cam, rel.flags[keep]))
    return subs


def cgm_per_camera(sub: CameraSubGallery) -> float:
    e = errors_before_targets(sub.flags)
    if e.size == 0:
        raise EmptySubGallery(f"camera {sub.camera} has no targets")
    return math.fsum(1.0 / (e + 1.0)) / e.size


def cgm_query(rel: RelevanceList) -> tuple[float, dict[int, float]]:
    """CGM for one query and the per-camera scores it averages.

    Cameras without targets of the query identity are skipped.
    """
    _require_targets(rel)
    per_cam = {s.camera: cgm_per_camera(s) for s in build_camera_subgalleries(rel)}
    return math.fsum(per_cam.values()) / len(per_cam), per_cam


def mean_cgm(values: Iterable[float | None]) -> float:
    """Mean over queries; ``None`` entries mark invalid queries and are skipped."""
    valid = [v for v in values if v is not None]
    if not valid:
        raise AllQueriesInvalid("no query has a target in its ranked list")
    return math.fsum(valid) / len(valid)


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    ap: float | None
    cgm: float | None
    per_camera: Mapping[int, float] = field(default_factory=dict)
    first_hit: int | None = None

    @property
    def valid(self) -> bool:
        return self.ap is not None

    @property
    def n_cameras(self) -> int:
        return len(self.per_camera)


@dataclass(frozen=True)
class EvalReport:
    per_measure: dict[str, float]
    n_queries: int
    n_valid: int
    invalid_queries: tuple[str, ...] = ()
    per_query: tuple[QueryResult, ...] | None = None

    def __getitem__(self, measure: str) -> float:
        return self.per_measure[measure]


def evaluate_query(rel: RelevanceList, query_id: str = "") -> QueryResult:
    if not rel.flags.any():
        return QueryResult(query_id, None, None)
    cgm, per_cam = cgm_query(rel)
    return QueryResult(query_id, average_precision(rel), cgm, per_cam, int(np.argmax(rel.flags)) + 1)


def _check_measures(measures: Sequence[str], ks: Sequence[int]) -> None:
    for m in measures:
        if m not in MEASURES:
            raise ValueError(f"unknown measure {m!r}; choose from {', '.join(MEASURES)}")
    if "cmc" in measures:
        if not ks:
            raise ValueError("cmc requested without any k")
        if any(k < 1 for k in ks):
            raise ValueError("cmc k values must be >= 1")


def evaluate_all(
    rankings: Sequence[RankedList],
    d: Dataset,
    ks: Sequence[int] = (1, 5),
    measures: Sequence[str] = MEASURES,
    protocol: ProtocolFilter | None = None,
    per_query: bool = False,
    threads: int | None = None,
) -> EvalReport:
    """Evaluate one ranked list per query.

    ``protocol`` re-applies a gallery filter to the given rankings (useful for
    externally produced files); ``None`` takes them as they are. Queries
    without targets are excluded from every mean and listed in
    ``invalid_queries``.
    """
    _check_measures(measures, ks)
    if len(rankings) != len(d.queries):
        raise ValueError(f"{len(rankings)} rankings for {len(d.queries)} queries")
    g_ident = np.fromiter((r.identity_id for r in d.gallery), dtype=np.int64, count=len(d.gallery))
    g_cam = np.fromiter((r.camera_id for r in d.gallery), dtype=np.int64, count=len(d.gallery))

    def work(i: int) -> QueryResult:
        r = rankings[i]
        if r.query_index != i:
            raise ValueError(f"ranking {i} belongs to query {r.query_index}")
        q = d.queries[i]
        rel = _relevance(q, g_ident[r.ordered_gallery], g_cam[r.ordered_gallery], protocol)
        return evaluate_query(rel, q.image_id)

    results = ordered_map(work, range(len(rankings)), threads)
    valid = [r for r in results if r.valid]
    invalid = tuple(r.query_id for r in results if not r.valid)
    if not valid:
        raise AllQueriesInvalid(f"all {len(results)} queries lack targets")

    out: dict[str, float] = {}
    if "cmc" in measures:
        for k in ks:
            out[f"cmc@{k}"] = sum(1 for r in valid if r.first_hit <= k) / len(valid)
    if "map" in measures:
        out["map"] = math.fsum(r.ap for r in valid) / len(valid)
    if "mcgm" in measures:
        out["mcgm"] = mean_cgm(r.cgm for r in results)
    return EvalReport(out, len(results), len(valid), invalid, tuple(results) if per_query else None)


_TITLES = {"map": "mAP", "mcgm": "mCGM"}


def _title(measure: str) -> str:
    if measure.startswith("cmc@"):
        return "CMC@" + measure[4:]
    return _TITLES.get(measure, measure)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write("measure,value\n")
    for name, value in report.per_measure.items():
        buf.write(f"{name},{value:.4f}\n")
    return buf.getvalue()


def report_markdown(report: EvalReport, model: str = "model") -> str:
    cols = list(report.per_measure)
    lines = [
        "| Method | " + " | ".join(_title(c) for c in cols) + " |",
        "|---|" + "---|" * len(cols),
        f"| {model} | " + " | ".join(f"{report.per_measure[c]:.4f}" for c in cols) + " |",
    ]
    return "\n".join(lines) + "\n"


def per_query_csv(report: EvalReport) -> str:
    if report.per_query is None:
        raise ValueError("report was built without per-query results")
    buf = io.StringIO()
    buf.write("query_id,ap,cgm,n_cameras,per_camera\n")
    for r in report.per_query:
        if not r.valid:
            buf.write(f"{r.query_id},,,0,\n")
            continue
        cams = ";".join(f"{c}:{v:.4f}" for c, v in r.per_camera.items())
        buf.write(f"{r.query_id},{r.ap:.4f},{r.cgm:.4f},{r.n_cameras},{cams}\n")
    return buf.getvalue()
