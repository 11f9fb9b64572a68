"""Reference forward passes for center pooling and graph relation fusion.

Everything here is eval-mode numpy: dropout is the identity and batch norm
uses supplied running statistics. Parameters are never trained here.

The adjacency pipeline is stage-typed and runs in a fixed order::

    similarity_matrix -> threshold_sparsify -> row_l1_normalize -> renormalize_adjacency

Each step refuses input from any stage other than its predecessor.
"""

from __future__ import annotations

import enum
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import read_matrix, write_matrix

__all__ = [
    "DEFAULT_ALPHA",
    "KernelError",
    "NonAscendingRadii",
    "EmptyMask",
    "ShapeMismatch",
    "StageError",
    "Stage",
    "CenterMask",
    "RelationMatrix",
    "FusionParams",
    "RegionalParams",
    "center_masks",
    "masked_region_pool",
    "regional_embeddings",
    "similarity_matrix",
    "threshold_sparsify",
    "row_l1_normalize",
    "renormalize_adjacency",
    "normalized_adjacency",
    "relation_fusion_forward",
    "graph_relation_module",
    "compose_final_embedding",
    "load_manifest",
    "load_fusion_params",
    "load_regional_params",
    "save_fusion_params",
    "save_regional_params",
]

DEFAULT_ALPHA = 1e-3


class KernelError(ValueError):
    pass


class NonAscendingRadii(KernelError):
    pass


class EmptyMask(KernelError):
    pass


class ShapeMismatch(KernelError):
    pass


class StageError(KernelError):
    pass


# --------------------------------------------------------------------------- center pooling


@dataclass(frozen=True, eq=False)
class CenterMask:
    """Circular mask over a ``width x height`` grid, indexed ``cells[x, y]``.

    ``y`` grows upward from the bottom-left corner; cell ``(x, y)`` is set iff
    ``(x - W/2)^2 + (y - H/2)^2 <= R^2`` at its integer coordinates.
    """

    width: int
    height: int
    radius: float
    cells: np.ndarray

    @property
    def area(self) -> int:
        return int(self.cells.sum())

    def contains(self, other: "CenterMask") -> bool:
        return bool(np.all(self.cells | ~other.cells))


def _mask_cells(width: int, height: int, radius: float) -> np.ndarray:
    x = np.arange(width, dtype=np.float64)[:, None] - width / 2
    y = np.arange(height, dtype=np.float64)[None, :] - height / 2
    cells = x * x + y * y <= radius * radius
    cells.setflags(write=False)
    return cells


def center_masks(width: int, height: int, radii: Sequence[float]) -> list[CenterMask]:
    if width < 1 or height < 1:
        raise ValueError("mask dimensions must be >= 1")
    radii = [float(r) for r in radii]
    if any(not r >= 0 for r in radii):
        raise ValueError(f"radii must be >= 0, got {radii}")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise NonAscendingRadii(f"radii must be strictly ascending, got {radii}")
    half_diag = math.hypot(width, height) / 2
    for r in radii:
        if r > half_diag:
            warnings.warn(f"radius {r} exceeds half the diagonal ({half_diag:.2f}); mask covers the full grid", stacklevel=2)
    return [CenterMask(width, height, r, _mask_cells(width, height, r)) for r in radii]


def masked_region_pool(F: np.ndarray, mask: CenterMask, W_k: np.ndarray, B_k: np.ndarray) -> np.ndarray:
    """Average ``F`` (``C x W x H``) over the mask cells, then ``W_k @ pooled + B_k``."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[1:] != mask.cells.shape:
        raise ShapeMismatch(f"feature map {F.shape} does not match mask grid {mask.cells.shape}")
    if mask.area == 0:
        raise EmptyMask(f"mask of radius {mask.radius} selects no cells")
    W_k = np.atleast_2d(np.asarray(W_k, dtype=np.float64))
    B_k = np.asarray(B_k, dtype=np.float64).reshape(-1)
    if W_k.shape[1] != F.shape[0] or B_k.shape[0] != W_k.shape[0]:
        raise ShapeMismatch(f"affine {W_k.shape} + {B_k.shape} cannot map {F.shape[0]} channels")
    pooled = F[:, mask.cells].mean(axis=1)
    return W_k @ pooled + B_k


@dataclass(frozen=True)
class RegionalParams:
    radii: tuple[float, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (len(self.radii) == len(self.weights) == len(self.biases)):
            raise ShapeMismatch("radii, weights and biases must have one entry per region")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise NonAscendingRadii(f"radii must be strictly ascending, got {list(self.radii)}")


def regional_embeddings(F: np.ndarray, params: RegionalParams) -> list[np.ndarray]:
    F = np.asarray(F)
    if F.ndim != 3:
        raise ShapeMismatch(f"expected a C x W x H feature map, got {F.shape}")
    masks = center_masks(F.shape[1], F.shape[2], params.radii)
    return [masked_region_pool(F, m, w, b) for m, w, b in zip(masks, params.weights, params.biases)]


# --------------------------------------------------------------------------- relation graph


class Stage(enum.Enum):
    RAW = "raw"
    THRESHOLDED = "thresholded"
    ROW_NORMALIZED = "row_normalized"
    RENORMALIZED = "renormalized"


@dataclass(frozen=True, eq=False)
class RelationMatrix:
    stage: Stage
    values: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeMismatch(f"relation matrix must be square, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _expect(a: RelationMatrix, stage: Stage) -> None:
    if not isinstance(a, RelationMatrix) or a.stage is not stage:
        got = a.stage.value if isinstance(a, RelationMatrix) else type(a).__name__
        raise StageError(f"expected a {stage.value} relation matrix, got {got}")


def similarity_matrix(V: np.ndarray) -> RelationMatrix:
    """Inner products between node rows."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if not np.isfinite(V).all():
        raise ValueError("node features must be finite")
    return RelationMatrix(Stage.RAW, V @ V.T)


def threshold_sparsify(A: RelationMatrix, alpha: float = DEFAULT_ALPHA) -> RelationMatrix:
    """Zero every edge weight below ``alpha``; keep the rest."""
    _expect(A, Stage.RAW)
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    v = np.where(A.values >= alpha, A.values, 0.0)
    return RelationMatrix(Stage.THRESHOLDED, v, alpha)


def row_l1_normalize(A: RelationMatrix) -> RelationMatrix:
    """Divide each row by its sum; all-zero rows stay zero."""
    _expect(A, Stage.THRESHOLDED)
    v = A.values
    if (v < 0).any():
        raise ValueError("row normalization needs nonnegative entries")
    sums = v.sum(axis=1, keepdims=True)
    out = np.divide(v, sums, out=np.zeros_like(v), where=sums > 0)
    return RelationMatrix(Stage.ROW_NORMALIZED, out, A.alpha)


def renormalize_adjacency(A: RelationMatrix) -> RelationMatrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D_ii = sum_j A_ij + 1``."""
    _expect(A, Stage.ROW_NORMALIZED)
    v = A.values
    if (v < 0).any():
        raise ValueError("renormalization needs nonnegative entries")
    a = v + np.eye(A.n)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return RelationMatrix(Stage.RENORMALIZED, inv_sqrt[:, None] * a * inv_sqrt[None, :], A.alpha)


def normalized_adjacency(V: np.ndarray, alpha: float = DEFAULT_ALPHA) -> RelationMatrix:
    return renormalize_adjacency(row_l1_normalize(threshold_sparsify(similarity_matrix(V), alpha)))


@dataclass(frozen=True, eq=False)
class FusionParams:
    """Weights for one fusion step.

    ``W_r`` maps the aggregated features and ``W_a`` the residual branch, both
    ``C_in x C_out``. Batch norm vectors have length ``C_out``.
    """

    W_r: np.ndarray
    W_a: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    dropout_active: bool = False

    def __post_init__(self):
        for name in ("W_r", "W_a"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64))
            object.__setattr__(self, name, m)
        if self.W_r.shape != self.W_a.shape:
            raise ShapeMismatch(f"W_r {self.W_r.shape} and W_a {self.W_a.shape} must share C_in x C_out")
        c_out = self.W_r.shape[1]
        for name in ("bn_scale", "bn_shift", "bn_mean", "bn_var"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.shape[0] != c_out:
                raise ShapeMismatch(f"{name} has length {v.shape[0]}, expected {c_out}")
            object.__setattr__(self, name, v)
        if not (self.bn_var > 0).all():
            raise ValueError("bn_var must be strictly positive")
        if self.dropout_active:
            raise ValueError("only eval mode is supported; dropout_active must be False")

    @property
    def c_in(self) -> int:
        return self.W_r.shape[0]

    @property
    def c_out(self) -> int:
        return self.W_r.shape[1]

    @classmethod
    def neutral(cls, c_in: int, c_out: int | None = None, residual: bool = False) -> "FusionParams":
        """Identity-like parameters: ``W_r = I`` (padded), neutral BN, ``W_a = I`` or 0."""
        c_out = c_in if c_out is None else c_out
        eye = np.eye(c_in, c_out)
        return cls(eye, eye if residual else np.zeros((c_in, c_out)), np.ones(c_out), np.zeros(c_out), np.zeros(c_out), np.ones(c_out))


def relation_fusion_forward(V: np.ndarray, A_hat: RelationMatrix, p: FusionParams) -> np.ndarray:
    """``ReLU(BN(A_hat V W_r)) + V W_a`` for ``N x C_in`` node features."""
    _expect(A_hat, Stage.RENORMALIZED)
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if V.shape[0] != A_hat.n:
        raise ShapeMismatch(f"{V.shape[0]} nodes but relation matrix is {A_hat.n} x {A_hat.n}")
    if V.shape[1] != p.c_in:
        raise ShapeMismatch(f"features have {V.shape[1]} channels, weights expect {p.c_in}")
    x = A_hat.values @ V @ p.W_r
    x = (x - p.bn_mean) / np.sqrt(p.bn_var) * p.bn_scale + p.bn_shift
    return np.maximum(x, 0.0) + V @ p.W_a


def graph_relation_module(V: np.ndarray, steps: Sequence[FusionParams], alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Build the normalized relation graph from ``V`` and run the fusion steps on it.

    The graph is computed once from the input nodes and shared by every step.
    """
    if not steps:
        raise ShapeMismatch("graph relation module needs at least one fusion step")
    a_hat = normalized_adjacency(V, alpha)
    out = np.atleast_2d(np.asarray(V, dtype=np.float64))
    for p in steps:
        out = relation_fusion_forward(out, a_hat, p)
    return out


def compose_final_embedding(
    level_vectors: Sequence[np.ndarray],
    f_g: np.ndarray,
    f_r: Sequence[np.ndarray],
    grm: Sequence[FusionParams],
    alpha: float = DEFAULT_ALPHA,
) -> np.ndarray:
    """Concatenate lower-level vectors with the relation output over the top level.

    ``level_vectors`` runs from lowest to highest level. The highest one, the
    global vector and the regional vectors become the nodes of one relation
    graph; its ``N x C_out`` output is flattened row-major after the lower
    levels.
    """
    if not level_vectors:
        raise ShapeMismatch("need at least the highest-level vector")
    *lower, high = [np.asarray(v, dtype=np.float64).reshape(-1) for v in level_vectors]
    nodes = [high, np.asarray(f_g, dtype=np.float64).reshape(-1)]
    nodes += [np.asarray(v, dtype=np.float64).reshape(-1) for v in f_r]
    dims = {v.shape[0] for v in nodes}
    if len(dims) != 1:
        raise ShapeMismatch(f"relation nodes must share one channel size, got {sorted(dims)}")
    fused = graph_relation_module(np.stack(nodes), grm, alpha)
    return np.concatenate(lower + [fused.reshape(-1)])


# --------------------------------------------------------------------------- parameter files
#
# A manifest is a text file of ``key = value`` lines (``#`` comments allowed).
# Matrix values are paths to REMB files relative to the manifest; vectors are
# stored as 1 x C matrices. ``radii`` is a comma-separated list of numbers.

_FUSION_KEYS = ("W_r", "W_a", "bn_scale", "bn_shift", "bn_mean", "bn_var")


def load_manifest(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise KernelError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise KernelError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _manifest_matrix(manifest: dict[str, str], base: Path, key: str) -> np.ndarray:
    if key not in manifest:
        raise KernelError(f"manifest is missing {key!r}")
    return read_matrix(base / manifest[key])


def load_fusion_params(path: str | os.PathLike) -> list[FusionParams]:
    """Fusion steps from keys ``step0.W_r``, ``step0.bn_var``, ``step1.W_r``, ..."""
    manifest = load_manifest(path)
    base = Path(path).parent
    steps = []
    i = 0
    while f"step{i}.W_r" in manifest:
        m = {k: _manifest_matrix(manifest, base, f"step{i}.{k}") for k in _FUSION_KEYS}
        for k in _FUSION_KEYS[2:]:
            m[k] = m[k].reshape(-1)
        steps.append(FusionParams(**m))
        i += 1
    if not steps:
        raise KernelError(f"{path}: no fusion steps (expected step0.W_r ...)")
    return steps


def save_fusion_params(path: str | os.PathLike, steps: Sequence[FusionParams]) -> None:
    path = Path(path)
    lines = []
    for i, p in enumerate(steps):
        for k in _FUSION_KEYS:
            name = f"step{i}.{k}.remb"
            write_matrix(path.parent / name, getattr(p, k))
            lines.append(f"step{i}.{k} = {name}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_regional_params(path: str | os.PathLike) -> RegionalParams:
    """Regions from ``radii = r1, r2, ...`` plus ``region<k>.W`` / ``region<k>.B`` files."""
    manifest = load_manifest(path)
    base = Path(path).parent
    if "radii" not in manifest:
        raise KernelError(f"{path}: missing 'radii'")
    try:
        radii = tuple(float(r) for r in manifest["radii"].split(",") if r.strip())
    except ValueError:
        raise KernelError(f"{path}: radii must be numbers") from None
    weights = tuple(_manifest_matrix(manifest, base, f"region{k}.W") for k in range(len(radii)))
    biases = tuple(_manifest_matrix(manifest, base, f"region{k}.B").reshape(-1) for k in range(len(radii)))
    return RegionalParams(radii, weights, biases)


def save_regional_params(path: str | os.PathLike, params: RegionalParams) -> None:
    path = Path(path)
    lines = ["radii = " + ", ".join(repr(r) for r in params.radii)]
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        write_matrix(path.parent / f"region{k}.W.remb", w)
        write_matrix(path.parent / f"region{k}.B.remb", b)
        lines += [f"region{k}.W = region{k}.W.remb", f"region{k}.B = region{k}.B.remb"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
