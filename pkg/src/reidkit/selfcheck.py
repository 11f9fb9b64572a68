"""Invariant sweep over the relation kernels, used by ``reidkit kernels selfcheck``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import relation_kernels as rk

__all__ = ["CheckResult", "FAULTS", "run_selfcheck"]

FAULTS = ("threshold-flip",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _flipped_threshold(A: rk.RelationMatrix, alpha: float) -> rk.RelationMatrix:
    # deliberately wrong: keeps the entries the real kernel drops
    return rk.RelationMatrix(rk.Stage.THRESHOLDED, np.where(A.values < alpha, A.values, 0.0), alpha)


def run_selfcheck(alpha: float = rk.DEFAULT_ALPHA, seed: int = 0, trials: int = 200, fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    threshold: Callable[[rk.RelationMatrix, float], rk.RelationMatrix]
    threshold = _flipped_threshold if fault == "threshold-flip" else rk.threshold_sparsify
    rng = np.random.default_rng(seed)
    graphs = [rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 7)))) for _ in range(trials)]

    checks: list[tuple[str, Callable[[], str | None]]] = []

    def check(fn):
        checks.append((fn.__name__, fn))
        return fn

    @check
    def mask_nesting():
        for w, h in ((64, 64), (17, 9), (1, 1)):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                masks = rk.center_masks(w, h, [0, 1.5, 4, 8, 16, 40])
            for a, b in zip(masks, masks[1:]):
                if not b.contains(a):
                    return f"{w}x{h}: R={a.radius} not inside R={b.radius}"

    @check
    def mask_extremes():
        (m0,) = rk.center_masks(8, 8, [0])
        if m0.area != 1 or not m0.cells[4, 4]:
            return "R=0 should select only the center cell"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            (big,) = rk.center_masks(8, 8, [math.inf])
        if big.area != 64:
            return "huge radius should cover the grid"

    @check
    def mask_disc_area():
        (m,) = rk.center_masks(64, 64, [16])
        ratio = m.area / (math.pi * 16**2)
        if not 0.95 <= ratio <= 1.05:
            return f"area ratio {ratio:.4f}"

    @check
    def similarity_symmetry():
        for V in graphs:
            A = rk.similarity_matrix(V).values
            if not np.array_equal(A, A.T):
                return "similarity not symmetric"
            if not np.allclose(np.diag(A), (V * V).sum(axis=1), rtol=1e-12, atol=1e-12):
                return "diagonal != squared norms"

    @check
    def threshold_zeroing():
        for V in graphs:
            A = rk.similarity_matrix(V)
            for a in (alpha, float(A.values.max()) + 1.0):
                T = threshold(A, a).values
                below = A.values < a
                if (T[below] != 0).any():
                    return f"alpha={a}: entry below threshold kept"
                if not np.array_equal(T[~below], A.values[~below]):
                    return f"alpha={a}: entry at/above threshold changed"

    @check
    def l1_rows():
        for V in graphs:
            N = rk.row_l1_normalize(threshold(rk.similarity_matrix(V), alpha)).values
            sums = N.sum(axis=1)
            ok = np.isclose(sums, 1.0, atol=1e-12) | (sums == 0)
            if not ok.all() or (N < 0).any() or (N > 1).any():
                return "row sums must be 1 or 0 with entries in [0, 1]"

    @check
    def renorm_finite_nonneg():
        for V in graphs:
            R = rk.renormalize_adjacency(rk.row_l1_normalize(threshold(rk.similarity_matrix(V), alpha))).values
            if not np.isfinite(R).all() or (R < 0).any() or R.max() > 1 + 1e-12:
                return "renormalized matrix must be finite, nonnegative and <= 1"
        Z = rk.renormalize_adjacency(rk.RelationMatrix(rk.Stage.ROW_NORMALIZED, np.zeros((3, 3)))).values
        if not np.array_equal(Z, np.eye(3)):
            return "zero matrix should renormalize to identity"

    @check
    def fusion_neutral_identity():
        for V in graphs:
            n, c = V.shape
            out = rk.relation_fusion_forward(V, rk.RelationMatrix(rk.Stage.RENORMALIZED, np.eye(n)), rk.FusionParams.neutral(c))
            if not np.array_equal(out, np.maximum(V, 0.0)):
                return "neutral parameters should reduce to ReLU"

    @check
    def l1_scale_invariance():
        for V in graphs:
            a = rk.row_l1_normalize(threshold(rk.similarity_matrix(V), 0.0)).values
            b = rk.row_l1_normalize(threshold(rk.similarity_matrix(3.0 * V), 0.0)).values
            if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
                return "L1 rows changed under uniform scaling"

    results = []
    for name, fn in checks:
        try:
            detail = fn()
        except Exception as exc:  # a crash counts as a failed property
            detail = f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, detail is None, detail or ""))
    return results
