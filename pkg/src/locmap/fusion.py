"""Late fusion of per-descriptor retrieval similarity scores.

Score operators (inputs are n aligned lists of normalized scores over the same
database images, higher = better):

    mean   weighted average          sum_i rho_i * s_i
    power  powered product           prod_i s_i ** rho_i
    min / max                        element-wise
    wmp    beta * mean + (1 - beta) * power
    wmm    (1 - beta) * max + beta * min
    gharm  generalized f-mean with f(x) = 1 / (gamma + x) over x_i = alpha_i * s_i

round_robin merges rank lists instead of scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import WeightShapeMismatch
from .pairing import PairList


class FusionMethod(Enum):
    MEAN = "mean"
    POWER = "power"
    MIN = "min"
    MAX = "max"
    WMP = "wmp"
    WMM = "wmm"
    GHARM = "gharm"
    ROUND_ROBIN = "round_robin"


@dataclass
class FusionParams:
    method: FusionMethod = FusionMethod.MEAN
    rho: Optional[Sequence[float]] = None  # weights for mean/power/wmp
    alpha: Optional[Sequence[float]] = None  # weights for gharm, must sum to 1
    beta: float = 0.5  # wmp/wmm mixing, in [0, 1]
    gamma: float = 1.0  # gharm, > 0

    def resolved_rho(self, n: int) -> np.ndarray:
        if self.rho is None:
            return np.full(n, 1.0 / n)
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (n,):
            raise WeightShapeMismatch(f"rho has shape {rho.shape}, expected ({n},)")
        if np.any(rho < 0):
            raise WeightShapeMismatch("rho weights must be >= 0")
        return rho

    def resolved_alpha(self, n: int) -> np.ndarray:
        if self.alpha is None:
            return np.full(n, 1.0 / n)
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.shape != (n,):
            raise WeightShapeMismatch(f"alpha has shape {alpha.shape}, expected ({n},)")
        if np.any(alpha < 0):
            raise WeightShapeMismatch("alpha weights must be >= 0")
        if abs(float(alpha.sum()) - 1.0) > 1e-9:
            raise WeightShapeMismatch("alpha weights must sum to 1")
        return alpha

    def validate(self):
        if not 0.0 <= self.beta <= 1.0:
            raise WeightShapeMismatch("beta must be in [0, 1]")
        if self.gamma <= 0:
            raise WeightShapeMismatch("gamma must be > 0")


def normalize_scores(score_lists: Sequence[Sequence[float]]) -> List[np.ndarray]:
    """Per-descriptor min-max scaling into [0, 1]; a constant list maps to all
    ones."""
    out = []
    for scores in score_lists:
        s = np.asarray(scores, dtype=float)
        if s.size == 0:
            raise ValueError("score list must be non-empty")
        lo, hi = float(s.min()), float(s.max())
        if hi - lo < 1e-300:
            out.append(np.ones_like(s))
        else:
            out.append((s - lo) / (hi - lo))
    return out


def fuse_scores(params: FusionParams, score_lists: Sequence[Sequence[float]]) -> np.ndarray:
    """Element-wise fused scores (higher = better) from n aligned lists."""
    params.validate()
    if params.method is FusionMethod.ROUND_ROBIN:
        raise ValueError("round_robin operates on rank lists; use round_robin()")
    s = np.asarray([np.asarray(l, dtype=float) for l in score_lists])
    if s.ndim != 2:
        raise WeightShapeMismatch("score lists must all have the same length")
    n = s.shape[0]
    m = params.method
    if m is FusionMethod.MIN:
        return s.min(axis=0)
    if m is FusionMethod.MAX:
        return s.max(axis=0)
    if m is FusionMethod.WMM:
        return (1.0 - params.beta) * s.max(axis=0) + params.beta * s.min(axis=0)
    if m is FusionMethod.MEAN:
        return params.resolved_rho(n) @ s
    if m is FusionMethod.POWER:
        rho = params.resolved_rho(n)
        return np.prod(s ** rho[:, None], axis=0)
    if m is FusionMethod.WMP:
        rho = params.resolved_rho(n)
        mean = rho @ s
        power = np.prod(s ** rho[:, None], axis=0)
        return params.beta * mean + (1.0 - params.beta) * power
    if m is FusionMethod.GHARM:
        alpha = params.resolved_alpha(n)
        x = alpha[:, None] * s
        f = 1.0 / (params.gamma + x)
        return 1.0 / f.mean(axis=0) - params.gamma
    raise ValueError(f"unhandled fusion method {m}")


def round_robin(rank_lists: Sequence[Sequence[str]]) -> List[str]:
    """Merge rank lists by taking heads in circular order, skipping images
    already emitted."""
    out: List[str] = []
    seen = set()
    iters = [iter(l) for l in rank_lists]
    exhausted = [False] * len(iters)
    while not all(exhausted):
        for i, it in enumerate(iters):
            if exhausted[i]:
                continue
            for item in it:
                if item not in seen:
                    seen.add(item)
                    out.append(item)
                    break
            else:
                exhausted[i] = True
    return out


def fuse_pair_lists(
    pair_lists: Sequence[PairList], params: FusionParams, k: Optional[int] = None
) -> PairList:
    """Fuse several per-descriptor retrieval pair lists into one ranking.

    Lists must cover the same query set and, per query, the same database
    images (run retrieval with k covering the full database). Scores are
    min-max normalized per query and descriptor before fusion. For
    round_robin the per-query rankings are merged positionally and the
    emitted rank (1-based) is recorded as 1/rank.
    """
    if not pair_lists:
        return []
    grouped: List[Dict[str, List]] = []
    for pl in pair_lists:
        g: Dict[str, List] = {}
        for a, b, s in pl:
            g.setdefault(a, []).append((b, s))
        grouped.append(g)
    queries = sorted(grouped[0])
    for g in grouped[1:]:
        if sorted(g) != queries:
            raise WeightShapeMismatch("pair lists cover different query sets")
    out: PairList = []
    for q in queries:
        per_desc = [g[q] for g in grouped]
        if params.method is FusionMethod.ROUND_ROBIN:
            merged = round_robin([[b for b, _ in lst] for lst in per_desc])
            if k is not None:
                merged = merged[:k]
            out.extend((q, b, 1.0 / (rank + 1)) for rank, b in enumerate(merged))
            continue
        universe = sorted({b for b, _ in per_desc[0]})
        for lst in per_desc[1:]:
            if sorted({b for b, _ in lst}) != universe:
                raise WeightShapeMismatch(
                    f"query {q!r}: pair lists cover different database images"
                )
        aligned = []
        for lst in per_desc:
            scores = dict(lst)
            aligned.append([scores[b] for b in universe])
        fused = fuse_scores(params, normalize_scores(aligned))
        order = sorted(range(len(universe)), key=lambda i: (-fused[i], universe[i]))
        if k is not None:
            order = order[:k]
        out.extend((q, universe[i], float(fused[i])) for i in order)
    return out
