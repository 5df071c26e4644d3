"""Choosing b directions from the candidate pool and assembling the reconstruction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lowrank, sampler
from .lowrank import DisaggregationMatrix, LowRankFactors, SingularDirectionsError
from .sampler import CandidatePool, SamplerConfig

log = logging.getLogger(__name__)

SET_RANK_REL_TOL = lowrank.DEFAULT_RANK_REL_TOL


class InsufficientCandidatesError(ValueError):
    pass


@dataclass(frozen=True)
class LambdaScore:
    lambda_minus: int
    lambda_plus: int
    m: int
    b: int

    @property
    def matched(self) -> int:
        return self.lambda_minus + self.lambda_plus

    @property
    def mismatches(self) -> int:
        return self.m * self.b - self.matched

    @property
    def value(self) -> float:
        return self.matched / (self.m * self.b)

    def __lt__(self, other: "LambdaScore") -> bool:
        return self.matched < other.matched


@dataclass
class AttackContext:
    """Everything the score needs, with per-layer products cached."""

    factors: LowRankFactors
    W: np.ndarray
    bias: np.ndarray
    db: np.ndarray
    cfg: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.db = np.asarray(self.db, dtype=np.float64)
        self.projected_db = self.factors.left_inverse() @ self.db

    @property
    def m(self) -> int:
        return self.factors.L.shape[0]

    @property
    def b(self) -> int:
        return self.factors.inferred_b


@dataclass
class ReconstructionResult:
    X: Optional[np.ndarray]
    Q: Optional[DisaggregationMatrix]
    dZ: Optional[np.ndarray]
    score: Optional[LambdaScore]
    samples_used: int
    pool_size: int
    converged: bool
    factors: Optional[LowRankFactors] = None
    lambda_history: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def inferred_b(self) -> int:
        return 0 if self.factors is None else self.factors.inferred_b


def _full_rank(M: np.ndarray, rel_tol: float = SET_RANK_REL_TOL) -> bool:
    s = np.linalg.svd(M, compute_uv=False)
    return bool(s[0] > 0 and s[-1] > rel_tol * s[0])


def compute_lambda(ctx: AttackContext, directions: np.ndarray,
                   masks: Optional[np.ndarray] = None):
    """Sparsity matching score of a direction set (columns of ``directions``).

    Returns ``(LambdaScore, X, Q)``. ``masks`` may carry the precomputed zero
    pattern of ``L @ directions``; it does not depend on the column scales.
    """
    directions = np.asarray(directions, dtype=np.float64)
    scales = np.linalg.solve(directions, ctx.projected_db) if _full_rank(directions) else None
    if scales is None or not np.all(np.isfinite(scales)) or np.any(scales == 0):
        raise SingularDirectionsError("direction set cannot be scaled")
    Q = DisaggregationMatrix.from_directions(directions, scales)
    rec = lowrank.reconstruct(Q, ctx.factors, warn=False)
    Z = ctx.W @ rec.X + ctx.bias[:, None]
    if masks is None:
        masks = sampler.zero_mask(ctx.factors.L, directions, ctx.cfg)
    positive = Z > 0
    lam_minus = int(np.count_nonzero(~positive & masks))
    lam_plus = int(np.count_nonzero(positive & ~masks))
    return LambdaScore(lam_minus, lam_plus, ctx.m, directions.shape[1]), rec.X, Q


def greedy_init(directions: np.ndarray, sparsity: np.ndarray, b: int,
                rel_tol: float = SET_RANK_REL_TOL) -> list[int]:
    """Indices of the sparsest candidates that keep increasing the rank, up to b."""
    directions = np.asarray(directions, dtype=np.float64)
    order = np.argsort(-np.asarray(sparsity), kind="stable")
    chosen: list[int] = []
    for j in order:
        trial = directions[chosen + [int(j)]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] > rel_tol * s[0]:
            chosen.append(int(j))
            if len(chosen) == b:
                return chosen
    raise InsufficientCandidatesError(f"pool spans only {len(chosen)} of {b} dimensions")


def greedy_swap(ctx: AttackContext, directions: np.ndarray, sparsity: np.ndarray,
                chosen: list[int], masks: Optional[np.ndarray] = None):
    """Apply the best strictly improving single swap until none is left.

    Returns ``(chosen, score, history)`` where history lists the lambda after
    initialization and after every swap.
    """
    directions = np.asarray(directions, dtype=np.float64)
    if masks is None:
        masks = sampler.zero_mask(ctx.factors.L, directions.T, ctx.cfg)
    chosen = list(chosen)
    score, _, _ = compute_lambda(ctx, directions[chosen].T, masks[:, chosen])
    history = [score.value]
    c = len(directions)
    while score.mismatches > 0:
        best = None
        best_key = None
        in_set = set(chosen)
        for j in range(c):
            if j in in_set:
                continue
            for i in range(len(chosen)):
                trial = chosen[:i] + [j] + chosen[i + 1:]
                D = directions[trial].T
                if not _full_rank(D):
                    continue
                try:
                    cand, _, _ = compute_lambda(ctx, D, masks[:, trial])
                except SingularDirectionsError:
                    continue
                if cand.matched <= score.matched:
                    continue
                key = (cand.matched, int(sparsity[j]), -j, -i)
                if best_key is None or key > best_key:
                    best_key, best = key, (trial, cand)
        if best is None:
            break
        chosen, score = best
        history.append(score.value)
    return chosen, score, history


def greedy_filter(ctx: AttackContext, pool: CandidatePool):
    directions = pool.directions
    masks = sampler.zero_mask(ctx.factors.L, directions.T, ctx.cfg)
    chosen = greedy_init(directions, pool.sparsity, ctx.b)
    return greedy_swap(ctx, directions, pool.sparsity, chosen, masks)


def _allowed_mismatches(accept_lambda: float, m: int, b: int) -> int:
    return max(0, math.floor((1.0 - accept_lambda) * m * b + 1e-9))


def _finish(ctx: AttackContext, directions: np.ndarray, score: LambdaScore, **kw) -> ReconstructionResult:
    Q = lowrank.disaggregation(directions, ctx.factors, ctx.db)
    rec = lowrank.reconstruct(Q, ctx.factors)
    return ReconstructionResult(rec.X, Q, rec.dZ, score, factors=ctx.factors, **kw)


def run_attack(
    dW: np.ndarray,
    db: np.ndarray,
    W: np.ndarray,
    bias: np.ndarray,
    cfg: SamplerConfig = SamplerConfig(),
    accept_lambda: float = 1.0 - 1e-12,
    rank_rel_tol: float = lowrank.DEFAULT_RANK_REL_TOL,
    noise_floor: float = 0.0,
    batch_size: Optional[int] = None,
    workers: int = 1,
) -> ReconstructionResult:
    """Recover the layer input batch from ``(dW, db)`` of one linear layer."""
    factors = lowrank.decompose(dW, rank_rel_tol, noise_floor=noise_floor, rank=batch_size)
    ctx = AttackContext(factors, W, bias, db, cfg)
    m, b = ctx.m, ctx.b
    allowed = _allowed_mismatches(accept_lambda, m, b)

    if b == 1:
        directions = np.ones((1, 1))
        score, _, _ = compute_lambda(ctx, directions)
        return _finish(ctx, directions, score, samples_used=0, pool_size=1,
                       converged=score.mismatches <= allowed, lambda_history=[score.value])

    pool = CandidatePool(b, cfg.angle_tol)
    best: Optional[tuple] = None
    history: list[float] = []
    samples = 0
    converged = False
    for chunk in sampler.iter_chunks(factors.L, cfg, workers):
        samples += cfg.effective_chunk if chunk.chunk_index < cfg.n_chunks - 1 else (
            cfg.max_samples - chunk.chunk_index * cfg.effective_chunk)
        if not pool.add_chunk(chunk) and best is not None:
            continue
        if pool.rank() < b:
            continue
        chosen, score, hist = greedy_filter(ctx, pool)
        history.extend(hist)
        if best is None or best[1].matched < score.matched:
            best = (pool.directions[chosen].T.copy(), score)
        log.debug("chunk %d: pool=%d lambda=%.6f", chunk.chunk_index, len(pool), score.value)
        if score.mismatches <= allowed:
            converged = True
            break

    if best is None:
        return ReconstructionResult(None, None, None, None, samples, len(pool), False, factors,
                                    diagnostics={"reason": "insufficient candidates",
                                                 "pool_rank": pool.rank()})
    return _finish(ctx, best[0], best[1], samples_used=samples, pool_size=len(pool),
                   converged=converged, lambda_history=history)
