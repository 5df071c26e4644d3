"""Direction proposals: kernels of random row-submatrices of L, filtered by sparsity.

A correct direction q makes ``L @ q`` a (scaled) column of the sparse
pre-activation gradient, so about half its entries vanish. Mixtures of
several columns are much denser and are discarded by a binomial-tail threshold.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

_KEY_EPS = 1e-9


# ---------------------------------------------------------------------------
# binomial(m, 1/2) lower tail
# ---------------------------------------------------------------------------


def log_binom_half_cdf(k: int, m: int) -> float:
    """log of 2^-m * sum_{i<=k} C(m, i), stable for large m."""
    if k < 0:
        return -math.inf
    if k >= m:
        return 0.0
    i = np.arange(k + 1)
    log_terms = gammaln(m + 1) - gammaln(i + 1) - gammaln(m - i + 1) - m * math.log(2.0)
    return float(logsumexp(log_terms))


def false_rejection_prob(tau: float, m: int) -> float:
    """Binomial(m, 1/2) probability of at most floor(tau*m) zeros in a correct direction."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    k = math.floor(m * tau + _KEY_EPS)
    return math.exp(log_binom_half_cdf(k, m))


def solve_tau(m: int, p_fr: float) -> float:
    """Largest tau = k/m whose binomial(m, 1/2) tail at k stays within ``p_fr``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 < p_fr < 1.0:
        raise ValueError("p_fr must lie in (0, 1)")
    log_p = math.log(p_fr)
    if log_binom_half_cdf(0, m) > log_p:
        warnings.warn(
            f"no sparsity threshold keeps false rejection below {p_fr:g} for m={m}; using tau=0",
            RuntimeWarning,
        )
        return 0.0
    # the tail is increasing in k: bisect for the last k with cdf <= p_fr
    lo, hi = 0, m
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if log_binom_half_cdf(mid, m) <= log_p:
            lo = mid
        else:
            hi = mid - 1
    return lo / m


# ---------------------------------------------------------------------------
# configuration and candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    max_samples: int = 100_000
    chunk_size: int = 10_000
    tau: Optional[float] = None
    target_false_reject: float = 1e-5
    zero_rel_tol: float = 1e-9
    robust_mode: bool = False
    noise_sigma: float = 0.0
    noise_mult: float = 3.0
    kernel_rel_tol: float = 1e-6
    angle_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_samples < 1 or self.chunk_size < 1:
            raise ValueError("max_samples and chunk_size must be positive")
        if self.tau is not None and not 0.0 <= self.tau <= 0.5:
            raise ValueError("tau must lie in [0, 0.5]")
        if not 0.0 < self.target_false_reject < 1.0:
            raise ValueError("target_false_reject must lie in (0, 1)")
        if self.zero_rel_tol < 0 or self.noise_sigma < 0:
            raise ValueError("tolerances must be non-negative")

    @property
    def effective_chunk(self) -> int:
        return min(self.chunk_size, self.max_samples)

    @property
    def n_chunks(self) -> int:
        return math.ceil(self.max_samples / self.effective_chunk)

    def submatrix_rows(self, b: int) -> int:
        return b + 1 if self.robust_mode else b - 1

    def tau_for(self, m: int) -> float:
        if self.tau is not None:
            return self.tau
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return solve_tau(m, self.target_false_reject)

    def min_zeros(self, m: int) -> int:
        return math.ceil(self.tau_for(m) * m - _KEY_EPS)

    def with_seed(self, seed: int) -> "SamplerConfig":
        return replace(self, seed=seed)


@dataclass
class DirectionCandidate:
    q: np.ndarray
    sparsity: int
    sample_index: int
    source_rows: tuple[int, ...] = field(default=())


def canonical_sign(q: np.ndarray) -> np.ndarray:
    """Flip so the entry of largest magnitude (first on ties) is positive."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        return -q if q[np.argmax(np.abs(q))] < 0 else q
    pivot = q[np.arange(q.shape[0]), np.argmax(np.abs(q), axis=1)]
    return np.where(pivot[:, None] < 0, -q, q)


# ---------------------------------------------------------------------------
# zero decisions
# ---------------------------------------------------------------------------


def _zero_thresholds(L: np.ndarray, V: np.ndarray, Qbar: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Per-column magnitude below which entries of ``V = L @ Qbar`` count as zero."""
    m = L.shape[0]
    thr = cfg.zero_rel_tol * np.linalg.norm(V, axis=0) / math.sqrt(m)
    if cfg.noise_sigma > 0:
        # noise of std sigma in dW reaches (L q)_j with std sigma * ||S^-1/2 q||
        col_sq = np.einsum("ij,ij->j", L, L)
        noise = cfg.noise_sigma * np.sqrt(np.einsum("ij,i->j", Qbar**2, 1.0 / col_sq))
        thr = np.maximum(thr, cfg.noise_mult * noise)
    return thr


def zero_mask(L: np.ndarray, Qbar: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Boolean ``m x k`` mask of the near-zero entries of ``L @ Qbar``."""
    Qbar = np.asarray(Qbar, dtype=np.float64)
    if Qbar.ndim == 1:
        Qbar = Qbar[:, None]
    V = L @ Qbar
    return np.abs(V) <= _zero_thresholds(L, V, Qbar, cfg)[None, :]


def sparsity_count(L: np.ndarray, q: np.ndarray, zero_rel_tol: float = 1e-9, cfg: Optional[SamplerConfig] = None) -> int:
    """Number of near-zero entries of ``L @ q`` (relative to its RMS magnitude)."""
    if cfg is None:
        cfg = SamplerConfig(zero_rel_tol=zero_rel_tol)
    return int(zero_mask(L, q, cfg).sum())


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _kernels(stack: np.ndarray, robust: bool, cfg: SamplerConfig, col_sq: Optional[np.ndarray] = None):
    """Kernel directions of a stack of ``r x b`` matrices plus a validity mask."""
    k, r, b = stack.shape
    _, s, Vt = np.linalg.svd(stack, full_matrices=True)
    q = canonical_sign(Vt[:, -1, :])
    top = s[:, 0]
    if not robust:
        if r == 0:
            valid = np.ones(k, dtype=bool)
        else:
            valid = (top > 0) & (s[:, -1] > cfg.kernel_rel_tol * top)
        return q, valid
    # overdetermined: demand exactly one small singular value
    small = s[:, b - 1]
    second = s[:, b - 2] if b >= 2 else top
    null_tol = cfg.kernel_rel_tol * top
    if cfg.noise_sigma > 0 and col_sq is not None:
        noise_fro = cfg.noise_sigma * math.sqrt(r * float(np.sum(1.0 / col_sq)))
        null_tol = np.maximum(null_tol, cfg.noise_mult * noise_fro)
    valid = (top > 0) & (small <= null_tol) & (second > null_tol)
    return q, valid


def kernel_direction(L_A: np.ndarray, robust: bool = False, cfg: Optional[SamplerConfig] = None,
                     col_sq: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Unit kernel vector of ``L_A`` or None when the kernel is not one-dimensional."""
    cfg = cfg or SamplerConfig(robust_mode=robust)
    L_A = np.asarray(L_A, dtype=np.float64)
    q, valid = _kernels(L_A[None], robust, cfg, col_sq)
    return q[0] if valid[0] else None


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------


def _sample_rows(rng: np.random.Generator, m: int, r: int, k: int) -> np.ndarray:
    if r == 0:
        return np.empty((k, 0), dtype=np.int64)
    if 2 * r > m:
        return np.sort(np.argsort(rng.random((k, m)), axis=1)[:, :r], axis=1)
    idx = np.sort(rng.integers(0, m, size=(k, r)), axis=1)
    while True:
        dup = np.any(idx[:, 1:] == idx[:, :-1], axis=1)
        if not dup.any():
            return idx
        idx[dup] = np.sort(rng.integers(0, m, size=(int(dup.sum()), r)), axis=1)


@dataclass
class ChunkProposals:
    """Filtered proposals of one chunk, stored as arrays."""

    chunk_index: int
    q: np.ndarray
    sparsity: np.ndarray
    sample_index: np.ndarray
    rows: np.ndarray

    def __len__(self) -> int:
        return len(self.sparsity)

    def candidates(self) -> list[DirectionCandidate]:
        return [
            DirectionCandidate(self.q[i], int(self.sparsity[i]), int(self.sample_index[i]),
                               tuple(int(x) for x in self.rows[i]))
            for i in range(len(self))
        ]


def propose_chunk_arrays(L: np.ndarray, cfg: SamplerConfig, chunk_index: int) -> ChunkProposals:
    m, b = L.shape
    r = cfg.submatrix_rows(b)
    if m < r:
        raise ValueError(f"L has {m} rows, need at least {r}")
    size = cfg.effective_chunk
    first = chunk_index * size
    size = max(0, min(size, cfg.max_samples - first))
    rng = np.random.default_rng([cfg.seed, chunk_index])
    rows = _sample_rows(rng, m, r, size)
    col_sq = np.einsum("ij,ij->j", L, L)
    q, valid = _kernels(L[rows], cfg.robust_mode, cfg, col_sq)
    keep = np.flatnonzero(valid)
    q = q[keep]
    counts = zero_mask(L, q.T, cfg).sum(axis=0)
    passed = counts >= cfg.min_zeros(m)
    sel = keep[passed]
    return ChunkProposals(chunk_index, q[passed], counts[passed].astype(np.int64),
                          first + sel, rows[sel])


def propose_chunk(L: np.ndarray, cfg: SamplerConfig, chunk_index: int) -> list[DirectionCandidate]:
    """Sample ``chunk_size`` submatrices and keep kernels passing the sparsity filter.

    The row draws depend only on ``(cfg.seed, chunk_index)``, so chunks can be
    evaluated in any order or concurrently.
    """
    return propose_chunk_arrays(L, cfg, chunk_index).candidates()


def iter_chunks(L: np.ndarray, cfg: SamplerConfig, workers: int = 1) -> Iterable[ChunkProposals]:
    """Chunk proposals in chunk order, optionally computed ahead on a thread pool."""
    n = cfg.n_chunks
    if workers <= 1:
        for c in range(n):
            yield propose_chunk_arrays(L, cfg, c)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, n, workers):
            batch = range(start, min(n, start + workers))
            yield from pool.map(lambda c: propose_chunk_arrays(L, cfg, c), batch)


# ---------------------------------------------------------------------------
# deduplication
# ---------------------------------------------------------------------------


class CandidatePool:
    """Deduplicated candidate directions, grown incrementally in arrival order."""

    def __init__(self, b: int, angle_tol: float = 1e-6):
        self.b = b
        self.angle_tol = angle_tol
        self._q = np.empty((0, b))
        self._sparsity: list[int] = []
        self._sample: list[int] = []
        self._rows: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._sparsity)

    @property
    def directions(self) -> np.ndarray:
        return self._q

    @property
    def sparsity(self) -> np.ndarray:
        return np.asarray(self._sparsity, dtype=np.int64)

    @property
    def sample_index(self) -> np.ndarray:
        return np.asarray(self._sample, dtype=np.int64)

    def add_arrays(self, q: np.ndarray, sparsity: Sequence[int], sample_index: Sequence[int],
                   rows: Optional[Sequence] = None) -> int:
        added = 0
        for i in range(len(sparsity)):
            v = q[i]
            src = tuple(int(x) for x in rows[i]) if rows is not None else ()
            if len(self):
                dots = np.abs(self._q @ v)
                j = int(np.argmax(dots))
                if dots[j] >= 1.0 - self.angle_tol:
                    if sparsity[i] > self._sparsity[j]:
                        self._q[j] = v
                        self._sparsity[j] = int(sparsity[i])
                        self._sample[j] = int(sample_index[i])
                        self._rows[j] = src
                    continue
            self._q = np.vstack([self._q, v[None, :]])
            self._sparsity.append(int(sparsity[i]))
            self._sample.append(int(sample_index[i]))
            self._rows.append(src)
            added += 1
        return added

    def add_chunk(self, chunk: ChunkProposals) -> int:
        return self.add_arrays(chunk.q, chunk.sparsity, chunk.sample_index, chunk.rows)

    def add(self, candidates: Iterable[DirectionCandidate]) -> int:
        cands = list(candidates)
        if not cands:
            return 0
        return self.add_arrays(
            np.array([canonical_sign(c.q) for c in cands]),
            [c.sparsity for c in cands],
            [c.sample_index for c in cands],
            [c.source_rows for c in cands],
        )

    def candidates(self) -> list[DirectionCandidate]:
        return [DirectionCandidate(self._q[i].copy(), self._sparsity[i], self._sample[i], self._rows[i])
                for i in range(len(self))]

    def rank(self, rel_tol: float = 1e-6) -> int:
        if not len(self):
            return 0
        s = np.linalg.svd(self._q, compute_uv=False)
        return int(np.count_nonzero(s > rel_tol * s[0]))


def dedup(candidates: Sequence[DirectionCandidate], angle_tol: float = 1e-6) -> list[DirectionCandidate]:
    """Greedy duplicate removal; each survivor carries the best sparsity of its group."""
    cands = list(candidates)
    if not cands:
        return []
    pool = CandidatePool(len(cands[0].q), angle_tol)
    pool.add(cands)
    return pool.candidates()
