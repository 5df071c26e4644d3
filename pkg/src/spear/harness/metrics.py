"""Reconstruction metrics after matching recovered columns to the ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class TrialMetrics:
    recovered: bool
    max_abs_error: float
    mae: float
    relative_mae: float
    psnr: float
    permutation: list


def match_columns(X_rec: np.ndarray, X_true: np.ndarray) -> list[int]:
    """Greedy max-|cosine| assignment; ``perm[j]`` is the recovered column for true column j.

    True columns left unmatched (fewer recovered columns) get -1.
    """
    A = X_rec / np.maximum(np.linalg.norm(X_rec, axis=0), 1e-300)
    B = X_true / np.maximum(np.linalg.norm(X_true, axis=0), 1e-300)
    C = np.abs(A.T @ B)
    perm = [-1] * X_true.shape[1]
    used_r: set = set()
    used_t: set = set()
    # stable order: descending similarity, then recovered index, then true index
    order = sorted(((-C[i, j], i, j) for i in range(C.shape[0]) for j in range(C.shape[1])))
    for _, i, j in order:
        if i in used_r or j in used_t:
            continue
        perm[j] = i
        used_r.add(i)
        used_t.add(j)
    return perm


def psnr(mse: float, data_range: tuple) -> float:
    span = data_range[1] - data_range[0]
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(span * span / mse)


def evaluate(X_rec: Optional[np.ndarray], X_true: np.ndarray, data_range: tuple,
             tol: float = 1e-6) -> TrialMetrics:
    if X_rec is None or X_rec.shape[0] != X_true.shape[0]:
        return TrialMetrics(False, math.inf, math.inf, math.inf, -math.inf, [])
    perm = match_columns(X_rec, X_true)
    aligned = np.full_like(X_true, np.nan)
    for j, i in enumerate(perm):
        if i >= 0:
            aligned[:, j] = X_rec[:, i]
    if np.isnan(aligned).any():
        # missing columns count as zero reconstructions
        aligned = np.nan_to_num(aligned, nan=0.0)
        complete = False
    else:
        complete = True
    diff = aligned - X_true
    max_abs = float(np.abs(diff).max())
    mae = float(np.abs(diff).mean())
    scale = float(np.abs(X_true).mean())
    rel = mae / scale if scale > 0 else (0.0 if mae == 0 else math.inf)
    mse = float(np.mean(diff**2))
    return TrialMetrics(complete and max_abs < tol, max_abs, mae, rel, psnr(mse, data_range), perm)
