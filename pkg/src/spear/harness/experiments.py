"""End-to-end experiments: simulate clients, attack them, score and persist the results."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import analysis, fcnn, lowrank, sampler, selector
from ..sampler import SamplerConfig
from .config import ConfigError, ExperimentConfig
from .io import load_batch, read_dump, write_dump, write_raw_batch
from .metrics import evaluate

log = logging.getLogger(__name__)

TRIAL_COLUMNS = [
    "trial", "b", "inferred_b", "recovered", "converged", "max_abs_error", "mae",
    "relative_mae", "psnr", "lambda", "mismatches", "samples_used", "pool_size", "noise_sigma",
]


def resolve_workers(requested: Optional[int] = None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("SPEAR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SPEAR_THREADS must be an integer, got {env!r}")
    return 1


def map_ordered(fn: Callable, items: Sequence, workers: int) -> list:
    """``[fn(x) for x in items]``, on a process pool when ``workers > 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def trial_seeds(master: int, trial: int) -> dict:
    state = np.random.SeedSequence([master, trial]).generate_state(5)
    return dict(zip(("net", "data", "sampler", "noise", "shuffle"), (int(s) for s in state)))


# ---------------------------------------------------------------------------
# client simulation
# ---------------------------------------------------------------------------


@dataclass
class ClientCase:
    params: fcnn.NetworkParams
    batch: fcnn.Batch
    grads: fcnn.GradientCapture
    layer_input: np.ndarray
    noise_sigma: float


def make_batch(cfg: ExperimentConfig, seed: int) -> fcnn.Batch:
    rng = np.random.default_rng(seed)
    if cfg.data_source == "synthetic-gaussian":
        X = rng.normal(size=(cfg.input_dim, cfg.batch_size))
        labels = rng.integers(0, cfg.num_classes, cfg.batch_size)
        return fcnn.Batch(X, labels, tuple(cfg.data_range))
    batch = load_batch(cfg.data_source, cfg.data_path, n=cfg.input_dim, b=cfg.batch_size,
                       data_range=cfg.data_range)
    if cfg.data_source == "csv":
        batch.labels = rng.integers(0, cfg.num_classes, cfg.batch_size)
    if batch.labels.max(initial=0) >= cfg.num_classes:
        raise ConfigError("batch labels exceed num_classes")
    return batch


def simulate_client(cfg: ExperimentConfig, seeds: dict) -> ClientCase:
    specs = fcnn.mlp_specs(cfg.input_dim, cfg.width, cfg.depth, cfg.num_classes)
    params = fcnn.init_network(specs, seeds["net"])
    batch = make_batch(cfg, seeds["data"])
    trace = fcnn.forward(params, batch.X, batch.labels)
    k = cfg.layer - 1
    layer_input = batch.X if k == 0 else trace.Y[k - 1]
    sigma = 0.0
    if cfg.fedavg_enabled:
        fed = fcnn.FedAvgConfig(cfg.fedavg_epochs, cfg.fedavg_lr, cfg.fedavg_mini_batch, seeds["shuffle"])
        grads = fcnn.fedavg_delta(params, batch, fed)
    elif cfg.dp_enabled:
        per_example = fcnn.per_example_gradients(params, batch.X, batch.labels)
        clean = fcnn.clip_and_noise(per_example, fcnn.DpConfig(cfg.clip_norm, 0.0))
        sigma = cfg.noise_sigma
        if cfg.noise_rel > 0:
            sigma = cfg.noise_rel * float(np.median(np.abs(clean.dW[k])))
        if sigma > 0:
            grads = fcnn.clip_and_noise(per_example, fcnn.DpConfig(cfg.clip_norm, sigma, seeds["noise"]))
        else:
            grads = clean
    else:
        grads = fcnn.backward(params, trace, batch.X, batch.labels)
    return ClientCase(params, batch, grads, layer_input, sigma)


def attack_layer(cfg: ExperimentConfig, dW, db, W, bias, sampler_seed: int, noise_sigma: float = 0.0,
                 workers: int = 1) -> selector.ReconstructionResult:
    scfg = cfg.sampler_config(sampler_seed, noise_sigma)
    floor = 0.0
    if noise_sigma > 0:
        m, n = np.shape(dW)
        floor = cfg.noise_rank_mult * noise_sigma * (math.sqrt(m) + math.sqrt(n))
    return selector.run_attack(dW, db, W, bias, scfg, accept_lambda=cfg.effective_accept_lambda(),
                               rank_rel_tol=cfg.rank_rel_tol, noise_floor=floor, workers=workers)


# ---------------------------------------------------------------------------
# attack experiments
# ---------------------------------------------------------------------------


def run_trial(cfg: ExperimentConfig, trial: int) -> tuple[dict, float]:
    """One simulated client attacked once; returns the CSV row and the wall time."""
    start = time.perf_counter()
    seeds = trial_seeds(cfg.seed, trial)
    case = simulate_client(cfg, seeds)
    k = cfg.layer - 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            res = attack_layer(cfg, case.grads.dW[k], case.grads.db[k], case.params.weights[k],
                               case.params.biases[k], seeds["sampler"], case.noise_sigma)
        except lowrank.DegenerateGradientError:
            res = selector.ReconstructionResult(None, None, None, None, 0, 0, False)
    met = evaluate(res.X, case.layer_input, case.batch.data_range, cfg.recovery_tol)
    row = {
        "trial": trial,
        "b": cfg.batch_size,
        "inferred_b": res.inferred_b,
        "recovered": met.recovered,
        "converged": res.converged,
        "max_abs_error": met.max_abs_error,
        "mae": met.mae,
        "relative_mae": met.relative_mae,
        "psnr": met.psnr,
        "lambda": res.score.value if res.score else math.nan,
        "mismatches": res.score.mismatches if res.score else -1,
        "samples_used": res.samples_used,
        "pool_size": res.pool_size,
        "noise_sigma": case.noise_sigma,
    }
    return row, time.perf_counter() - start


class _TrialRunner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def __call__(self, trial: int):
        return run_trial(self.cfg, trial)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _summary(values: Sequence[float]) -> dict:
    vals = np.asarray([v for v in values if math.isfinite(v)], dtype=float)
    if vals.size == 0:
        return {"count": 0, "median": None, "p10": None, "p90": None}
    p10, med, p90 = np.percentile(vals, [10, 50, 90])
    return {"count": int(vals.size), "median": float(med), "p10": float(p10), "p90": float(p90)}


def summarize(rows: Sequence[dict]) -> dict:
    n = len(rows)
    rec = [r for r in rows if r["recovered"]]
    return {
        "trials": n,
        "recovered": len(rec),
        "accuracy": len(rec) / n if n else 0.0,
        "converged": sum(1 for r in rows if r["converged"]),
        "max_abs_error": _summary([r["max_abs_error"] for r in rows]),
        "relative_mae": _summary([r["relative_mae"] for r in rows]),
        "relative_mae_recovered": _summary([r["relative_mae"] for r in rec]),
        "mae": _summary([r["mae"] for r in rows]),
        "psnr": _summary([r["psnr"] for r in rows]),
        "samples_used": _summary([float(r["samples_used"]) for r in rows]),
        "pool_size": _summary([float(r["pool_size"]) for r in rows]),
        "lambda": _summary([r["lambda"] for r in rows]),
    }


@dataclass
class AttackReport:
    config: dict
    rows: list
    summary: dict
    wall_times: list

    def to_json(self) -> str:
        doc = {
            "kind": "attack",
            "recovery_criterion": f"max abs error < {self.config['recovery_tol']:g} after greedy |cosine| matching",
            "psnr_definition": "10*log10(range^2/MSE) with the configured data range",
            "config": self.config,
            "summary": self.summary,
        }
        return json.dumps(doc, indent=2, sort_keys=False, default=_finite) + "\n"

    def trials_csv(self) -> str:
        return rows_to_csv(self.rows, TRIAL_COLUMNS)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(_dump_json(self.to_json()))
        (out / "trials.csv").write_text(self.trials_csv())
        # wall time varies run to run; kept apart from the reproducible outputs
        timing = [{"trial": r["trial"], "wall_time_s": t} for r, t in zip(self.rows, self.wall_times)]
        (out / "timings.csv").write_text(rows_to_csv(timing, ["trial", "wall_time_s"]))
        return out


def _dump_json(text: str) -> str:
    # json emits Infinity/NaN for non-finite floats; replace with null
    return text.replace("-Infinity", "null").replace("Infinity", "null").replace("NaN", "null")


def run_attack_experiment(cfg: ExperimentConfig, workers: int = 1) -> AttackReport:
    cfg.check_paths()
    results = map_ordered(_TrialRunner(cfg), list(range(cfg.trials)), workers)
    rows = [r for r, _ in results]
    settings = cfg.to_dict()
    settings.pop("out")  # where results land does not change them
    return AttackReport(settings, rows, summarize(rows), [t for _, t in results])


# ---------------------------------------------------------------------------
# theory validation
# ---------------------------------------------------------------------------


def true_directions(factors: lowrank.LowRankFactors, dZ: np.ndarray) -> np.ndarray:
    """Unit, sign-canonical columns of the ground-truth disaggregation matrix."""
    Q = factors.left_inverse() @ dZ
    Q = Q / np.linalg.norm(Q, axis=0)
    return sampler.canonical_sign(Q.T).T


def samples_to_complete(L: np.ndarray, directions: np.ndarray, cfg: SamplerConfig,
                        match_tol: float = 1e-6) -> Optional[int]:
    """Number of samples drawn until every true direction passed the filter, or None."""
    b = directions.shape[1]
    first = np.full(b, -1, dtype=np.int64)
    for chunk in sampler.iter_chunks(L, cfg):
        if len(chunk):
            hits = np.abs(chunk.q @ directions) > 1.0 - match_tol
            for i in range(b):
                idx = np.flatnonzero(hits[:, i])
                if first[i] < 0 and idx.size:
                    first[i] = chunk.sample_index[idx[0]]
        if np.all(first >= 0):
            return int(first.max()) + 1
    return None


class _SamplesTrial:
    def __init__(self, cfg: ExperimentConfig, b: int):
        self.cfg, self.b = cfg, b

    def __call__(self, trial: int) -> Optional[int]:
        cfg, b = self.cfg, self.b
        seeds = trial_seeds(cfg.seed, 1000 * b + trial)
        specs = fcnn.mlp_specs(cfg.input_dim, cfg.theory_width, 2, cfg.num_classes)
        params = fcnn.init_network(specs, seeds["net"])
        rng = np.random.default_rng(seeds["data"])
        X = rng.normal(size=(cfg.input_dim, b))
        labels = rng.integers(0, cfg.num_classes, b)
        g = fcnn.gradients(params, X, labels)
        factors = lowrank.decompose(g.dW[0], cfg.rank_rel_tol)
        if factors.inferred_b != b:
            return None
        scfg = SamplerConfig(max_samples=cfg.max_samples, chunk_size=cfg.theory_chunk,
                             target_false_reject=cfg.p_fr, zero_rel_tol=cfg.zero_rel_tol,
                             seed=seeds["sampler"])
        return samples_to_complete(factors.L, true_directions(factors, g.dZ[0]), scfg)


THEORY_COLUMNS = ["kind", "b", "m", "trials", "predicted", "empirical", "ci_low", "ci_high",
                  "ratio", "p_approx", "note"]


def sampling_cost_rows(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    rows = []
    for b in cfg.theory_bs:
        counts = map_ordered(_SamplesTrial(cfg, b), list(range(cfg.theory_trials)), workers)
        vals = np.array([math.inf if c is None else c for c in counts], dtype=float)
        med = float(np.median(vals))
        pred = analysis.expected_samples(b)
        q_mc = analysis.success_prob_monte_carlo(b, seed=cfg.seed)
        rows.append({
            "kind": "samples", "b": b, "m": cfg.theory_width, "trials": cfg.theory_trials,
            "predicted": pred, "empirical": med,
            "ci_low": float(np.percentile(vals, 25)), "ci_high": float(np.percentile(vals, 75)),
            "ratio": med / pred, "p_approx": math.nan,
            "note": f"incomplete={int(np.sum(~np.isfinite(vals)))};exact_q_mc={q_mc:.4g};"
                    f"predicted_with_exact_q={b * analysis.harmonic(b) / q_mc:.4g}",
        })
    return rows


def failure_rows(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for b in cfg.failure_bs:
        for m in cfg.failure_ms:
            bounds = analysis.failure_prob_bounds(b, m, cfg.failure_p_fr)
            emp = analysis.validate_failure_empirically(b, m, cfg.failure_trials, cfg.seed,
                                                        cfg.failure_p_fr)
            rows.append({
                "kind": "failure", "b": b, "m": m, "trials": cfg.failure_trials,
                "predicted": bounds.p_ub, "empirical": emp.rate,
                "ci_low": emp.ci_low, "ci_high": emp.ci_high,
                "ratio": emp.rate / bounds.p_ub if bounds.p_ub > 0 else math.nan,
                "p_approx": bounds.p_approx,
                "note": "below_ub" if emp.ci_low <= bounds.p_ub else "ABOVE_UB",
            })
    return rows


def validate_theory(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    return sampling_cost_rows(cfg, workers) + failure_rows(cfg)


ANALYZE_COLUMNS = ["b", "m", "q_lower", "n_expected", "n_expected_asymptotic", "n_high_prob",
                   "tau", "p_fr", "p_fail_ub", "p_fail_approx"]


def analyze_table(cfg: ExperimentConfig, p_high: float = 1e-8) -> list[dict]:
    rows = []
    for b in cfg.analyze_bs:
        if b < 2:
            continue
        q = analysis.success_prob_lower(b)
        try:
            n_hp = float(analysis.high_prob_samples(b, p_high, cfg.failure_p_fr))
        except ValueError:
            n_hp = math.nan
        for m in cfg.analyze_ms:
            if m < b:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                tau = sampler.solve_tau(m, cfg.p_fr)
            est = analysis.failure_prob_bounds(b, m, cfg.failure_p_fr)
            rows.append({
                "b": b, "m": m, "q_lower": q, "n_expected": analysis.expected_samples(b),
                "n_expected_asymptotic": analysis.expected_samples_asymptotic(b),
                "n_high_prob": n_hp, "tau": tau, "p_fr": cfg.failure_p_fr,
                "p_fail_ub": est.p_ub, "p_fail_approx": est.p_approx,
            })
    return rows


# ---------------------------------------------------------------------------
# offline simulate / attack
# ---------------------------------------------------------------------------


def simulate_to_dump(cfg: ExperimentConfig, out_dir: str | Path, trial: int = 0) -> Path:
    """Write what the server sees (weights and gradients) plus the private ground truth."""
    cfg.check_paths()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = trial_seeds(cfg.seed, trial)
    case = simulate_client(cfg, seeds)
    arrays = {}
    for k in range(case.params.depth):
        arrays[f"W{k + 1}"] = case.params.weights[k]
        arrays[f"b{k + 1}"] = case.params.biases[k]
        arrays[f"dW{k + 1}"] = case.grads.dW[k]
        arrays[f"db{k + 1}"] = case.grads.db[k]
    meta = {"depth": case.params.depth, "noise_sigma": case.noise_sigma,
            "batch_size": cfg.batch_size, "seed": cfg.seed, "trial": trial}
    write_dump(out / "gradients.bin", arrays, meta)
    write_raw_batch(out / "batch.bin", case.batch)
    trace = fcnn.forward(case.params, case.batch.X, case.batch.labels)
    truth = {"input1": case.batch.X}
    for k in range(1, case.params.depth):
        truth[f"input{k + 1}"] = trace.Y[k - 1]
    write_dump(out / "truth.bin", truth)
    return out


def attack_dump(cfg: ExperimentConfig, gradients: str | Path, truth: Optional[str | Path] = None,
                out_dir: Optional[str | Path] = None) -> dict:
    arrays, meta = read_dump(gradients)
    k = cfg.layer
    try:
        dW, db, W, bias = (arrays[f"{p}{k}"] for p in ("dW", "db", "W", "b"))
    except KeyError as exc:
        raise ConfigError(f"dump has no layer {k}") from exc
    depth = int(meta.get("depth", 0))
    if depth and k >= depth:
        raise ConfigError("the last layer has no succeeding ReLU; attack an earlier layer")
    sigma = float(meta.get("noise_sigma", 0.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = attack_layer(cfg, dW, db, W, bias, cfg.seed, sigma)
    doc = {
        "kind": "offline-attack", "layer": k, "inferred_b": res.inferred_b,
        "converged": res.converged, "lambda": res.score.value if res.score else None,
        "samples_used": res.samples_used, "pool_size": res.pool_size,
    }
    if truth is not None:
        t_arrays, _ = read_dump(truth)
        target = t_arrays[f"input{k}"]
        met = evaluate(res.X, target, tuple(cfg.data_range), cfg.recovery_tol)
        doc.update({"recovered": met.recovered, "max_abs_error": _finite(met.max_abs_error),
                    "relative_mae": _finite(met.relative_mae), "psnr": _finite(met.psnr)})
    if out_dir is not None and res.X is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_raw_batch(out / "reconstruction.bin",
                        fcnn.Batch(res.X, np.zeros(res.X.shape[1], dtype=np.int64), tuple(cfg.data_range)))
        (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    return doc
