import numpy as np
import pytest

from spear import fcnn, lowrank, sampler, selector
from spear.sampler import SamplerConfig
from conftest import make_case


def attack_case(b=4, n=32, m=64, depth=3, seed=0, cfg=None):
    params, X, labels = make_case(n=n, m=m, b=b, depth=depth, classes=5, seed=seed)
    g = fcnn.gradients(params, X, labels)
    res = selector.run_attack(g.dW[0], g.db[0], params.weights[0], params.biases[0],
                              cfg or SamplerConfig(max_samples=20000, chunk_size=2000, seed=seed))
    return res, X, g


def aligned_error(Xr, X):
    from spear.harness.metrics import evaluate
    return evaluate(Xr, X, (0, 1)).max_abs_error


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_attack_recovers_batch(seed):
    res, X, g = attack_case(seed=seed)
    assert res.converged and res.score.mismatches == 0
    assert aligned_error(res.X, X) < 1e-8
    assert res.lambda_history[-1] == 1.0


def test_single_example_closed_form():
    res, X, _ = attack_case(b=1)
    np.testing.assert_allclose(res.X, X, atol=1e-10)
    assert res.inferred_b == 1


def test_true_directions_score_one():
    params, X, labels = make_case(n=32, m=64, b=4, seed=5)
    g = fcnn.gradients(params, X, labels)
    f = lowrank.decompose(g.dW[0])
    ctx = selector.AttackContext(f, params.weights[0], params.biases[0], g.db[0], SamplerConfig())
    Q = f.left_inverse() @ g.dZ[0]
    score, Xr, _ = selector.compute_lambda(ctx, Q / np.linalg.norm(Q, axis=0))
    assert score.mismatches == 0 and score.value == 1.0
    np.testing.assert_allclose(Xr, X, atol=1e-9)


def test_wrong_directions_score_below_one():
    params, X, labels = make_case(n=32, m=64, b=4, seed=5)
    g = fcnn.gradients(params, X, labels)
    f = lowrank.decompose(g.dW[0])
    ctx = selector.AttackContext(f, params.weights[0], params.biases[0], g.db[0], SamplerConfig())
    rng = np.random.default_rng(0)
    score, _, _ = selector.compute_lambda(ctx, rng.normal(size=(4, 4)))
    assert score.value < 1.0


def test_greedy_init_prefers_sparse_and_skips_dependent():
    dirs = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    chosen = selector.greedy_init(dirs, np.array([5, 9, 1, 3]), 3)
    assert chosen == [1, 3, 2]
    with pytest.raises(selector.InsufficientCandidatesError):
        selector.greedy_init(dirs[:2], np.array([1, 2]), 2)


def test_swaps_never_decrease_lambda():
    params, X, labels = make_case(n=32, m=64, b=4, seed=7)
    g = fcnn.gradients(params, X, labels)
    f = lowrank.decompose(g.dW[0])
    cfg = SamplerConfig(max_samples=4000, chunk_size=2000)
    ctx = selector.AttackContext(f, params.weights[0], params.biases[0], g.db[0], cfg)
    pool = sampler.CandidatePool(4)
    for chunk in sampler.iter_chunks(f.L, cfg):
        pool.add_chunk(chunk)
    rng = np.random.default_rng(1)
    extra = sampler.canonical_sign(rng.normal(size=(6, 4)))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    pool.add_arrays(extra, [60] * 6, [-1] * 6)
    _, score, history = selector.greedy_filter(ctx, pool)
    assert all(b >= a for a, b in zip(history, history[1:]))
    assert score.value == 1.0


def test_insufficient_pool_is_reported_not_raised():
    cfg = SamplerConfig(max_samples=3, chunk_size=3)
    res, _, _ = attack_case(cfg=cfg)
    assert res.X is None and not res.converged
    assert res.diagnostics["reason"] == "insufficient candidates"
