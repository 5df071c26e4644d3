import json

import numpy as np
import pytest

from spear import fcnn
from spear.harness import cli, experiments as ex
from spear.harness.config import ConfigError, ExperimentConfig, load_config
from spear.harness.io import DataError, load_batch, read_dump, write_dump, write_raw_batch
from spear.harness.metrics import evaluate, match_columns, psnr


def test_csv_zeros(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("0,0\n0,0\n0,0\n0,0\n")
    batch = load_batch("csv", str(p), n=4, b=2)
    np.testing.assert_array_equal(batch.X, np.zeros((4, 2)))


def test_csv_shape_and_finite_checks(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("1,2\n3,4\n")
    with pytest.raises(DataError):
        load_batch("csv", str(p), n=3)
    p.write_text("1,nan\n3,4\n")
    with pytest.raises(DataError):
        load_batch("csv", str(p))


def test_raw_roundtrip_and_byte_count(tmp_path):
    rng = np.random.default_rng(0)
    batch = fcnn.Batch(rng.random((784, 3)), np.array([3, 1, 4]), (0.0, 1.0))
    path = tmp_path / "b.bin"
    write_raw_batch(path, batch)
    assert path.stat().st_size == 784 * 3 * 8
    back = load_batch("raw", str(path))
    np.testing.assert_array_equal(back.X, batch.X)
    assert list(back.labels) == [3, 1, 4]


def test_raw_truncated(tmp_path):
    path = tmp_path / "b.bin"
    write_raw_batch(path, fcnn.Batch(np.ones((5, 2)), np.zeros(2, dtype=int)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError, match="bytes"):
        load_batch("raw", str(path))


def test_dump_roundtrip(tmp_path):
    arrays = {"A": np.arange(6.0).reshape(2, 3), "v": np.array([1.0, -2.0])}
    write_dump(tmp_path / "d.bin", arrays, {"depth": 2})
    back, meta = read_dump(tmp_path / "d.bin")
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert meta["depth"] == 2


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("batch_size = 3  # comment\nrobust_mode = yes\ntheory_bs = 3, 4\n")
    cfg = load_config(str(p), {"seed": "9"})
    assert cfg.batch_size == 3 and cfg.robust_mode and cfg.seed == 9 and cfg.theory_bs == (3, 4)
    with pytest.raises(ConfigError):
        load_config(None, {"nope": "1"})
    with pytest.raises(ConfigError):
        load_config(None, {"batch_size": "x"})


def test_config_invariants():
    with pytest.raises(ConfigError):
        ExperimentConfig(layer=4, depth=4)
    with pytest.raises(ConfigError):
        ExperimentConfig(fedavg_epochs=2, clip_norm=1.0)
    assert ExperimentConfig(noise_rel=1e-5).effective_accept_lambda() < 1


def test_psnr_and_matching():
    assert psnr(0.0, (0, 1)) == float("inf")
    assert psnr(0.01, (0, 1)) == pytest.approx(20.0)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 4))
    perm = [2, 0, 3, 1]
    assert match_columns(X[:, perm], X) == [1, 3, 0, 2]


def test_metrics_invariant_to_column_shuffle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 4))
    Xr = X + 1e-3 * rng.normal(size=X.shape)
    a = evaluate(Xr, X, (0, 1))
    p = [3, 1, 0, 2]
    b = evaluate(Xr, X[:, p], (0, 1))
    for f in ("max_abs_error", "mae", "relative_mae", "psnr", "recovered"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12)


def test_missing_reconstruction_is_not_recovered():
    m = evaluate(None, np.ones((3, 2)), (0, 1))
    assert not m.recovered and m.max_abs_error == float("inf")


def test_accuracy_is_exact_fraction():
    rows = [{"recovered": r, "max_abs_error": 0.0, "relative_mae": 0.0, "mae": 0.0, "psnr": 1.0,
             "samples_used": 1, "pool_size": 1, "lambda": 1.0, "converged": r} for r in (True, False, True)]
    assert ex.summarize(rows)["accuracy"] == 2 / 3


def test_single_example_trial():
    row, _ = ex.run_trial(ExperimentConfig(batch_size=1, trials=1), 0)
    assert row["recovered"] and row["max_abs_error"] < 1e-10


def test_layer_one_via_attack_layer_matches_attack(tmp_path):
    assert cli.main(["attack", "--trials", "2", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["attack-layer", "--layer", "1", "--trials", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/trials.csv").read_bytes() == (tmp_path / "b/trials.csv").read_bytes()


def test_cli_error_codes(tmp_path, capsys):
    assert cli.main(["attack-layer", "--layer", "4", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["attack", "--set", "data_source=csv", "--set", "data_path=/does/not/exist",
                     "--out", str(tmp_path)]) == cli.EXIT_DATA
    assert cli.main(["attack", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_simulate_then_offline_attack(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path / "sim")]) == 0
    assert cli.main(["attack", "--gradients", str(tmp_path / "sim/gradients.bin"),
                     "--truth", str(tmp_path / "sim/truth.bin"), "--out", str(tmp_path / "off")]) == 0
    doc = json.loads((tmp_path / "off/report.json").read_text())
    assert doc["recovered"] and doc["max_abs_error"] < 1e-8
    X = load_batch("raw", str(tmp_path / "off/reconstruction.bin")).X
    assert X.shape == (64, 4)


def test_analyze_table(tmp_path):
    assert cli.main(["analyze", "--set", "analyze_bs=2,10", "--set", "analyze_ms=50,400",
                     "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "analysis.csv").read_text().splitlines()
    assert lines[0].startswith("b,m,") and len(lines) == 5


def test_run_twice_byte_identical(tmp_path):
    args = ["--trials", "3", "--seed", "11", "--set", "batch_size=3"]
    cli.main(["attack", *args, "--out", str(tmp_path / "a")])
    cli.main(["attack", *args, "--out", str(tmp_path / "b")])
    for name in ("trials.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
