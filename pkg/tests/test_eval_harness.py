import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calibfw import eval_harness as ev
from calibfw.incremental import BiCParams, DomainData, StrategyConfig, train_incremental
from calibfw.nn.network import Network, make_arch
from calibfw.nn.train import TrainConfig
from calibfw.pano_pipeline import ArrayDataset


def test_perfect_predictions_zero_error():
    y = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    r = ev.report_from_predictions(y, y)
    assert (r.mse_focal, r.mse_pitch, r.mse_roll, r.mu_mse) == (0, 0, 0, 0)


def test_constant_prediction_hand_value():
    y = np.full((8, 3), 0.5)
    p = np.full((8, 3), 0.5)
    p[:, 0] = 0.0
    r = ev.report_from_predictions(p, y)
    assert r.mse_focal == 0.25 and r.mse_pitch == 0 and r.mse_roll == 0


def test_channel_order():
    y = np.zeros((4, 3))
    p = np.tile([0.1, 0.2, 0.3], (4, 1))  # focal, pitch, roll
    r = ev.report_from_predictions(p, y)
    assert r.mse_focal == pytest.approx(0.01) and r.mse_pitch == pytest.approx(0.04)
    assert r.mse_roll == pytest.approx(0.09)


@settings(max_examples=50)
@given(arrays(np.float64, (12, 3), elements=st.floats(-2, 2)), arrays(np.float64, (12, 3), elements=st.floats(-2, 2)))
def test_mu_mse_identity_and_order_invariance(p, y):
    r = ev.report_from_predictions(p, y)
    assert abs(r.mu_mse - (r.mse_focal + r.mse_roll + r.mse_pitch) / 3) < 1e-12
    assert min(r.mse_focal, r.mse_roll, r.mse_pitch) >= 0
    perm = np.random.default_rng(0).permutation(12)
    r2 = ev.report_from_predictions(p[perm], y[perm])
    assert abs(r2.mu_mse - r.mu_mse) < 1e-12


def test_evaluate_empty_dataset(micro_net):
    with pytest.raises(ValueError, match="empty"):
        ev.evaluate(micro_net, ArrayDataset(np.zeros((0, 3, 16, 16), np.float32), np.zeros((0, 3)), "void"))


def dataset(n=20, seed=0, name="d"):
    rng = np.random.default_rng(seed)
    return ArrayDataset(rng.normal(size=(n, 3, 16, 16)).astype(np.float32),
                        rng.uniform(-1, 1, (n, 3)).astype(np.float32), name)


def test_evaluate_bic_dual_reporting(micro_net):
    reps = ev.evaluate(micro_net, dataset(), BiCParams(np.array([1.5, 1, 1]), np.zeros(3)))
    assert [r.corrected for r in reps] == [False, True]
    assert reps[0].mse_focal != reps[1].mse_focal and reps[0].mse_roll == reps[1].mse_roll


def test_cross_evaluate_grid_symmetric_for_identical_models(micro_net):
    sets = {"A-val": dataset(seed=1), "A-test": dataset(seed=2), "B-val": dataset(seed=3), "B-test": dataset(seed=4)}
    grid = ev.cross_evaluate({"m1": micro_net, "m2": micro_net.copy()}, sets)
    assert len(grid) == 2 and all(len(row) == 4 for row in grid)
    assert [r.mu_mse for r in grid[0]] == [r.mu_mse for r in grid[1]]
    assert [r.dataset for r in grid[0]] == list(sets)


def test_sweep_rows_sorted_and_zero_row_is_lwf(tiny_domains):
    a, b = tiny_domains
    base = Network(make_arch("calibnet-micro", input_size=16), seed=0)
    old, new = DomainData(a["train"], a["val"]), DomainData(b["train"], b["val"])
    cfg = TrainConfig(epochs=1, seed=2)
    sweep = ev.exemplar_sweep(base, old, new, [50, 0], cfg)
    assert sweep.pcts == [0.0, 50.0] and len(sweep.rows) == 2
    lwf = train_incremental(base, old, new, StrategyConfig("lwf"), cfg)
    assert sweep.rows[0][1] == ev.evaluate(lwf.net, old.val)[0].mu_mse


def test_sweep_rejects_bad_pcts(micro_net):
    with pytest.raises(ValueError):
        ev.exemplar_sweep(micro_net, None, None, [-5], TrainConfig())
    with pytest.raises(ValueError):
        ev.SweepResult([(20, 0.1, 0.1), (10, 0.1, 0.1)])


def reports():
    return [ev.EvalReport("indoor", "indoor-val", 0.1, 0.2, 0.3, 40), ev.EvalReport("indoor", "outdoor-val", 0.4, 0.5, 0.6, 40),
            ev.EvalReport("outdoor", "indoor-val", 0.3, 0.3, 0.3, 40)]


def test_csv_layout(tmp_path):
    path = ev.emit_report(reports()[:1], tmp_path / "one.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == list(ev.CSV_COLUMNS)
    assert len(rows) == 2
    assert float(rows[1][5]) == pytest.approx(0.2)


def test_svg_charts_deterministic(tmp_path):
    a = ev.emit_report(reports(), tmp_path / "a.svg").read_bytes()
    b = ev.emit_report(reports(), tmp_path / "b.svg").read_bytes()
    assert a == b and a.startswith(b"<svg") and b"muMSE" in a
    sweep = ev.SweepResult([(0.0, 0.3, 0.1), (20.0, 0.2, 0.12), (100.0, 0.1, 0.15)])
    text = ev.emit_report(sweep, tmp_path / "s.svg").read_text()
    assert text.count("<polyline") == 2 and "exemplars (%)" in text


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        ev.emit_report([], tmp_path / "x.csv")
    with pytest.raises(ValueError):
        ev.emit_report(reports(), tmp_path / "x.pdf")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write"):
        ev.emit_report(reports(), blocker / "sub" / "x.csv")


def test_report_filename_template():
    assert ev.report_filename("net a", "indoor/val", "20260101T000000Z") == "net-a_indoor-val_20260101T000000Z.csv"
