import json

import numpy as np
import numpy.testing as npt
import pytest

from magnet import data
from magnet.data import MarketPanel, SplitSpec

CSV_HEADER = "date,ticker,open,high,low,close,volume\n"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def _row(date, ticker, close, bump=0.0):
    return f"{date},{ticker},{close + bump},{close + 1},{close - 0.5},{close},{1000}\n"


# -- load ----------------------------------------------------------------------


def test_load_panel_basic(tmp_path):
    rows = [
        _row(d, t, c)
        for d, t, c in [
            ("2024-01-02", "BBB", 20.0),
            ("2024-01-02", "AAA", 10.0),
            ("2024-01-03", "AAA", 11.0),
            ("2024-01-03", "BBB", 19.0),
            ("2024-01-04", "AAA", 12.0),
            ("2024-01-04", "BBB", 21.0),
        ]
    ]
    panel = data.load_panel(_write(tmp_path / "p.csv", CSV_HEADER + "".join(rows)))
    assert panel.tickers == ["AAA", "BBB"]  # lexicographic
    assert panel.dates == ["2024-01-02", "2024-01-03", "2024-01-04"]
    assert panel.features.shape == (2, 3, 5)
    assert panel.feature_names == ["open", "high", "low", "close", "volume"]
    npt.assert_array_equal(panel.closes[0], [10.0, 11.0, 12.0])
    npt.assert_array_equal(panel.closes[1], [20.0, 19.0, 21.0])
    npt.assert_array_equal(panel.features[:, :, 3], panel.closes)


def test_load_panel_date_intersection(tmp_path):
    rows = [
        _row("2024-01-02", "AAA", 10.0),
        _row("2024-01-03", "AAA", 11.0),
        _row("2024-01-02", "BBB", 20.0),
        # BBB has no 2024-01-03 row
        _row("2024-01-04", "AAA", 12.0),
        _row("2024-01-04", "BBB", 21.0),
    ]
    panel = data.load_panel(_write(tmp_path / "p.csv", CSV_HEADER + "".join(rows)))
    assert panel.dates == ["2024-01-02", "2024-01-04"]


def test_load_panel_duplicate_row(tmp_path):
    rows = [
        _row("2024-01-02", "AAA", 10.0),
        _row("2024-01-02", "AAA", 10.5),
    ]
    with pytest.raises(ValueError, match=r"\(2024-01-02, AAA\)"):
        data.load_panel(_write(tmp_path / "p.csv", CSV_HEADER + "".join(rows)))


def test_load_panel_nonpositive_price(tmp_path):
    bad = "2024-01-02,AAA,1.0,1.0,1.0,-3.0,100\n"
    with pytest.raises(ValueError, match="non-positive close"):
        data.load_panel(_write(tmp_path / "p.csv", CSV_HEADER + bad))


def test_load_panel_malformed_rows(tmp_path):
    with pytest.raises(ValueError, match="expected 7 fields"):
        data.load_panel(
            _write(tmp_path / "a.csv", CSV_HEADER + "2024-01-02,AAA,1.0\n")
        )
    with pytest.raises(ValueError, match="non-numeric"):
        data.load_panel(
            _write(tmp_path / "b.csv", CSV_HEADER + "2024-01-02,AAA,1,1,1,oops,1\n")
        )
    with pytest.raises(ValueError, match="header"):
        data.load_panel(_write(tmp_path / "c.csv", "ticker,date,close\n"))


def test_save_load_round_trip_bitwise(tmp_path):
    panel = data.synth_panel(n_stocks=3, n_days=12, n_features=4, seed=9)
    path = str(tmp_path / "panel.csv")
    data.save_panel(panel, path)
    back = data.load_panel(path)
    assert back.tickers == panel.tickers
    assert back.dates == panel.dates
    assert back.feature_names == panel.feature_names
    npt.assert_array_equal(back.features, panel.features)
    npt.assert_array_equal(back.closes, panel.closes)


def test_save_panel_manifest(tmp_path):
    panel = data.synth_panel(n_stocks=2, n_days=8, n_features=3, seed=4)
    path = str(tmp_path / "panel.csv")
    data.save_panel(panel, path)
    with open(path + ".manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert manifest["n_stocks"] == 2
    assert manifest["n_days"] == 8
    assert manifest["n_features"] == 3
    assert manifest["feature_names"] == panel.feature_names
    assert len(manifest["sha256"]) == 64
    assert manifest["noise"] == 0.05
    assert manifest["planted_rule_accuracy"] >= 0.95


def test_save_panel_refuses_diverged_closes(tmp_path):
    panel = data.synth_panel(n_stocks=2, n_days=6, n_features=3, seed=1)
    panel.features[:, :, 0] += 1.0
    with pytest.raises(ValueError, match="diverges"):
        data.save_panel(panel, str(tmp_path / "p.csv"))


# -- labels ---------------------------------------------------------------------


def test_make_labels_reference_cases():
    closes = np.array([[10.0, 11.0], [10.0, 10.0], [10.0, 9.0]])
    npt.assert_array_equal(data.make_labels(closes), [[1], [0], [0]])


def test_make_labels_shape_and_range(rng):
    closes = rng.uniform(1, 100, size=(4, 9))
    labels = data.make_labels(closes)
    assert labels.shape == (4, 8)
    assert set(np.unique(labels)) <= {0, 1}


def test_make_labels_needs_two_days():
    with pytest.raises(ValueError):
        data.make_labels(np.ones((3, 1)))


# -- split and normalize -----------------------------------------------------------


def _panel(n, t, f, seed=0):
    return data.synth_panel(n_stocks=n, n_days=t, n_features=f, seed=seed)


def test_split_ten_dates_is_7_1_2():
    splits = data.split_and_normalize(_panel(2, 10, 3))
    assert splits.train.n_days == 7
    assert splits.val.n_days == 1
    assert splits.test.n_days == 2
    assert splits.train.dates + splits.val.dates + splits.test.dates == _panel(2, 10, 3).dates


def test_split_remainder_goes_to_train():
    splits = data.split_and_normalize(_panel(2, 13, 3))
    assert (splits.train.n_days, splits.val.n_days, splits.test.n_days) == (10, 1, 2)


def test_split_normalization_statistics():
    splits = data.split_and_normalize(_panel(3, 40, 4))
    for sub in (splits.train, splits.val, splits.test):
        mean = sub.features.mean(axis=(0, 1))
        npt.assert_allclose(mean, np.zeros(4), rtol=0, atol=1e-9)
        std = sub.features.std(axis=(0, 1))
        npt.assert_allclose(std, np.ones(4), rtol=0, atol=1e-6)


def test_split_keeps_raw_closes():
    panel = _panel(3, 20, 4)
    splits = data.split_and_normalize(panel)
    npt.assert_array_equal(splits.train.closes, panel.closes[:, :14])
    npt.assert_array_equal(splits.test.closes, panel.closes[:, 16:])


def test_split_constant_feature_normalizes_to_zero():
    panel = _panel(2, 20, 4)
    panel.features[:, :, 2] = 7.5
    panel2 = MarketPanel(
        panel.tickers, panel.dates, panel.features, panel.closes, panel.feature_names
    )
    splits = data.split_and_normalize(panel2)
    npt.assert_array_equal(splits.train.features[:, :, 2], np.zeros((2, 14)))


def test_split_no_leakage():
    a = _panel(3, 30, 4, seed=5)
    b = _panel(3, 30, 4, seed=5)
    b.features[:, 27:] += 100.0  # mutate only test-region values
    b.closes[:, 27:] *= 2.0
    sa = data.split_and_normalize(a)
    sb = data.split_and_normalize(b)
    npt.assert_array_equal(sa.train.features, sb.train.features)
    npt.assert_array_equal(sa.val.features, sb.val.features)


def test_split_per_stock_pooling():
    splits = data.split_and_normalize(_panel(3, 40, 4), pooling="per_stock")
    mean = splits.train.features.mean(axis=1)  # per stock, per feature
    npt.assert_allclose(mean, np.zeros((3, 4)), rtol=0, atol=1e-9)


def test_split_empty_split_rejected():
    with pytest.raises(ValueError, match="splits"):
        data.split_and_normalize(_panel(2, 5, 3))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.2)
    with pytest.raises(ValueError):
        SplitSpec(0.8, -0.1, 0.3)


# -- synthetic generator --------------------------------------------------------------


def test_synth_same_seed_bitwise_identical():
    a = data.synth_panel(4, 25, 5, seed=77)
    b = data.synth_panel(4, 25, 5, seed=77)
    assert a.tickers == b.tickers and a.dates == b.dates
    npt.assert_array_equal(a.features, b.features)
    npt.assert_array_equal(a.closes, b.closes)
    assert a.meta == b.meta


def test_synth_zero_noise_is_perfectly_predictable():
    panel = data.synth_panel(3, 30, 4, seed=2, noise=0.0)
    assert panel.meta["planted_rule_accuracy"] == 1.0


def test_synth_moves_are_plus_minus_delta():
    panel = data.synth_panel(3, 30, 4, seed=2, delta=0.01)
    ratios = panel.closes[:, 1:] / panel.closes[:, :-1]
    assert np.all(np.isin(np.round(ratios, 12), [0.99, 1.01]))


def test_synth_label_balance():
    panel = data.synth_panel(8, 400, 5, seed=3)
    labels = data.make_labels(panel.closes)
    assert 0.4 <= labels.mean() <= 0.6


def test_synth_default_noise_keeps_rule_accurate():
    for seed in range(5):
        panel = data.synth_panel(8, 400, 5, seed=seed)
        assert panel.meta["planted_rule_accuracy"] >= 0.95


def test_synth_degenerate_sizes():
    with pytest.raises(ValueError):
        data.synth_panel(0, 10, 3, seed=0)
    with pytest.raises(ValueError):
        data.synth_panel(2, 1, 3, seed=0)
    with pytest.raises(ValueError):
        data.synth_panel(2, 10, 1, seed=0)


# -- panel validation -------------------------------------------------------------------


def test_panel_rejects_unsorted_dates(rng):
    with pytest.raises(ValueError, match="increasing"):
        MarketPanel(
            ["A"], ["2024-01-03", "2024-01-02"],
            rng.uniform(1, 2, (1, 2, 2)), rng.uniform(1, 2, (1, 2)), ["close", "x"],
        )


def test_panel_rejects_duplicate_tickers(rng):
    with pytest.raises(ValueError, match="duplicate"):
        MarketPanel(
            ["A", "A"], ["2024-01-02"],
            rng.uniform(1, 2, (2, 1, 2)), rng.uniform(1, 2, (2, 1)), ["close", "x"],
        )


def test_panel_rejects_nonpositive_closes(rng):
    with pytest.raises(ValueError, match="positive"):
        MarketPanel(
            ["A"], ["2024-01-02"], rng.uniform(1, 2, (1, 1, 2)),
            np.zeros((1, 1)), ["close", "x"],
        )


def test_panel_rejects_shape_mismatch(rng):
    with pytest.raises(ValueError, match="shape"):
        MarketPanel(
            ["A", "B"], ["2024-01-02"], rng.uniform(1, 2, (1, 1, 2)),
            rng.uniform(1, 2, (2, 1)), ["close", "x"],
        )
