import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from volcast import autodiff as ad
from volcast import data


def write(tmp_path, text, name="in.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_prices_to_log_returns(tmp_path):
    path = write(tmp_path, "date,A,B\n2020-01-01,100,5\n2020-01-02,110,5\n2020-01-03,99,5\n")
    t = data.ingest(path, kind="price")
    np.testing.assert_allclose(t["A"].values, [math.log(1.1), math.log(0.9)], rtol=1e-15)
    np.testing.assert_array_equal(t["B"].values, [0.0, 0.0])
    assert t["A"].dates == ["2020-01-02", "2020-01-03"]


def test_missing_rows_dropped_and_counted(tmp_path):
    path = write(tmp_path, "date,A,B\n2020-01-01,1,2\n2020-01-02,NA,3\n2020-01-03,4,\n2020-01-06,5,6\n")
    t = data.ingest(path)
    assert t.dropped_rows == 2
    np.testing.assert_array_equal(t["A"].values, [1, 5])


def test_long_format_with_sigma(tmp_path):
    path = write(tmp_path, "date,id,value,sigma\n2020-01-01,x,0.1,0.2\n2020-01-02,x,-0.1,0.3\n2020-01-01,y,0.5,0.4\n")
    t = data.ingest(path)
    assert t.ids() == ["x", "y"]
    np.testing.assert_array_equal(t["x"].sigma, [0.2, 0.3])


def test_parse_errors_name_the_line(tmp_path):
    with pytest.raises(data.DataError, match="line 3"):
        data.ingest(write(tmp_path, "date,A\n2020-01-01,1\n2020-13-01,2\n"))
    with pytest.raises(data.DataError, match="line 2"):
        data.ingest(write(tmp_path, "date,A\n2020-01-01,abc\n"))
    with pytest.raises(data.DataError, match="increasing"):
        data.ingest(write(tmp_path, "date,A\n2020-01-02,1\n2020-01-01,2\n"))
    with pytest.raises(data.DataError):
        data.ingest(write(tmp_path, "date,A\n2020-01-01,-5\n2020-01-02,2\n"), kind="price")


def test_export_ingest_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    dates = [f"2021-01-{d:02d}" for d in range(1, 21)]
    t = data.SeriesTable({"s1": data.Series(dates, rng.normal(size=20) * 1e-3, sigma=rng.uniform(0.1, 1, 20)),
                          "s2": data.Series(dates, rng.normal(size=20), sigma=rng.uniform(0.1, 1, 20))})
    path = tmp_path / "out.csv"
    data.export_long(t, path)
    back = data.ingest(path)
    for sid in t.ids():
        np.testing.assert_allclose(back[sid].values, t[sid].values, rtol=0, atol=1e-12)
        np.testing.assert_allclose(back[sid].sigma, t[sid].sigma, rtol=0, atol=1e-12)


def test_window_examples():
    x = np.arange(12.0)
    assert data.window(x, 10).shape == (3, 10)
    w = data.window(np.arange(30.0), 10, stride=10)
    assert w.shape == (3, 10) and len(set(w.ravel())) == 30
    with pytest.raises(data.DataError):
        data.window(np.arange(5.0), 10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 5))
def test_window_matches_slicing(n, T, stride):
    x = np.random.default_rng(n).normal(size=n)
    if n < T:
        with pytest.raises(data.DataError):
            data.window(x, T, stride)
        return
    w = data.window(x, T, stride)
    assert w.shape[0] == (n - T) // stride + 1
    for k, row in enumerate(w):
        np.testing.assert_array_equal(row, x[k * stride:k * stride + T])


def test_split_examples():
    seqs = np.arange(10)
    tr, va, te = data.split(seqs)
    assert (len(tr), len(va), len(te)) == (6, 2, 2)
    assert tr.max() < va.min() and va.max() < te.min()
    with pytest.raises(data.DataError):
        data.split(np.arange(2))
    with pytest.raises(data.DataError):
        data.split(seqs, (0.5, 0.2, 0.2))


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 5000))
def test_split_sizes_and_order(n):
    tr, va, te = data.split(np.arange(n))
    assert len(tr) + len(va) + len(te) == n
    assert abs(len(tr) - 0.6 * n) <= 1 and abs(len(va) - 0.2 * n) <= 1 and abs(len(te) - 0.2 * n) <= 1
    assert tr.max() < va.min() and va.max() < te.min()


def test_simulate_sv_degenerate_noise():
    r, s = data.simulate_sv(data.SvSimParams(mu=-1.0, ar_phi=0.0, sigma_z=0.0), 100_000, ad.Rng(0))
    np.testing.assert_allclose(s, math.exp(-0.5), rtol=1e-15)
    sd = math.exp(-0.5)
    assert abs(r.std() - sd) < 3 * sd / math.sqrt(2 * r.size)


def test_simulate_sv_leverage_correlation():
    n = 100_000
    p = data.SvSimParams(mu=-1.0, ar_phi=0.95, sigma_z=0.2, rho=-0.5)
    _, _, eps, z = data.simulate_sv(p, n, ad.Rng(1), return_noise=True)
    c = np.corrcoef(eps[:n], z)[0, 1]
    assert abs(c + 0.5) < 3 * (1 - 0.25) / math.sqrt(n)


def test_simulate_sv_no_leverage_uncorrelated():
    n = 100_000
    p = data.SvSimParams(rho=0.0)
    _, _, eps, z = data.simulate_sv(p, n, ad.Rng(2), return_noise=True)
    assert abs(np.corrcoef(eps[:n], z)[0, 1]) < 3 / math.sqrt(n)


def test_simulate_sv_matches_direct_recursion():
    p = data.SvSimParams(mu=-0.5, ar_phi=0.9, sigma_z=0.3, rho=-0.3)
    r, s, eps, z = data.simulate_sv(p, 50, ad.Rng(3), return_noise=True)
    h = p.mu
    for t in range(50):
        h = p.mu + p.ar_phi * (h - p.mu) + z[t]
        assert s[t] == pytest.approx(math.exp(h / 2), rel=1e-12)
        assert r[t] == pytest.approx(s[t] * eps[t + 1], rel=1e-12)
    with pytest.raises(ValueError):
        data.SvSimParams(ar_phi=1.0)


def test_friedman_identical_rankings():
    table = data.NllTable([f"s{i}" for i in range(10)], ["a", "b", "c"], np.tile([1.0, 2.0, 3.0], (10, 1)))
    res = data.friedman_test(table)
    assert res.statistic == 20.0
    assert res.df == 2
    assert res.p_value == pytest.approx(math.exp(-10), rel=1e-12)


def _direct_friedman(x):
    n, k = x.shape
    ranks = np.zeros_like(x)
    for i, row in enumerate(x):
        for j, v in enumerate(row):
            ranks[i, j] = 1 + np.sum(row < v) + 0.5 * (np.sum(row == v) - 1)
    rbar = ranks.mean(axis=0)
    return 12 * n / (k * (k + 1)) * np.sum((rbar - (k + 1) / 2) ** 2)


def test_friedman_random_tables_and_invariances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, k = rng.integers(2, 20), rng.integers(2, 6)
        x = rng.integers(0, 4, size=(n, k)).astype(float)
        if np.all(x == x[:, :1]):
            continue
        s = data.friedman_test(x).statistic
        assert s == pytest.approx(_direct_friedman(x), rel=1e-12)
        assert data.friedman_test(x[:, rng.permutation(k)]).statistic == pytest.approx(s, rel=1e-12)
        assert data.friedman_test(np.exp(3 * x) - 7).statistic == pytest.approx(s, rel=1e-12)
    # without ties scipy's tie correction is inactive, so the statistics agree
    cols = rng.normal(size=(4, 12))
    assert data.friedman_test(cols.T).statistic == pytest.approx(stats.friedmanchisquare(*cols).statistic, rel=1e-12)


def test_friedman_drops_na_rows():
    x = np.array([[1.0, 2.0], [2.0, 1.0], [np.nan, 1.0], [1.0, 3.0]])
    res = data.friedman_test(x)
    assert res.n_blocks == 3 and res.dropped_rows == 1
    with pytest.raises(data.DataError):
        data.friedman_test(np.ones((1, 3)))


def test_nll_table_csv(tmp_path):
    t = data.NllTable(["a", "b"], ["dsvm", "tgarch"], [[1.0, np.nan], [0.5, 0.25]])
    path = tmp_path / "t.csv"
    t.write_csv(path)
    assert path.read_text().splitlines()[1] == "a,1.0,NA"
    back = data.NllTable.read_csv(path)
    assert back.series == ["a", "b"] and back.models == ["dsvm", "tgarch"]
    np.testing.assert_array_equal(back.values, t.values)
