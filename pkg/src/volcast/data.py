"""Series ingestion, windowing, chronological splits, SV simulation, Friedman test."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats


class DataError(ValueError):
    pass


@dataclass
class Series:
    dates: list
    values: np.ndarray
    kind: str = "return"
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.dates) != self.values.size:
            raise DataError("dates and values differ in length")


@dataclass
class SeriesTable:
    series: dict = field(default_factory=dict)
    dropped_rows: int = 0

    def ids(self):
        return list(self.series)

    def __getitem__(self, key):
        return self.series[key]

    def __len__(self):
        return len(self.series)


def _parse_date(text, lineno):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse date {text!r}") from None


def _parse_value(text, lineno):
    text = text.strip()
    if text in ("", "NA", "NaN", "nan", "null"):
        return None
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse value {text!r}") from None
    if not math.isfinite(v):
        return None
    return v


def ingest(path, kind="return"):
    """Read a wide (``date,<id...>``) or long (``date,id,value[,sigma]``) CSV.

    ``kind="price"`` converts each series to log returns. Rows with a
    missing value are dropped (wide format: the whole date) and counted in
    ``SeriesTable.dropped_rows``.
    """
    if kind not in ("return", "price"):
        raise DataError(f"unknown value kind {kind!r}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "date":
        raise DataError(f"{path}: first column must be 'date'")
    long_format = header[1:3] == ["id", "value"]
    table = SeriesTable()
    raw = {}
    if long_format:
        has_sigma = len(header) > 3 and header[3] == "sigma"
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) < 3:
                raise DataError(f"line {lineno}: expected at least 3 fields")
            d = _parse_date(row[0], lineno)
            v = _parse_value(row[2], lineno)
            s = _parse_value(row[3], lineno) if has_sigma and len(row) > 3 else None
            if v is None:
                table.dropped_rows += 1
                continue
            raw.setdefault(row[1].strip(), []).append((d, v, s))
    else:
        ids = header[1:]
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            d = _parse_date(row[0], lineno)
            vals = [_parse_value(x, lineno) for x in row[1:]]
            if any(v is None for v in vals):
                table.dropped_rows += 1
                continue
            for sid, v in zip(ids, vals):
                raw.setdefault(sid, []).append((d, v, None))
    for sid, obs in raw.items():
        dates = [o[0] for o in obs]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise DataError(f"{path}: dates of series {sid!r} are not strictly increasing")
        values = np.array([o[1] for o in obs])
        sig = None if any(o[2] is None for o in obs) else np.array([o[2] for o in obs])
        iso = [d.isoformat() for d in dates]
        if kind == "price":
            if np.any(values <= 0):
                raise DataError(f"series {sid!r}: prices must be positive")
            values = np.log(values[1:] / values[:-1])
            iso = iso[1:]
            sig = None if sig is None else sig[1:]
        table.series[sid] = Series(iso, values, "return", sig)
    return table


def export_long(table, path):
    """Write ``date,id,value[,sigma]`` with round-trip exact float formatting."""
    with_sigma = any(s.sigma is not None for s in table.series.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "id", "value"] + (["sigma"] if with_sigma else []))
        for sid, s in table.series.items():
            for i, (d, v) in enumerate(zip(s.dates, s.values)):
                row = [d, sid, repr(float(v))]
                if with_sigma:
                    row.append("NA" if s.sigma is None else repr(float(s.sigma[i])))
                w.writerow(row)


def window(series, T=10, stride=1):
    """Overlapping windows ``(count, T)``, count = floor((len - T) / stride) + 1."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if T < 1 or stride < 1:
        raise DataError("window length and stride must be >= 1")
    if x.size < T:
        raise DataError(f"series of length {x.size} is shorter than the window {T}")
    starts = np.arange(0, x.size - T + 1, stride)
    return x[starts[:, None] + np.arange(T)]


def _split_sizes(n, ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise DataError(f"cannot split {n} items into non-empty parts with ratios {ratios}")
    return n_train, n_valid, n_test


def split(sequences, ratios=(0.6, 0.2, 0.2)):
    """Chronological train/valid/test split of one series' windows (no shuffling)."""
    seqs = np.asarray(sequences)
    n_train, n_valid, _ = _split_sizes(len(seqs), ratios)
    return seqs[:n_train], seqs[n_train:n_train + n_valid], seqs[n_train + n_valid:]


def split_points(n, ratios=(0.6, 0.2, 0.2)):
    """Index boundaries ``(valid_start, test_start)`` of a chronological split of ``n`` items."""
    n_train, n_valid, _ = _split_sizes(n, ratios)
    return n_train, n_train + n_valid


# --- stochastic volatility simulation ---------------------------------------


@dataclass(frozen=True)
class SvSimParams:
    mu: float = -1.0
    ar_phi: float = 0.95
    sigma_z: float = 0.2
    rho: float = 0.0

    def __post_init__(self):
        if not abs(self.ar_phi) < 1:
            raise ValueError("ar_phi must satisfy |ar_phi| < 1")
        if self.sigma_z < 0:
            raise ValueError("sigma_z must be non-negative")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")


def simulate_sv(params, n, rng, return_noise=False):
    """Discrete SV with optional leverage.

    log s2_t = mu + phi (log s2_{t-1} - mu) + z_t, r_t = s_t eps_t, with
    (eps_{t-1}, z_t) jointly normal, Corr = rho, and log s2_0 = mu. Draw
    order: eps_0..eps_n, then the independent part of z_1..z_n.
    """
    p = params
    eps = rng.normal(n + 1)
    xi = rng.normal(n)
    z = p.sigma_z * (p.rho * eps[:n] + math.sqrt(1.0 - p.rho**2) * xi)
    dev = signal.lfilter([1.0], [1.0, -p.ar_phi], z)
    sigma = np.exp(0.5 * (p.mu + dev))
    r = sigma * eps[1:]
    if return_noise:
        return r, sigma, eps, z
    return r, sigma


# --- evaluation tables ------------------------------------------------------


@dataclass
class NllTable:
    series: list
    models: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.series), len(self.models)):
            raise DataError("NLL table must be rectangular: rows=series, columns=models")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series"] + list(self.models))
            for sid, row in zip(self.series, self.values):
                w.writerow([sid] + ["NA" if not math.isfinite(v) else repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "series":
            raise DataError(f"{path}: expected a 'series' header column")
        models = rows[0][1:]
        series, values = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(models) + 1:
                raise DataError(f"{path}:{lineno}: expected {len(models) + 1} fields")
            series.append(row[0])
            values.append([math.nan if x == "NA" else float(x) for x in row[1:]])
        return cls(series, models, np.array(values).reshape(len(series), len(models)))


@dataclass(frozen=True)
class FriedmanResult:
    statistic: float
    p_value: float
    df: int
    n_blocks: int
    dropped_rows: int
    mean_ranks: tuple


def friedman_test(table):
    """Friedman rank sum test over series (blocks) and models (treatments).

    Ranks within each row use average ranks on ties; rows containing NA are
    dropped and counted.
    """
    vals = table.values if isinstance(table, NllTable) else np.asarray(table, dtype=np.float64)
    keep = np.isfinite(vals).all(axis=1)
    x = vals[keep]
    N, k = x.shape if x.ndim == 2 else (0, 0)
    if k < 2 or N < 2:
        raise DataError(f"Friedman test needs >= 2 complete rows and >= 2 models, got {N}x{k}")
    ranks = np.apply_along_axis(stats.rankdata, 1, x)
    rbar = ranks.mean(axis=0)
    stat = 12.0 * N / (k * (k + 1)) * float(np.sum((rbar - (k + 1) / 2.0) ** 2))
    return FriedmanResult(stat, float(stats.chi2.sf(stat, k - 1)), k - 1, N,
                          int((~keep).sum()), tuple(float(v) for v in rbar))
