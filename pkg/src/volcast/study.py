"""Synthetic-corpus experiment: simulate SV series, train the DSVM, compare with GARCH."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from volcast import autodiff as ad
from volcast import garch
from volcast.data import SvSimParams, simulate_sv, split_points, window
from volcast.dsvm import DsvmConfig
from volcast.forecasting import rolling_forecast
from volcast.training import TrainConfig, train

log = logging.getLogger(__name__)

LEVERAGE_SV = SvSimParams(mu=-1.0, ar_phi=0.95, sigma_z=0.2, rho=-0.4)


@dataclass
class SyntheticCorpus:
    returns: list
    sigmas: list
    T: int
    ratios: tuple = (0.6, 0.2, 0.2)

    def bounds(self, i):
        return split_points(len(self.returns[i]), self.ratios)

    def train_windows(self, stride=1):
        return np.concatenate([window(r[:self.bounds(i)[0]], self.T, stride)
                               for i, r in enumerate(self.returns)])

    def valid_windows(self, stride=1):
        out = []
        for i, r in enumerate(self.returns):
            a, b = self.bounds(i)
            out.append(window(r[a:b], self.T, stride))
        return np.concatenate(out)


def make_corpus(n_series=50, length=1500, params=LEVERAGE_SV, seed=0, T=10, ratios=(0.6, 0.2, 0.2)):
    base = ad.Rng(seed)
    rs, ss = [], []
    for i in range(n_series):
        r, s = simulate_sv(params, length, base.spawn(i))
        rs.append(r)
        ss.append(s)
    return SyntheticCorpus(rs, ss, T, tuple(ratios))


def oracle_nll(r, sigma):
    return 0.5 * math.log(2 * math.pi) + np.log(sigma) + 0.5 * (r / sigma) ** 2


@dataclass
class SeriesScore:
    corr: float
    nll: float
    oracle_nll: float


@dataclass
class StudyResult:
    dsvm: list = field(default_factory=list)
    garch: list = field(default_factory=list)
    report: object = None
    params: object = None

    @property
    def mean_corr(self):
        return float(np.mean([s.corr for s in self.dsvm]))

    @property
    def mean_nll(self):
        return float(np.mean([s.nll for s in self.dsvm]))

    @property
    def mean_oracle_nll(self):
        return float(np.mean([s.oracle_nll for s in self.dsvm]))

    @property
    def mean_garch_nll(self):
        return float(np.nanmean([s.nll for s in self.garch]))


def score_dsvm(gen, inf, corpus, S=1000, seed=0):
    out = []
    for i, (r, sig) in enumerate(zip(corpus.returns, corpus.sigmas)):
        start = corpus.bounds(i)[1]
        recs = rolling_forecast(gen, inf, r, corpus.T, S, seed=seed * 1000 + i, start=start)
        vol = np.array([x.pred_vol for x in recs])
        nll = np.array([x.pred_nll for x in recs])
        true = sig[start:]
        out.append(SeriesScore(float(np.corrcoef(vol, true)[0, 1]), float(nll.mean()),
                               float(oracle_nll(r[start:], true).mean())))
    return out


def score_garch(corpus, spec=garch.GarchSpec("garch"), window_len=1000, seed=0):
    out = []
    for i, (r, sig) in enumerate(zip(corpus.returns, corpus.sigmas)):
        start = corpus.bounds(i)[1]
        recs = garch.rolling_eval(spec, r, window=window_len, seed=seed * 1000 + i, start=start)
        vol = np.array([x.pred_vol for x in recs])
        nll = np.array([x.pred_nll for x in recs])
        true = sig[start:]
        ok = np.isfinite(vol)
        out.append(SeriesScore(float(np.corrcoef(vol[ok], true[ok])[0, 1]), float(np.mean(nll[ok])),
                               float(oracle_nll(r[start:], true).mean())))
    return out


def run(n_series=50, length=1500, seed=0, epochs=100, model=DsvmConfig(), train_config=None,
        S=1000, with_garch=True, garch_window=1000):
    corpus = make_corpus(n_series, length, seed=seed)
    cfg = train_config or TrainConfig(epochs=epochs, seed=seed)
    gen, inf, report = train(corpus.train_windows(), corpus.valid_windows(), cfg, model)
    res = StudyResult(report=report, params=(gen, inf))
    res.dsvm = score_dsvm(gen, inf, corpus, S=S, seed=seed)
    if with_garch:
        res.garch = score_garch(corpus, window_len=garch_window, seed=seed)
    return res
