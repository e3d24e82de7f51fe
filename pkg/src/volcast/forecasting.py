"""One-step-ahead predictive distribution of the DSVM and rolling evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from volcast import autodiff as ad
from volcast.dsvm import encode_backward, posterior_step, prior_step, volatility_step

FORECAST_COLUMNS = ("timestamp", "realized_return", "pred_vol", "pred_nll", "model_tag")


@dataclass(frozen=True)
class PredictiveMixture:
    """Equal-weight mixture of zero-mean Gaussians with the given std devs."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64).ravel()
        if s.size < 1 or not (s > 0).all():
            raise ValueError("mixture needs at least one strictly positive component")
        object.__setattr__(self, "sigmas", s)

    @property
    def size(self):
        return self.sigmas.size


@dataclass(frozen=True)
class ForecastRecord:
    timestamp: str
    realized_return: float
    pred_vol: float
    pred_nll: float
    model_tag: str = "dsvm"
    flagged: bool = False


def predict_one(gen, inf, r, S=1000, rng=None):
    """Mixture approximation of p(r_{T+1} | r_1..r_T) from S ancestral paths.

    Per path: z_{1:T} from the posterior given the window, z_{T+1} from the
    prior transition, then one more volatility step. Draw order: posterior
    noise ``(T, d_z, S)`` then prior noise ``(d_z, S)``.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    T = r.size
    if T < 1:
        raise ValueError("predict_one needs a window of at least one return")
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = rng if rng is not None else ad.Rng(0)
    eta = rng.normal((T, gen.d_z, S))
    eta_next = rng.normal((gen.d_z, S))

    enc = encode_backward(inf, r.reshape(T, 1))
    z = np.zeros((gen.d_z, S))
    h = np.zeros((gen.d_h, S))
    sigma = np.zeros((1, S))
    r_prev = np.zeros((1, S))
    for t in range(T):
        a = np.broadcast_to(enc[t], (enc[t].shape[0], S))
        _, _, z = posterior_step(inf, z, a, eta[t])
        h, sigma = volatility_step(gen, h, sigma, r_prev, z)
        r_prev = np.full((1, S), r[t])
    m_p, v_p = prior_step(gen, z)
    z = m_p + v_p * eta_next
    _, sigma = volatility_step(gen, h, sigma, r_prev, z)
    return PredictiveMixture(sigma[0].copy())


def point_volatility(mixture, rng=None, n_draws=None, analytic=False):
    """Predicted volatility from a mixture.

    Default: draw one return per component (``n_draws = S``, cycling through
    components when larger) and return the sample standard deviation.
    ``analytic=True`` returns sqrt(mean sigma^2), the large-sample limit.
    """
    s = mixture.sigmas
    if analytic:
        return float(math.sqrt(np.mean(s * s)))
    n = s.size if n_draws is None else int(n_draws)
    if n < 2:
        raise ValueError("point_volatility needs n_draws >= 2")
    rng = rng if rng is not None else ad.Rng(0)
    comp = np.resize(s, n)
    draws = comp * rng.normal(n)
    return float(np.std(draws, ddof=1))


def predictive_nll(mixture, r_next):
    """-log((1/S) sum_s N(r_next; 0, sigma_s^2)) with log-sum-exp."""
    s = mixture.sigmas
    logs = -ad.HALF_LOG_2PI - np.log(s) - 0.5 * (float(r_next) / s) ** 2
    return float(-(logsumexp(logs) - math.log(s.size)))


def rolling_forecast(gen, inf, returns, T=10, S=1000, seed=0, start=None, timestamps=None,
                     model_tag="dsvm", analytic=False):
    """Recursive one-step-ahead forecasts without refitting.

    For each target index ``j`` (default ``T..n-1``, or ``start..n-1``) the
    model conditions on ``returns[j-T:j]`` only, with randomness from
    ``Rng(seed).spawn(j)``, and scores ``returns[j]``.
    """
    r = np.asarray(returns, dtype=np.float64).ravel()
    n = r.size
    if n < T + 1:
        raise ValueError(f"series of length {n} is shorter than window+1 = {T + 1}")
    first = T if start is None else max(int(start), T)
    base = ad.Rng(seed)
    out = []
    for j in range(first, n):
        stream = base.spawn(j)
        mix = predict_one(gen, inf, r[j - T:j], S, stream)
        vol = point_volatility(mix, stream, analytic=analytic or mix.size < 2)
        ts = str(timestamps[j]) if timestamps is not None else str(j)
        out.append(ForecastRecord(ts, float(r[j]), vol, predictive_nll(mix, r[j]), model_tag))
    return out


def _fmt(x):
    if isinstance(x, float):
        return "NA" if not math.isfinite(x) else repr(float(x))
    return str(x)


def write_forecasts(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_COLUMNS)
        for rec in records:
            w.writerow([_fmt(getattr(rec, c)) for c in FORECAST_COLUMNS])


def read_forecasts(path):
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or tuple(header) != FORECAST_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(FORECAST_COLUMNS)}")
        for lineno, row in enumerate(rows, start=2):
            try:
                ts, ret, vol, nll, tag = row
                out.append(ForecastRecord(ts, _num(ret), _num(vol), _num(nll), tag))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def _num(s):
    return math.nan if s == "NA" else float(s)
