"""GARCH, GJR-GARCH, TGARCH and EGARCH with Gaussian maximum likelihood.

Recursions (lag-i returns r, lag-j states):

    GARCH   s2_t  = w + sum a_i r^2 + sum b_j s2
    GJR     s2_t  = w + sum a_i (r^2 + g_i 1{r<0} r^2) + sum b_j s2
    TGARCH  s_t   = w + sum a_i (|r| - g_i r) + sum b_j s
    EGARCH  ls2_t = w + sum (a_i e + g_i (|e| - sqrt(2/pi))) + sum b_j ls2,   e = r / s

EGARCH uses lagged standardized returns. The first ``max(p, q)`` states are
set to the initial level (sample second moment of the data by default).

Fitting runs Nelder-Mead on an unconstrained parameterization that enforces
positivity and stationarity by construction; the whole optimizer is
compiled with numba so rolling re-estimation stays cheap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from volcast import autodiff as ad
from volcast.forecasting import ForecastRecord

VARIANTS = ("garch", "gjr", "tgarch", "egarch")
_CODE = {name: i for i, name in enumerate(VARIANTS)}
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
NLL_PENALTY = 1e10
MIN_FIT_LENGTH = 50


class GarchParamError(ValueError):
    pass


class NonFiniteVarianceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GarchSpec:
    variant: str = "garch"
    p: int = 1
    q: int = 1

    def __post_init__(self):
        if self.variant not in _CODE:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.p < 1 or self.q < 1:
            raise ValueError("orders p and q must be >= 1")

    @property
    def code(self):
        return _CODE[self.variant]

    @property
    def n_params(self):
        return 1 + self.p * (1 if self.variant == "garch" else 2) + self.q


@dataclass(frozen=True)
class GarchParams:
    omega: float
    alpha: tuple
    beta: tuple
    gamma: tuple = ()

    def arrays(self, spec):
        gamma = self.gamma if spec.variant != "garch" else ()
        g = np.array(gamma if gamma else [0.0] * spec.p, dtype=np.float64)
        return (float(self.omega), np.array(self.alpha, dtype=np.float64), g,
                np.array(self.beta, dtype=np.float64))

    def validate(self, spec):
        a, b, g = np.asarray(self.alpha, float), np.asarray(self.beta, float), np.asarray(self.gamma, float)
        if a.size != spec.p or b.size != spec.q:
            raise GarchParamError(f"expected {spec.p} alpha and {spec.q} beta coefficients")
        if spec.variant == "garch":
            if g.size not in (0, spec.p) or (g.size and np.any(g != 0)):
                raise GarchParamError("plain GARCH has no leverage coefficients")
        elif g.size != spec.p:
            raise GarchParamError(f"expected {spec.p} gamma coefficients")
        v = spec.variant
        if v == "egarch":
            if not abs(b.sum()) < 1:
                raise GarchParamError("EGARCH needs |sum beta| < 1")
            return self
        if not self.omega > 0 or np.any(a < 0) or np.any(b < 0):
            raise GarchParamError(f"{v}: need omega > 0, alpha >= 0, beta >= 0")
        if v == "garch" and not a.sum() + b.sum() < 1:
            raise GarchParamError("GARCH needs sum alpha + sum beta < 1")
        if v == "gjr":
            if np.any(g <= -1):
                raise GarchParamError("GJR needs gamma > -1")
            if not (a * (1 + 0.5 * g)).sum() + b.sum() < 1:
                raise GarchParamError("GJR needs sum alpha (1 + gamma/2) + sum beta < 1")
        if v == "tgarch" and np.any(np.abs(g) > 1):
            raise GarchParamError("TGARCH needs |gamma| <= 1")
        return self


@dataclass
class FitResult:
    params: GarchParams
    loglik: float
    converged: bool
    iterations: int
    starts: list = field(default_factory=list)


# --- compiled kernels -------------------------------------------------------


@njit(cache=True, error_model="numpy")
def _next_state(code, omega, alpha, gamma, beta, r, st, t):
    s = omega
    for i in range(1, alpha.size + 1):
        x = r[t - i]
        if code == 0:
            s += alpha[i - 1] * x * x
        elif code == 1:
            if x < 0:
                s += alpha[i - 1] * (1.0 + gamma[i - 1]) * x * x
            else:
                s += alpha[i - 1] * x * x
        elif code == 2:
            s += alpha[i - 1] * (abs(x) - gamma[i - 1] * x)
        else:
            e = x * math.exp(-0.5 * st[t - i])
            s += alpha[i - 1] * e + gamma[i - 1] * (abs(e) - math.sqrt(2.0 / math.pi))
    for j in range(1, beta.size + 1):
        s += beta[j - 1] * st[t - j]
    return s


@njit(cache=True, error_model="numpy")
def _filter(code, omega, alpha, gamma, beta, r, init_state):
    n = r.size
    m = max(alpha.size, beta.size)
    st = np.empty(n)
    for t in range(min(m, n)):
        st[t] = init_state
    for t in range(m, n):
        st[t] = _next_state(code, omega, alpha, gamma, beta, r, st, t)
    return st


@njit(cache=True, error_model="numpy")
def _state_to_var(code, s):
    if code == 2:
        return s * s if s > 0 else -1.0
    if code == 3:
        return math.exp(s)
    return s


@njit(cache=True, error_model="numpy")
def _init_state(code, var0):
    if code == 2:
        return math.sqrt(var0)
    if code == 3:
        return math.log(var0)
    return var0


@njit(cache=True, error_model="numpy")
def _nll(code, omega, alpha, gamma, beta, r, var0):
    # filter and likelihood fused in one pass; this is the optimizer's hot loop
    n = r.size
    p = alpha.size
    q = beta.size
    m = max(p, q)
    s0 = _init_state(code, var0)
    st = np.empty(n)
    total = 0.0
    c = math.sqrt(2.0 / math.pi)
    for t in range(n):
        if t < m:
            s = s0
        else:
            s = omega
            for i in range(1, p + 1):
                x = r[t - i]
                if code == 0:
                    s += alpha[i - 1] * x * x
                elif code == 1:
                    if x < 0:
                        s += alpha[i - 1] * (1.0 + gamma[i - 1]) * x * x
                    else:
                        s += alpha[i - 1] * x * x
                elif code == 2:
                    s += alpha[i - 1] * (abs(x) - gamma[i - 1] * x)
                else:
                    e = x * math.exp(-0.5 * st[t - i])
                    s += alpha[i - 1] * e + gamma[i - 1] * (abs(e) - c)
            for j in range(1, q + 1):
                s += beta[j - 1] * st[t - j]
        st[t] = s
        if code == 3:
            logv = s
            v = math.exp(s)
        elif code == 2:
            if not s > 0.0:
                return np.inf
            v = s * s
            logv = 2.0 * math.log(s)
        else:
            if not s > 0.0:
                return np.inf
            v = s
            logv = math.log(s)
        total += logv + r[t] * r[t] / v
    total = 0.5 * (total + n * math.log(2.0 * math.pi))
    if not math.isfinite(total):
        return np.inf
    return total


# logits are clamped so constraint slacks never round to zero in float64
LOGIT_CAP = 25.0
TANH_CAP = 15.0


@njit(cache=True, error_model="numpy")
def _ctanh(x):
    return math.tanh(min(max(x, -TANH_CAP), TANH_CAP))


@njit(cache=True, error_model="numpy")
def _shares(u):
    # softmax against an implicit zero logit: entries positive, sum < 1
    u = np.minimum(u, LOGIT_CAP)
    mx = 0.0
    for k in range(u.size):
        mx = max(mx, u[k])
    e = np.exp(u - mx)
    den = math.exp(-mx) + e.sum()
    return e / den


@njit(cache=True, error_model="numpy")
def _unpack(code, u, p, q, var0):
    alpha = np.zeros(p)
    gamma = np.zeros(p)
    beta = np.zeros(q)
    if code == 3:
        omega = u[0]
        for i in range(p):
            alpha[i] = u[1 + i]
            gamma[i] = u[1 + p + i]
        mag = _ctanh(u[1 + 2 * p])
        w = np.ones(q)
        for j in range(1, q):
            w[j] = math.exp(u[1 + 2 * p + j])
        w = w / w.sum()
        for j in range(q):
            beta[j] = mag * w[j]
        return omega, alpha, gamma, beta
    level = math.sqrt(var0) if code == 2 else var0
    omega = level * math.exp(u[0])
    sh = _shares(u[1:1 + p + q])
    for j in range(q):
        beta[j] = sh[p + j]
    for i in range(p):
        if code == 1:
            gamma[i] = -1.0 + math.exp(u[1 + p + q + i])
            alpha[i] = sh[i] / (1.0 + 0.5 * gamma[i])
        else:
            alpha[i] = sh[i]
            if code == 2:
                gamma[i] = _ctanh(u[1 + p + q + i])
    return omega, alpha, gamma, beta


@njit(cache=True, error_model="numpy")
def _objective(code, u, p, q, r, var0):
    omega, alpha, gamma, beta = _unpack(code, u, p, q, var0)
    v = _nll(code, omega, alpha, gamma, beta, r, var0)
    return v if math.isfinite(v) else 1e10


@njit(cache=True, error_model="numpy")
def _diameter(sim):
    d = 0.0
    k = sim.shape[0]
    for i in range(k):
        for j in range(i + 1, k):
            acc = 0.0
            for c in range(sim.shape[1]):
                x = sim[i, c] - sim[j, c]
                acc += x * x
            d = max(d, math.sqrt(acc))
    return d


@njit(cache=True, error_model="numpy")
def _nelder_mead(code, x0, p, q, r, var0, step, tol, maxiter):
    n = x0.size
    sim = np.empty((n + 1, n))
    f = np.empty(n + 1)
    sim[0] = x0
    for i in range(n):
        sim[i + 1] = x0
        sim[i + 1, i] += step
    for i in range(n + 1):
        f[i] = _objective(code, sim[i], p, q, r, var0)
    converged = False
    it = 0
    while it < maxiter:
        order = np.argsort(f)
        sim = sim[order]
        f = f[order]
        if _diameter(sim) < tol:
            converged = True
            break
        it += 1
        c = np.zeros(n)
        for i in range(n):
            c += sim[i]
        c /= n
        xr = c + (c - sim[n])
        fr = _objective(code, xr, p, q, r, var0)
        if fr < f[0]:
            xe = c + 2.0 * (c - sim[n])
            fe = _objective(code, xe, p, q, r, var0)
            if fe < fr:
                sim[n] = xe
                f[n] = fe
            else:
                sim[n] = xr
                f[n] = fr
        elif fr < f[n - 1]:
            sim[n] = xr
            f[n] = fr
        else:
            if fr < f[n]:
                xc = c + 0.5 * (xr - c)
            else:
                xc = c + 0.5 * (sim[n] - c)
            fc = _objective(code, xc, p, q, r, var0)
            if fc < min(fr, f[n]):
                sim[n] = xc
                f[n] = fc
            else:
                for i in range(1, n + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    f[i] = _objective(code, sim[i], p, q, r, var0)
    best = np.argmin(f)
    return sim[best].copy(), f[best], it, converged


# --- public API -------------------------------------------------------------


def sample_variance(r):
    """Second moment of a zero-mean return series, the default recursion start."""
    r = np.asarray(r, dtype=np.float64)
    return float(np.mean(r * r))


def _returns(r):
    r = np.ascontiguousarray(np.asarray(r, dtype=np.float64).ravel())
    if not np.isfinite(r).all():
        raise ValueError("returns must be finite")
    return r


def filter(spec, params, r, init=None):
    """Conditional state path: variance (GARCH, GJR), std (TGARCH) or log variance (EGARCH).

    ``init`` is the starting *variance* level; it is converted to the
    variant's state scale.
    """
    params.validate(spec)
    r = _returns(r)
    var0 = sample_variance(r) if init is None else float(init)
    omega, a, g, b = params.arrays(spec)
    return _filter(spec.code, omega, a, g, b, r, _init_state(spec.code, var0))


def variance_path(spec, params, r, init=None):
    st = filter(spec, params, r, init)
    if spec.variant == "tgarch":
        return st * st
    if spec.variant == "egarch":
        return np.exp(st)
    return st


def nll(spec, params, r, init=None):
    """Gaussian negative log-likelihood of ``r`` along the filtered variances.

    A non-finite or non-positive variance path yields ``NLL_PENALTY`` and a
    :class:`NonFiniteVarianceWarning`.
    """
    params.validate(spec)
    r = _returns(r)
    var0 = sample_variance(r) if init is None else float(init)
    omega, a, g, b = params.arrays(spec)
    v = _nll(spec.code, omega, a, g, b, r, var0)
    if not math.isfinite(v):
        warnings.warn("variance path is not finite and positive", NonFiniteVarianceWarning)
        return NLL_PENALTY
    return float(v)


def forecast_one(spec, params, r, init=None):
    """Volatility for the observation after ``r`` (one more recursion step)."""
    params.validate(spec)
    r = _returns(r)
    var0 = sample_variance(r) if init is None else float(init)
    omega, a, g, b = params.arrays(spec)
    ext = np.append(r, 0.0)
    st = _filter(spec.code, omega, a, g, b, ext, _init_state(spec.code, var0))
    v = _state_to_var(spec.code, st[-1])
    if not (v > 0 and math.isfinite(v)):
        raise FloatingPointError("forecast variance is not finite and positive")
    return math.sqrt(v)


def _pack(spec, params, var0):
    """Inverse of the compiled unconstrained transform."""
    p, q = spec.p, spec.q
    omega, a, g, b = params.arrays(spec)
    if spec.variant == "egarch":
        mag = b.sum()
        w = b / mag if mag != 0 else np.full(q, 1.0 / q)
        return np.concatenate([[omega], a, g, [math.atanh(mag)], np.log(w[1:] / w[0])])
    level = math.sqrt(var0) if spec.variant == "tgarch" else var0
    sh = np.concatenate([a * (1 + 0.5 * g) if spec.variant == "gjr" else a, b])
    slack = 1.0 - sh.sum()
    u = [math.log(omega / level)] + list(np.log(sh / slack))
    if spec.variant == "gjr":
        u += list(np.log1p(g))
    elif spec.variant == "tgarch":
        u += list(np.arctanh(g))
    return np.array(u)


def params_from_vector(spec, u, var0):
    omega, a, g, b = _unpack(spec.code, np.asarray(u, dtype=np.float64), spec.p, spec.q, var0)
    gamma = () if spec.variant == "garch" else tuple(float(x) for x in g)
    return GarchParams(float(omega), tuple(float(x) for x in a), tuple(float(x) for x in b), gamma)


def default_start(spec, var0):
    p, q = spec.p, spec.q
    if spec.variant == "egarch":
        beta = 0.95
        return GarchParams((1 - beta) * math.log(var0), (0.0,) * p, (beta / q,) * q, (0.1 / p,) * p)
    a, b = 0.05 / p, 0.90 / q
    if spec.variant == "garch":
        return GarchParams(0.05 * var0, (a,) * p, (b,) * q)
    if spec.variant == "gjr":
        return GarchParams(0.05 * var0, (0.03 / p,) * p, (b,) * q, (1.0,) * p)
    level = math.sqrt(var0)
    return GarchParams(0.1 * level, (a,) * p, (b,) * q, (0.0,) * p)


def fit(spec, r, seed=0, n_starts=3, tol=1e-8, maxiter=5000, step=0.5):
    """Maximum-likelihood fit by multi-start Nelder-Mead.

    Start 0 is a conventional persistent parameter set; the others perturb
    it with N(0, 0.5^2) noise in the unconstrained space drawn from
    ``Rng(seed)``. Convergence means the simplex diameter fell below
    ``tol``. The returned estimate is the best objective over all starts;
    ``converged`` is true when at least one start converged.
    """
    r = _returns(r)
    if r.size < MIN_FIT_LENGTH:
        raise ValueError(f"need at least {MIN_FIT_LENGTH} observations to fit, got {r.size}")
    var0 = sample_variance(r)
    if not var0 > 0:
        raise ValueError("cannot fit a series with zero second moment")
    x0 = _pack(spec, default_start(spec, var0), var0)
    rng = ad.Rng(seed)
    starts = [x0] + [x0 + 0.5 * rng.normal(x0.size) for _ in range(n_starts - 1)]
    runs = []
    for s in starts:
        x, fv, it, ok = _nelder_mead(spec.code, s, spec.p, spec.q, r, var0, step, tol, maxiter)
        runs.append((float(fv), x, int(it), bool(ok)))
    fv, x, _, _ = min(runs, key=lambda t: t[0])
    return FitResult(
        params=params_from_vector(spec, x, var0),
        loglik=-fv,
        converged=any(run[3] for run in runs),
        iterations=sum(run[2] for run in runs),
        starts=[(run[0], run[3]) for run in runs],
    )


def rolling_eval(spec, series, window=1000, seed=0, start=None, timestamps=None, model_tag=None,
                 **fit_kw):
    """Re-estimate on a trailing window at every step and score the next return.

    Target indices run from ``max(window, start)`` to the end. Fit seeds are
    ``(seed, index)``. A non-converged refit reuses the last converged
    parameters and flags the record; with nothing to reuse the record's
    volatility and NLL are NaN.
    """
    r = _returns(series)
    n = r.size
    if n <= window:
        raise ValueError(f"series of length {n} needs to exceed the window {window}")
    tag = model_tag or spec.variant
    first = window if start is None else max(int(start), window)
    last_good = None
    out = []
    for j in range(first, n):
        hist = r[j - window:j]
        res = fit(spec, hist, seed=int(ad.Rng(seed, (j,)).integers(2**31)), **fit_kw)
        flagged = not res.converged
        params = res.params if res.converged else last_good
        if res.converged:
            last_good = res.params
        ts = str(timestamps[j]) if timestamps is not None else str(j)
        if params is None:
            out.append(ForecastRecord(ts, float(r[j]), math.nan, math.nan, tag, True))
            continue
        vol = forecast_one(spec, params, hist)
        nll_j = 0.5 * math.log(2 * math.pi) + math.log(vol) + 0.5 * float(r[j] / vol) ** 2
        out.append(ForecastRecord(ts, float(r[j]), vol, nll_j, tag, flagged))
    return out


def simulate(spec, params, n, rng, burn=500):
    """Simulate returns and volatilities from a fitted recursion."""
    params.validate(spec)
    omega, a, g, b = params.arrays(spec)
    m = max(spec.p, spec.q)
    total = n + burn + m
    eps = rng.normal(total)
    if spec.variant == "egarch":
        level = omega / (1 - b.sum())
        var0 = math.exp(level)
    elif spec.variant == "tgarch":
        var0 = (omega / max(1e-12, 1 - a.sum() * SQRT_2_OVER_PI - b.sum())) ** 2
    else:
        pers = (a * (1 + 0.5 * g)).sum() + b.sum() if spec.variant == "gjr" else a.sum() + b.sum()
        var0 = omega / (1 - pers)
    st = _simulate(spec.code, omega, a, g, b, eps, _init_state(spec.code, var0), m)
    var = np.array([_state_to_var(spec.code, s) for s in st])
    sig = np.sqrt(var)
    ret = sig * eps
    return ret[-n:], sig[-n:]


@njit(cache=True, error_model="numpy")
def _simulate(code, omega, alpha, gamma, beta, eps, init_state, m):
    n = eps.size
    st = np.empty(n)
    r = np.empty(n)
    for t in range(n):
        if t < m:
            st[t] = init_state
        else:
            st[t] = _next_state(code, omega, alpha, gamma, beta, r, st, t)
        r[t] = math.sqrt(_state_to_var(code, st[t])) * eps[t]
    return st
