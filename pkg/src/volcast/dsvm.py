"""Deep stochastic volatility model: generative network, inference network, ELBO.

Shapes follow the column-batch convention of :mod:`volcast.autodiff`: a
batch of ``B`` sequences of length ``T`` is a ``(T, B)`` return matrix, the
latent noise for step ``t`` is ``(d_z, B)`` and per-sequence scalars are
``(1, B)`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from volcast import autodiff as ad
from volcast.nets import GruParams, MlpParams, gru_step, init_gru, init_mlp, mlp_forward

STD_FLOOR = 1e-6


class DivergenceError(FloatingPointError):
    """A non-finite quantity appeared while unrolling the model."""

    def __init__(self, t, where, cause=None):
        self.t = t
        self.where = where
        super().__init__(f"non-finite value at t={t} in {where}" + (f" ({cause})" if cause else ""))


@dataclass(frozen=True)
class DsvmConfig:
    d_z: int = 1
    d_h: int = 10
    d_a: int = 10
    width: int = 16


@dataclass
class GenerativeParams:
    f1: MlpParams  # prior mean, linear output
    f2: MlpParams  # prior std, softplus output
    f3: MlpParams  # volatility readout, softplus output
    fh: GruParams  # volatility recurrence over (sigma_prev, r_prev, z_t)

    @property
    def d_z(self):
        return self.f1.n_out

    @property
    def d_h(self):
        return self.fh.n_hidden


@dataclass
class InferenceParams:
    g1: MlpParams  # posterior mean, linear output
    g2: MlpParams  # posterior std, softplus output
    ga: GruParams  # backward encoder over returns

    @property
    def d_a(self):
        return self.ga.n_hidden


@dataclass
class LatentPath:
    """Per-step quantities of one unroll, each a list of length T of arrays."""

    z: list = field(default_factory=list)
    m_prior: list = field(default_factory=list)
    v_prior: list = field(default_factory=list)
    m_post: list = field(default_factory=list)
    v_post: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    enc: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    h: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    kl: list = field(default_factory=list)


def init_dsvm(config, rng):
    c = config
    gen = GenerativeParams(
        f1=init_mlp(c.d_z, c.width, c.d_z, rng, out_act="linear"),
        f2=init_mlp(c.d_z, c.width, c.d_z, rng, out_act="softplus"),
        f3=init_mlp(c.d_h, c.width, 1, rng, out_act="softplus"),
        fh=init_gru(2 + c.d_z, c.d_h, rng),
    )
    inf = InferenceParams(
        g1=init_mlp(c.d_z + c.d_a, c.width, c.d_z, rng, out_act="linear"),
        g2=init_mlp(c.d_z + c.d_a, c.width, c.d_z, rng, out_act="softplus"),
        ga=init_gru(1, c.d_a, rng),
    )
    return gen, inf


def config_of(gen, inf):
    return DsvmConfig(d_z=gen.d_z, d_h=gen.d_h, d_a=inf.d_a, width=gen.f1.w1.shape[0])


def _std_head(p, x):
    return ad.add(mlp_forward(p, x), STD_FLOOR)


def prior_step(gen, z_prev):
    """Prior transition parameters ``(m_p, v_p)`` for z_t given z_{t-1}."""
    return mlp_forward(gen.f1, z_prev), _std_head(gen.f2, z_prev)


def volatility_step(gen, h_prev, sigma_prev, r_prev, z_t):
    """``h_t = GRU(h_{t-1}, [sigma_{t-1}; r_{t-1}; z_t])``, ``sigma_t = f3(h_t)``."""
    x = ad.concat([sigma_prev, r_prev, z_t])
    h = gru_step(gen.fh, h_prev, x)
    return h, _std_head(gen.f3, h)


def encode_backward(inf, r):
    """Right-to-left encoder states ``A_1..A_T`` for returns ``r`` of shape (T, B)."""
    r = ad.value(r) if isinstance(r, ad.Node) else np.asarray(r, dtype=np.float64)
    if r.ndim == 1:
        r = r.reshape(-1, 1)
    T, B = r.shape
    if T == 0:
        raise ValueError("encode_backward: empty sequence")
    a = np.zeros((inf.d_a, B))
    out = [None] * T
    for t in range(T - 1, -1, -1):
        a = gru_step(inf.ga, a, r[t:t + 1])
        out[t] = a
    return out


def posterior_step(inf, z_prev, enc_t, eta_t):
    """Posterior ``(m_q, v_q)`` and the reparameterized draw ``z_t = m_q + eta_t * v_q``."""
    x = ad.concat([z_prev, enc_t])
    m = mlp_forward(inf.g1, x)
    v = _std_head(inf.g2, x)
    return m, v, ad.add(m, ad.mul(eta_t, v))


def _returns_matrix(r):
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 1:
        r = r.reshape(-1, 1)
    if r.ndim != 2 or r.shape[0] == 0:
        raise ValueError(f"returns must be (T, B) with T >= 1, got shape {r.shape}")
    return r


def elbo(gen, inf, r, eta, keep_path=True):
    """Single-sample ELBO per sequence.

    ``r`` is ``(T, B)``, ``eta`` is ``(T, d_z, B)`` standard-normal noise.
    Returns ``(elbo_row, path)`` where ``elbo_row`` is ``(1, B)`` (a 1x1
    scalar for a single sequence): the sum over t of log N(r_t; 0, sigma_t^2)
    minus the analytic KL between posterior and prior transitions, with z
    drawn ancestrally through the posterior.
    """
    r = _returns_matrix(r)
    T, B = r.shape
    eta = np.asarray(eta, dtype=np.float64).reshape(T, gen.d_z, B)
    path = LatentPath()
    try:
        enc = encode_backward(inf, r)
    except ad.NonFiniteError as exc:
        raise DivergenceError(T, "encoder", exc) from exc
    z = np.zeros((gen.d_z, B))
    h = np.zeros((gen.d_h, B))
    sigma = np.zeros((1, B))
    r_prev = np.zeros((1, B))
    total = None
    for t in range(T):
        try:
            m_q, v_q, z_new = posterior_step(inf, z, enc[t], eta[t])
            m_p, v_p = prior_step(gen, z)
            h, sigma = volatility_step(gen, h, sigma, r_prev, z_new)
            ll = ad.gaussian_log_density(r[t:t + 1], 0.0, sigma)
            kl = ad.sum(ad.gaussian_kl(m_q, v_q, m_p, v_p), axis=0)
            step = ad.sub(ll, kl)
        except ad.NonFiniteError as exc:
            raise DivergenceError(t + 1, exc.op, exc) from exc
        total = step if total is None else ad.add(total, step)
        if keep_path:
            path.z.append(ad.value(z_new))
            path.m_prior.append(ad.value(m_p))
            path.v_prior.append(ad.value(v_p))
            path.m_post.append(ad.value(m_q))
            path.v_post.append(ad.value(v_q))
            path.eta.append(eta[t])
            path.enc.append(ad.value(enc[t]))
            path.sigma.append(ad.value(sigma))
            path.h.append(ad.value(h))
            path.loglik.append(ad.value(ll))
            path.kl.append(ad.value(kl))
        z = z_new
        r_prev = r[t:t + 1]
    return total, path


def generate(gen, rng, T, batch=1):
    """Ancestral simulation from the generative network.

    Draw order per step: the latent noise ``(d_z, batch)`` then the return
    noise ``(1, batch)``. Returns ``(r, sigma, z)`` shaped (T, batch),
    (T, batch) and (T, d_z, batch).
    """
    z = np.zeros((gen.d_z, batch))
    h = np.zeros((gen.d_h, batch))
    sigma = np.zeros((1, batch))
    r_prev = np.zeros((1, batch))
    rs, sigmas, zs = [], [], []
    for _ in range(T):
        m_p, v_p = prior_step(gen, z)
        z = m_p + v_p * rng.normal((gen.d_z, batch))
        h, sigma = volatility_step(gen, h, sigma, r_prev, z)
        r_prev = sigma * rng.normal((1, batch))
        rs.append(r_prev[0])
        sigmas.append(sigma[0])
        zs.append(z)
    return np.array(rs), np.array(sigmas), np.array(zs)
