import math

import numpy as np
import pytest
from scipy.special import expit, logsumexp

from volcast import autodiff as ad
from volcast import dsvm
from volcast.tree import tree_leaves, tree_map, tree_unflatten

FLOOR = dsvm.STD_FLOOR
LN2 = math.log(2)
SMALL = dsvm.DsvmConfig(d_z=1, d_h=3, d_a=2, width=4)


# independent numpy re-implementation used as the oracle
def np_mlp(p, x):
    act = {"linear": lambda v: v, "softplus": lambda v: np.logaddexp(0, v), "tanh": np.tanh}
    h = np.tanh(p.w1 @ x + p.b1)
    h = np.tanh(p.w2 @ h + p.b2)
    return act[p.out_act](p.w3 @ h + p.b3)


def np_gru(p, h, x):
    u = expit(p.w_update @ x + p.u_update @ h + p.b_update)
    r = expit(p.w_reset @ x + p.u_reset @ h + p.b_reset)
    c = np.tanh(p.w_cand @ x + p.u_cand @ (r * h) + p.b_cand)
    return u * h + (1 - u) * c


def model(seed=0, config=SMALL, bias_scale=0.5):
    """Random parameters including nonzero biases."""
    gen, inf = dsvm.init_dsvm(config, ad.Rng(seed))
    rng = np.random.default_rng(seed)

    def jitter(a):
        return a + bias_scale * rng.normal(size=a.shape) if a.shape[1] == 1 else a

    return tree_map(jitter, gen), tree_map(jitter, inf)


def zeroed(config=SMALL):
    gen, inf = dsvm.init_dsvm(config, ad.Rng(0))
    return tree_map(np.zeros_like, gen), tree_map(np.zeros_like, inf)


def test_zero_weight_prior_step():
    gen, _ = zeroed()
    m, v = dsvm.prior_step(gen, np.array([[3.0, -1.0]]))
    np.testing.assert_array_equal(m, 0.0)
    np.testing.assert_allclose(v, LN2 + FLOOR, rtol=1e-15)


def test_prior_step_matches_mlp_oracle_and_is_deterministic():
    gen, _ = model(1)
    z = np.array([[0.3, -0.7, 0.0]])
    m, v = dsvm.prior_step(gen, z)
    np.testing.assert_allclose(m, np_mlp(gen.f1, z), rtol=1e-13)
    np.testing.assert_allclose(v, np_mlp(gen.f2, z) + FLOOR, rtol=1e-13)
    m2, v2 = dsvm.prior_step(gen, z)
    assert m.tobytes() == m2.tobytes() and v.tobytes() == v2.tobytes()


def test_zero_weight_volatility_first_step():
    gen, _ = zeroed()
    h, s = dsvm.volatility_step(gen, np.zeros((3, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)))
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_allclose(s, LN2 + FLOOR, rtol=1e-15)


def test_volatility_unroll_matches_oracle():
    gen, _ = model(2)
    rng = np.random.default_rng(0)
    r = rng.normal(size=3)
    z = rng.normal(size=3)
    h = np.zeros((3, 1))
    s = np.zeros((1, 1))
    rp = np.zeros((1, 1))
    ho, so, rpo = h.copy(), s.copy(), rp.copy()
    for t in range(3):
        zt = np.array([[z[t]]])
        h, s = dsvm.volatility_step(gen, h, s, rp, zt)
        ho = np_gru(gen.fh, ho, np.vstack([so, rpo, zt]))
        so = np_mlp(gen.f3, ho) + FLOOR
        np.testing.assert_allclose(h, ho, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(s, so, rtol=1e-13)
        rp = rpo = np.array([[r[t]]])


def test_volatility_step_is_pure():
    gen, _ = model(3)
    args = (np.full((3, 1), 0.1), np.array([[0.4]]), np.array([[-0.2]]), np.array([[0.5]]))
    a = dsvm.volatility_step(gen, *args)
    b = dsvm.volatility_step(gen, *args)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_encoder_zero_weights_and_oracle():
    _, inf = zeroed()
    for a in dsvm.encode_backward(inf, np.arange(5.0)):
        np.testing.assert_array_equal(a, 0.0)
    _, inf = model(4)
    r = np.random.default_rng(1).normal(size=6)
    enc = dsvm.encode_backward(inf, r)
    a = np.zeros((2, 1))
    for t in reversed(range(6)):
        a = np_gru(inf.ga, a, np.array([[r[t]]]))
        np.testing.assert_allclose(enc[t], a, rtol=1e-13, atol=1e-15)
    with pytest.raises(ValueError):
        dsvm.encode_backward(inf, np.zeros(0))


def test_encoder_is_anticausal():
    _, inf = model(5)
    r = np.random.default_rng(2).normal(size=8)
    base = dsvm.encode_backward(inf, r)
    for tp in range(8):
        rr = r.copy()
        rr[tp] += 1.5
        pert = dsvm.encode_backward(inf, rr)
        for t in range(tp + 1, 8):
            assert base[t].tobytes() == pert[t].tobytes()
        assert not np.array_equal(base[tp], pert[tp])


def test_posterior_step_examples():
    _, inf = model(6)
    z = np.array([[0.2]])
    a = np.array([[0.1], [-0.3]])
    m, v, zt = dsvm.posterior_step(inf, z, a, np.zeros((1, 1)))
    assert zt.tobytes() == m.tobytes()
    np.testing.assert_allclose(m, np_mlp(inf.g1, np.vstack([z, a])), rtol=1e-13)
    np.testing.assert_allclose(v, np_mlp(inf.g2, np.vstack([z, a])) + FLOOR, rtol=1e-13)

    _, inf0 = zeroed()
    eta = np.array([[1.7]])
    _, _, zt = dsvm.posterior_step(inf0, z, a, eta)
    np.testing.assert_allclose(zt, 1.7 * (LN2 + FLOOR), rtol=1e-15)


def test_posterior_draw_moments():
    _, inf = model(7)
    n = 100_000
    eta = ad.Rng(0).normal((1, n))
    z = np.full((1, n), 0.2)
    a = np.tile([[0.1], [-0.3]], (1, n))
    m, v, zt = dsvm.posterior_step(inf, z, a, eta)
    m0, v0 = m[0, 0], v[0, 0]
    assert abs(zt.mean() - m0) < 3 * v0 / math.sqrt(n)
    assert abs(zt.std() - v0) < 3 * v0 / math.sqrt(2 * n)


def test_elbo_zero_kl_when_q_equals_p():
    gen, inf = zeroed()
    gen.f3 = model(8)[0].f3
    gen.fh = model(8)[0].fh
    r = np.random.default_rng(3).normal(size=(5, 4))
    eta = ad.Rng(1).normal((5, 1, 4))
    total, path = dsvm.elbo(gen, inf, r, eta)
    for kl in path.kl:
        np.testing.assert_array_equal(kl, 0.0)
    ll = sum(path.loglik)
    np.testing.assert_array_equal(total, ll)
    sig = np.vstack(path.sigma)
    ref = (-0.5 * np.log(2 * np.pi) - np.log(sig) - 0.5 * (r / sig) ** 2).sum(axis=0, keepdims=True)
    np.testing.assert_allclose(total, ref, rtol=1e-12)


def test_reparameterization_identity_in_path():
    gen, inf = model(9)
    r = np.random.default_rng(4).normal(size=(6, 3))
    eta = ad.Rng(2).normal((6, 1, 3))
    _, path = dsvm.elbo(gen, inf, r, eta)
    for z, m, v, e in zip(path.z, path.m_post, path.v_post, path.eta):
        assert z.tobytes() == (m + e * v).tobytes()
        np.testing.assert_allclose(z - m, e * v, rtol=1e-12, atol=1e-15)


def test_elbo_path_positivity_and_generative_causality():
    gen, inf = model(10)
    r = np.random.default_rng(5).normal(size=(7, 2))
    eta = ad.Rng(3).normal((7, 1, 2))
    _, path = dsvm.elbo(gen, inf, r, eta)
    for key in ("sigma", "v_prior", "v_post"):
        assert all((x > 0).all() for x in getattr(path, key))

    z = np.array(path.z)

    def unroll(rr):
        h = np.zeros((gen.d_h, 2))
        s = np.zeros((1, 2))
        rp = np.zeros((1, 2))
        out = []
        for t in range(7):
            h, s = dsvm.volatility_step(gen, h, s, rp, z[t])
            out.append(s)
            rp = rr[t:t + 1]
        return out

    base = unroll(r)
    for tp in range(7):
        rr = r.copy()
        rr[tp:] += 2.0
        pert = unroll(rr)
        for t in range(tp + 1):
            assert base[t].tobytes() == pert[t].tobytes()


def test_posterior_params_causality():
    gen, inf = model(11)
    r = np.random.default_rng(6).normal(size=(6, 1))
    eta = ad.Rng(4).normal((6, 1, 1))
    _, base = dsvm.elbo(gen, inf, r, eta)
    z = base.z
    for tp in range(5):
        rr = r.copy()
        rr[tp] -= 1.0
        enc = dsvm.encode_backward(inf, rr)
        for t in range(tp + 1, 6):
            z_prev = z[t - 1]
            m, v, _ = dsvm.posterior_step(inf, z_prev, enc[t], eta[t])
            assert m.tobytes() == base.m_post[t].tobytes()
            assert v.tobytes() == base.v_post[t].tobytes()


def test_elbo_gradients():
    gen, inf = model(12)
    r = np.random.default_rng(7).normal(size=(4, 3))
    eta = ad.Rng(5).normal((4, 1, 3))
    leaves = tree_leaves((gen, inf))

    def f(*ls):
        g, i = tree_unflatten((gen, inf), ls)
        return ad.sum(dsvm.elbo(g, i, r, eta, keep_path=False)[0])

    assert ad.grad_check(f, leaves) < 1e-4


def test_elbo_reports_divergence():
    gen, inf = model(13)
    gen.f3.b3 = gen.f3.b3 - 800.0
    with pytest.raises(dsvm.DivergenceError) as err:
        dsvm.elbo(gen, inf, np.full((3, 1), 1e300), np.zeros((3, 1, 1)))
    assert err.value.t == 1


# --- statistical / quadrature oracles ---------------------------------------


def _t1_pieces(gen, inf, r1):
    """T=1 closed-form pieces: posterior params and sigma as a function of z."""
    a = np_gru(inf.ga, np.zeros((inf.d_a, 1)), np.array([[r1]]))
    x = np.vstack([[[0.0]], a])
    mq = np_mlp(inf.g1, x)[0, 0]
    vq = np_mlp(inf.g2, x)[0, 0] + FLOOR
    mp = np_mlp(gen.f1, np.zeros((1, 1)))[0, 0]
    vp = np_mlp(gen.f2, np.zeros((1, 1)))[0, 0] + FLOOR

    def sigma(z):
        z = np.atleast_1d(z).reshape(1, -1)
        n = z.shape[1]
        h = np_gru(gen.fh, np.zeros((gen.d_h, n)), np.vstack([np.zeros((2, n)), z]))
        return np_mlp(gen.f3, h)[0] + FLOOR

    return mq, vq, mp, vp, sigma


def _log_normal(x, m, s):
    return -0.5 * np.log(2 * np.pi) - np.log(s) - 0.5 * ((x - m) / s) ** 2


def test_elbo_matches_gauss_hermite_quadrature():
    gen, inf = model(14, bias_scale=0.8)
    r1 = 0.7
    mq, vq, mp, vp, sigma = _t1_pieces(gen, inf, r1)
    x, w = np.polynomial.hermite_e.hermegauss(64)
    w = w / w.sum()
    z = mq + vq * x
    integrand = _log_normal(r1, 0.0, sigma(z)) + _log_normal(z, mp, vp) - _log_normal(z, mq, vq)
    quad = float(w @ integrand)

    n = 100_000
    eta = ad.Rng(6).normal((1, 1, n))
    est, _ = dsvm.elbo(gen, inf, np.full((1, n), r1), eta, keep_path=False)
    assert abs(est.mean() - quad) < 1e-2
    assert abs(est.mean() - quad) < 3 * est.std() / math.sqrt(n) + 1e-12


def test_elbo_is_below_log_evidence_t2():
    gen, inf = model(15, bias_scale=0.8)
    r = np.array([0.4, -1.1])
    grid = np.linspace(-12, 12, 801)
    dz = grid[1] - grid[0]
    z1 = np.repeat(grid, grid.size)
    z2 = np.tile(grid, grid.size)
    n = z1.size
    zero = np.zeros((1, n))
    mp1, vp1 = dsvm.prior_step(gen, np.zeros((1, 1)))
    h1, s1 = dsvm.volatility_step(gen, np.zeros((gen.d_h, n)), zero, zero, z1.reshape(1, -1))
    mp2, vp2 = dsvm.prior_step(gen, z1.reshape(1, -1))
    _, s2 = dsvm.volatility_step(gen, h1, s1, np.full((1, n), r[0]), z2.reshape(1, -1))
    log_joint = (_log_normal(z1, mp1[0, 0], vp1[0, 0]) + _log_normal(z2, mp2[0], vp2[0])
                 + _log_normal(r[0], 0, s1[0]) + _log_normal(r[1], 0, s2[0]))
    log_evidence = logsumexp(log_joint) + 2 * math.log(dz)

    m = 20_000
    eta = ad.Rng(7).normal((2, 1, m))
    est, _ = dsvm.elbo(gen, inf, np.tile(r.reshape(2, 1), (1, m)), eta, keep_path=False)
    assert est.mean() <= log_evidence + 3 * est.std() / math.sqrt(m)


def test_elbo_lower_bound_t1_dense_integration():
    gen, inf = model(16, bias_scale=0.8)
    r1 = -0.9
    _, _, mp, vp, sigma = _t1_pieces(gen, inf, r1)
    grid = np.linspace(mp - 12 * vp, mp + 12 * vp, 20_001)
    log_p = logsumexp(_log_normal(r1, 0, sigma(grid)) + _log_normal(grid, mp, vp)) + math.log(grid[1] - grid[0])
    m = 20_000
    est, _ = dsvm.elbo(gen, inf, np.full((1, m), r1), ad.Rng(8).normal((1, 1, m)), keep_path=False)
    assert est.mean() <= log_p + 3 * est.std() / math.sqrt(m)


def test_generate_zero_weights_constant_sigma():
    gen, _ = zeroed()
    r, sig, _ = dsvm.generate(gen, ad.Rng(0), T=3, batch=100_000)
    np.testing.assert_allclose(sig, LN2 + FLOOR, rtol=1e-15)
    s = r[2].std()
    assert abs(s - (LN2 + FLOOR)) < 3 * (LN2 + FLOOR) / math.sqrt(2 * r.shape[1])


def test_generate_determinism_and_first_latent_law():
    gen, _ = model(17)
    a = dsvm.generate(gen, ad.Rng(4), T=5, batch=3)
    b = dsvm.generate(gen, ad.Rng(4), T=5, batch=3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    n = 100_000
    _, _, z = dsvm.generate(gen, ad.Rng(5), T=1, batch=n)
    m0 = np_mlp(gen.f1, np.zeros((1, 1)))[0, 0]
    v0 = np_mlp(gen.f2, np.zeros((1, 1)))[0, 0] + FLOOR
    z1 = z[0, 0]
    assert abs(z1.mean() - m0) < 3 * v0 / math.sqrt(n)
    assert abs(z1.std() - v0) < 3 * v0 / math.sqrt(2 * n)


def test_default_config_dimensions():
    gen, inf = dsvm.init_dsvm(dsvm.DsvmConfig(), ad.Rng(0))
    assert (gen.d_z, gen.d_h, inf.d_a) == (1, 10, 10)
    assert gen.fh.n_in == 3 and gen.f3.n_in == 10 and inf.g1.n_in == 11 and inf.ga.n_in == 1
    assert dsvm.config_of(gen, inf) == dsvm.DsvmConfig()
