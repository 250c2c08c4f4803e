import json
from types import SimpleNamespace

import numpy as np
import pytest

from symder import library as lib
from symder import tensor as T


def norm_record(mean, std, dt):
    return SimpleNamespace(mean=np.asarray(mean, dtype=float),
                           std=np.asarray(std, dtype=float), dt=dt)


def test_zero_model_evaluates_to_zero():
    m = lib.ode_library()
    m.theta[:] = 0.0
    m.sync()
    out = m.evaluate(np.ones((5, 3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_rossler_first_component():
    # du/dt = -v - w at (u,v,w) = (1,2,3) -> -5
    m = lib.ode_library()
    names = [t.name for t in m.terms]
    m.theta[0, names.index("v")] = -1.0
    m.theta[0, names.index("w")] = -1.0
    m.sync()
    out = m.evaluate(np.array([1.0, 2.0, 3.0]))
    assert out.data[0] == -5.0


def test_laplacian_of_constant_field_is_zero():
    m = lib.pde_library()
    names = [t.name for t in m.terms]
    m.theta[:] = 0.0
    m.theta[0, names.index("dxx(u)")] = 0.1
    m.theta[0, names.index("dyy(u)")] = 0.1
    m.sync()
    state = np.full((4, 8, 8, 2), 2.3)
    out = m.evaluate(state)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-14)


def test_state_dim_mismatch():
    m = lib.ode_library()
    with pytest.raises(ValueError, match="components"):
        m.evaluate(np.ones((5, 2)))


def test_linearity_in_theta():
    rng = np.random.default_rng(0)
    m1 = lib.ode_library()
    m2 = lib.ode_library()
    m12 = lib.ode_library()
    t1 = rng.standard_normal(m1.theta.shape)
    t2 = rng.standard_normal(m1.theta.shape)
    m1.theta[:], m2.theta[:], m12.theta[:] = t1, t2, t1 + t2
    for m in (m1, m2, m12):
        m.sync()
    state = rng.standard_normal((7, 3))
    np.testing.assert_allclose(m12.evaluate(state).data,
                               m1.evaluate(state).data + m2.evaluate(state).data,
                               rtol=1e-13)


def test_sparsify_threshold_and_counts():
    m = lib.ode_library()
    m.theta[:] = 0.0
    m.theta[0, 0], m.theta[0, 1] = 0.5, 5e-4
    m.mask[:] = False
    m.mask[0, :2] = True
    m.sync()
    n = m.sparsify(1e-3)
    assert n == 1
    assert m.theta[0, 1] == 0.0 and m.theta[0, 0] == 0.5
    assert not m.mask[0, 1]


def test_sparsify_noop_and_idempotent():
    m = lib.ode_library()
    m.theta[:] = 0.0
    m.theta[0, :3] = [0.5, -0.7, 0.2]
    m.mask[:] = False
    m.mask[0, :3] = True
    m.sync()
    assert m.sparsify(0.1) == 0
    assert m.sparsify(0.1) == 0  # idempotent at fixed threshold
    # all-zero masked coefficients: nothing newly zeroed
    z = lib.ode_library()
    z.theta[:] = 0.0
    z.mask[:] = False
    assert z.sparsify(1e-3) == 0


def test_masked_coefficients_get_zero_gradient():
    m = lib.ode_library()
    rng = np.random.default_rng(1)
    m.theta[:] = rng.standard_normal(m.theta.shape)
    m.mask[:, ::2] = False
    m.theta[~m.mask] = 0.0
    m.sync()
    state = T.Tensor(rng.standard_normal((6, 3)))
    loss = T.tsum(T.square(m.evaluate(state)))
    T.backward(loss)
    g = m.theta_t.grad
    if g is None:
        g = np.zeros_like(m.theta)
    np.testing.assert_array_equal(g[~m.mask], 0.0)
    assert np.abs(g[m.mask]).max() > 0


def test_masked_never_revive():
    m = lib.ode_library()
    m.theta[:] = 1.0
    m.sparsify(2.0)  # masks everything
    m.theta[:] = 5.0  # even large values stay masked
    m.sync()
    assert m.sparsify(1e-3) == 0
    assert m.active_terms() == 0
    out = m.evaluate(np.ones(3))
    np.testing.assert_array_equal(out.data, 0.0)


def test_json_roundtrip_exact():
    rng = np.random.default_rng(2)
    for make in (lib.ode_library,
                 lambda: lib.pde_library(dx=1.5, dy=0.5),
                 lambda: lib.nlse_library(dx=2 * np.pi / 64)):
        m = make()
        m.theta[:] = rng.standard_normal(m.theta.shape)
        m.mask.flat[::3] = False
        m.theta[~m.mask] = 0.0
        m.sync()
        m2 = lib.SymbolicModel.from_json(m.to_json())
        np.testing.assert_array_equal(m.theta, m2.theta)
        np.testing.assert_array_equal(m.mask, m2.mask)
        assert [t.name for t in m.terms] == [t.name for t in m2.terms]
        assert (m.s_t, m.s_x, m.state_dim, m.kind) == \
            (m2.s_t, m2.s_x, m2.state_dim, m2.kind)
        assert m.to_json() == m2.to_json()
        json.loads(m.to_json())  # valid JSON document


def test_physical_coefficients_pure_time_scale():
    m = lib.ode_library(s_t=10.0)
    names = [t.name for t in m.terms]
    m.theta[:] = 0.0
    m.mask[:] = False
    i = names.index("u")
    m.theta[0, i] = 2.84
    m.mask[0, i] = True
    m.sync()
    norm = norm_record([0, 0, 0], [1, 1, 1], dt=1.0)
    table = lib.physical_coefficients(m, norm)
    assert table[0][("mono", (1, 0, 0))] == pytest.approx(0.284, rel=1e-12)


def test_physical_coefficients_identity():
    rng = np.random.default_rng(3)
    m = lib.ode_library(s_t=1.0)
    m.theta[:] = rng.standard_normal(m.theta.shape)
    m.sync()
    norm = norm_record([0, 0, 0], [1, 1, 1], dt=1.0)
    table = lib.physical_coefficients(m, norm)
    for j in range(3):
        for i, t in enumerate(m.terms):
            key = ("mono", t.exponents)
            assert table[j][key] == pytest.approx(m.theta[j, i], rel=1e-12)


def test_physical_coefficients_requires_norm():
    m = lib.ode_library()
    with pytest.raises(ValueError, match="normalization"):
        lib.physical_coefficients(m, None)


def test_time_rescale_invariance():
    # scaling s_t -> lam*s_t with theta -> lam*theta reports the same physics
    rng = np.random.default_rng(4)
    theta = rng.standard_normal((3, 10))
    norm = norm_record(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3), 0.01)
    lam = 3.7
    m1 = lib.ode_library(s_t=10.0)
    m1.theta[:] = theta
    m1.sync()
    m2 = lib.ode_library(s_t=10.0 * lam)
    m2.theta[:] = theta * lam
    m2.sync()
    t1 = lib.physical_coefficients(m1, norm)
    t2 = lib.physical_coefficients(m2, norm)
    for j in t1:
        for key in t1[j]:
            assert t1[j][key] == pytest.approx(t2[j].get(key, 0.0), rel=1e-12)


def test_physical_coefficients_undo_normalization():
    # generate from known du/dt = 2u - 0.5uv, dv/dt = -v; normalize; invert
    truth = {0: {("mono", (1, 0)): 2.0, ("mono", (1, 1)): -0.5},
             1: {("mono", (0, 1)): -1.0}}
    mean = np.array([1.2, -0.4])
    std = np.array([2.0, 0.7])
    dt = 0.05
    s_t = 10.0
    # forward-map the truth into normalized/model-time coefficients
    fwd = lib.affine_substitute(truth, alpha=std, gamma=mean,
                                row_scale={0: 1 / std[0], 1: 1 / std[1]})
    m = lib.SymbolicModel(terms=lib.monomial_terms(2), theta=np.zeros((2, 6)),
                          mask=np.ones((2, 6), dtype=bool), s_t=s_t,
                          state_dim=2)
    for j, row in fwd.items():
        for key, c in row.items():
            for i, t in enumerate(m.terms):
                if ("mono", t.exponents) == key:
                    m.theta[j, i] = c * (s_t * dt)
    m.sync()
    table = lib.physical_coefficients(m, norm_record(mean, std, dt))
    for j in truth:
        for key, c in table[j].items():
            assert c == pytest.approx(truth[j].get(key, 0.0), abs=1e-12)


def test_nlse_terms_respect_global_phase_symmetry():
    m = lib.nlse_library(dx=0.3)
    geom = m.geometry()
    rng = np.random.default_rng(5)
    psi = rng.standard_normal(32) + 1j * rng.standard_normal(32)
    for alpha in (0.3, 1.7, -2.2):
        rot = psi * np.exp(1j * alpha)
        for t in m.terms:
            fr, fi = t.evaluate([psi.real, psi.imag], geom)
            gr, gi = t.evaluate([rot.real, rot.imag], geom)
            expect = (fr + 1j * fi) * np.exp(1j * alpha)
            np.testing.assert_allclose(gr + 1j * gi, expect, rtol=1e-12,
                                       err_msg=t.name)


def test_affine_substitute_roundtrip():
    rng = np.random.default_rng(6)
    table = {0: {("mono", (0, 0, 0)): 0.3, ("mono", (1, 0, 1)): -1.2,
                 ("mono", (0, 0, 2)): 0.7},
             2: {("mono", (0, 0, 1)): 2.0, ("mono", (1, 1, 0)): 1.0}}
    alpha = np.array([1.0, 1.0, 2.5])
    gamma = np.array([0.0, 0.0, -0.8])
    rows = {0: 1.0, 2: 4.0}
    fwd = lib.affine_substitute(table, alpha, gamma, rows)
    back = lib.affine_substitute(fwd, 1.0 / alpha, -gamma / alpha,
                                 {k: 1.0 / v for k, v in rows.items()})
    for j in table:
        keys = set(table[j]) | set(back[j])
        for key in keys:
            assert back[j].get(key, 0.0) == pytest.approx(
                table[j].get(key, 0.0), abs=1e-12)


def test_term_names():
    m = lib.pde_library()
    names = [t.name for t in m.terms]
    assert "1" in names and "u*v" in names and "dxy(u)" in names
    assert "u^2" in names and "dyy(v)" in names
    n = lib.nlse_library(dx=0.1)
    assert [t.name for t in n.terms][:2] == ["dx(psi)", "dx^2(psi)"]
    assert "|psi|^6*psi" in [t.name for t in n.terms]
