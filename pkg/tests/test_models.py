import numpy as np
import pytest

from smalldiff.models import (ModelSpec, available_models, make_builtin,
                              register_model, validate_model)
from smalldiff import rng


def test_model1_drift_substitution():
    m = make_builtin("model1")
    got = m.drift((1.0, 1.0), (3.0, 6.0, 5.0, 4.0))
    want = np.array([2 * np.cos(7.0) - 3.0, 2 * np.sin(6.0) - 4.0])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_sir_drift_substitution():
    m = make_builtin("sir")
    got = m.drift((0.5, 0.1), (1.2, 1.0))
    np.testing.assert_allclose(got, [-0.06, -0.04], atol=1e-15)


def test_model3_identity_diffusion():
    m = make_builtin("model3")
    x = rng.uniforms(0, 1, (7, 3)) * 4 - 2
    s = m.diffusion(x, np.empty(0))
    assert s.shape == (7, 3, 3)
    np.testing.assert_allclose(s, np.broadcast_to(np.eye(3), (7, 3, 3)))


def test_builtin_dimensions():
    m1 = make_builtin("model1")
    assert (m1.d, m1.r, m1.p, m1.q) == (2, 2, 4, 2)
    assert tuple(m1.x0) == (1.0, 1.0) and m1.T == 1.0
    sir = make_builtin("sir")
    assert sir.shared_params and (sir.d, sir.r) == (2, 2)
    assert tuple(sir.x0) == (0.99999, 0.00001)
    m3 = make_builtin("model3")
    assert (m3.d, m3.r, m3.p, m3.q) == (3, 3, 6, 0)


def test_default_boxes():
    assert np.all(make_builtin("model1").box_alpha == [0.01, 50.0])
    assert np.all(make_builtin("sir").box_alpha == [0.01, 100.0])
    assert np.all(make_builtin("model3").box_alpha == [0.01, 30.0])


def test_unknown_name_rejected():
    with pytest.raises(ValueError, match="unknown model"):
        make_builtin("nope")


def test_override_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        make_builtin("model1", {"x0": (1.0, 1.0, 1.0)})


def test_outputs_finite_and_shaped_on_random_inputs():
    gen_x = rng.uniforms(3, 1, (100, 3)) * 4 - 2
    for name in available_models():
        m = make_builtin(name)
        lo, hi = m.box_alpha[:, 0], m.box_alpha[:, 1]
        for i in range(100):
            x = np.abs(gen_x[i, : m.d])  # sir needs nonnegative states
            a = lo + rng.uniforms(4, i + 1, m.p) * np.minimum(hi - lo, 10.0)
            b = a if m.shared_params else (
                m.box_beta[:, 0] + rng.uniforms(5, i + 1, m.q)
                * np.minimum(m.box_beta[:, 1] - m.box_beta[:, 0], 10.0))
            bx = np.asarray(m.drift(x, a))
            sx = np.asarray(m.diffusion(x, b))
            assert bx.shape == (m.d,) and np.all(np.isfinite(bx))
            assert sx.shape == (m.d, m.r) and np.all(np.isfinite(sx))


def test_sir_covariance_identity():
    m = make_builtin("sir")
    for i in range(50):
        s, it = rng.uniforms(6, i + 1, 2)
        beta, gamma = 0.2 + 2 * rng.uniforms(7, i + 1, 2)
        cov = m.covariance((s, it), (beta, gamma))
        want = np.array([[beta * s * it, -beta * s * it],
                         [-beta * s * it, beta * s * it + gamma * it]])
        np.testing.assert_allclose(cov, want, atol=1e-12)


def test_sir_diffusion_clamps_negative_radicands():
    m = make_builtin("sir")
    s = m.diffusion((1.0, -1e-9), (1.2, 1.0))
    assert np.all(np.isfinite(s)) and np.all(s == 0.0)


def test_vectorized_evaluators_match_pointwise():
    for name in ("model1", "sir", "model3"):
        m = make_builtin(name)
        theta = np.full(m.p, 1.3)
        beta = theta if (m.shared_params or m.q == 0) else np.full(m.q, 0.7)
        xs = np.abs(rng.uniforms(8, 1, (6, m.d))) + 0.05
        batch_b = m.drift(xs, theta)
        batch_s = m.diffusion(xs, beta)
        for i, x in enumerate(xs):
            np.testing.assert_allclose(batch_b[i], m.drift(x, theta))
            np.testing.assert_allclose(batch_s[i], m.diffusion(x, beta))


def test_shared_params_split():
    sir = make_builtin("sir")
    a, b = sir.split_params((1.2, 1.0))
    assert a is b and tuple(a) == (1.2, 1.0)
    m1 = make_builtin("model1")
    a, b = m1.split_params((3, 6, 5, 4, 1, 0.5))
    assert tuple(a) == (3, 6, 5, 4) and tuple(b) == (1, 0.5)
    with pytest.raises(ValueError):
        m1.split_params((1, 2, 3))


def test_validate_model_positive_definite_cases():
    m1 = make_builtin("model1")
    rep = validate_model(m1, (3, 6, 5, 4), (1.0, 0.5), [(1.0, 1.0)])
    assert rep.ok and rep.probes[0][1] > 0

    sir = make_builtin("sir")
    rep = validate_model(sir, (1.2, 1.0), (1.2, 1.0), [(0.0, 0.0)])
    assert not rep.ok
    assert any("singular" in w for w in rep.warnings)

    m3 = make_builtin("model3")
    rep = validate_model(m3, (3, 7, 2, 8, 1, 6), (), [(0.3, -1.2, 2.0)])
    assert rep.ok
    assert rep.probes[0][1] == pytest.approx(1.0)


def test_validate_model_out_of_box_warns_without_raising():
    m1 = make_builtin("model1")
    rep = validate_model(m1, (500.0, 6, 5, 4), (1.0, 0.5), [(1.0, 1.0)])
    assert not rep.alpha_in_box and not rep.ok


def test_register_model_plugin():
    def factory(overrides):
        kw = dict(name="plugin_ou", d=1, r=1, p=1, q=1,
                  drift=lambda x, a: -a[0] * np.asarray(x, dtype=float),
                  diffusion=lambda x, b: np.full(np.asarray(x, dtype=float).shape[:-1] + (1, 1), b[0]),
                  x0=(1.0,), T=1.0, box_alpha=[(0.1, 5.0)], box_beta=[(0.1, 5.0)])
        kw.update(overrides)
        return ModelSpec(**kw)

    register_model("plugin_ou", factory)
    m = make_builtin("plugin_ou", {"T": 2.0})
    assert m.T == 2.0 and "plugin_ou" in available_models()
    with pytest.raises(ValueError):
        register_model("sir", factory)


def test_box_invariants_enforced():
    with pytest.raises(ValueError, match="lo < hi"):
        make_builtin("model1", {"box_alpha": [(1.0, 1.0)] * 4})
