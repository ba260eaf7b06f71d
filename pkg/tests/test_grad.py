import numpy as np
import pytest

from tsqueeze.errors import NumericalError, StateError
from tsqueeze.grad import FDReport, ParamSet, backprop, fd_check, numerical_grad, rel_error
from tsqueeze.gradcheck import check_network, small_network_config
from tsqueeze.network import NetworkConfig, TeSNet
from tsqueeze.tspool import TSLayerParams, ts_backward, ts_forward


def small_state(seed=0, **cfg):
    config = small_network_config(**cfg)
    rng = np.random.default_rng(seed)
    net = TeSNet(config, rng=rng, dtype=np.float64)
    clips = rng.uniform(size=(3, config.k, 4, 4, 1))
    labels = rng.integers(0, config.num_classes, size=3)
    return net, clips, labels, net.forward(clips, labels)[2]


def test_paramset_sorted_and_copy():
    p = ParamSet({"b": [1.0], "a": [2.0], "c.w": [[3.0]]})
    assert list(p) == ["a", "b", "c.w"]
    q = p.copy()
    q["a"][0] = 9.0
    assert p["a"][0] == 2.0
    assert all(not v.any() for v in p.zeros_like().values())
    assert p.astype(np.float32)["b"].dtype == np.float32


def test_paramset_validate():
    p = ParamSet({"w": [1.0, np.nan]})
    assert not p.all_finite()
    with pytest.raises(NumericalError):
        p.validate()


def test_rel_error_floor():
    assert rel_error(1e-10, 0.0) == pytest.approx(1e-2)
    assert rel_error(2.0, 1.0) == pytest.approx(0.5)


def test_quadratic():
    p = ParamSet({"w": np.array([1.0, 2.0])})
    report = fd_check(lambda q: np.sum(q["w"] ** 2), p, ParamSet({"w": [2.0, 4.0]}))
    assert report.max_rel_err["w"] < 1e-9
    assert report.passed


def test_zero_step_is_rejected():
    p = ParamSet({"w": np.array([1.0])})
    with pytest.raises(NumericalError):
        numerical_grad(lambda q: float(q["w"][0]), p, h=0.0)


def test_nonfinite_objective_is_rejected():
    p = ParamSet({"w": np.array([1.0])})
    with pytest.raises(NumericalError):
        numerical_grad(lambda q: np.inf, p)


def test_unused_parameter_has_exact_zero_gradient():
    p = ParamSet({"used": np.array([0.3, -0.2]), "unused": np.array([5.0, 6.0])})
    g = numerical_grad(lambda q: np.sum(np.sin(q["used"])), p)
    assert not g["unused"].any()


def test_report_lines():
    r = FDReport({"a": 1e-7, "b": 1e-3}, tol=1e-5)
    assert not r.passed
    assert r.worst == 1e-3
    assert r.lines()[-1] == "FAIL"
    assert "PASS" in r.lines()[0]


def test_proj_loss_through_forward():
    rng = np.random.default_rng(0)
    prm = TSLayerParams(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), 3, 1)
    clip = rng.uniform(size=(3, 2, 2, 1))
    out = ts_forward(clip, prm)
    _, g1, g2 = ts_backward(out.cache, np.zeros_like(out.y), 1.0)

    def f(p):
        return ts_forward(clip, prm.with_weights(p["w1"], p["w2"])).residual

    report = fd_check(f, ParamSet({"w1": prm.w1, "w2": prm.w2}), ParamSet({"w1": g1, "w2": g2}))
    assert report.passed, report.lines()


def test_backprop_requires_forward_state():
    with pytest.raises(StateError):
        backprop(None)
    net, clips, _, _ = small_state()
    _, _, unlabeled = net.forward(clips)
    with pytest.raises(StateError):
        backprop(unlabeled)


def test_zero_weight_head_gradient():
    net, clips, labels, _ = small_state()
    params = net.params.copy()
    params["fc.w"] = np.zeros_like(params["fc.w"])
    scores, _, state = net.forward(clips, labels, params=params)
    np.testing.assert_allclose(scores, 1.0 / net.config.num_classes)
    grads = backprop(state)
    resid = scores.copy()
    resid[np.arange(len(labels)), labels] -= 1.0
    expected = state.feat.T @ resid / len(labels)
    np.testing.assert_allclose(grads["fc.w"], expected, rtol=1e-12, atol=1e-15)

    def f(p):
        return net.forward(clips, labels, params=p)[1].total

    report = fd_check(f, params, grads)
    assert report.max_rel_err["fc.w"] < 1e-5


def test_single_class_without_aux_terms_has_zero_gradients():
    config = NetworkConfig(k=4, num_classes=1, ts_placements=[(0, 2)], conv_blocks=[(2, 3, 2)],
                           beta=0.0, lam=0.0)
    rng = np.random.default_rng(1)
    net = TeSNet(config, rng=rng, dtype=np.float64)
    _, lb, state = net.forward(rng.uniform(size=(2, 4, 4, 4, 1)), [0, 0])
    assert lb.classif == 0.0
    for name, g in backprop(state).items():
        assert not g.any(), name


@pytest.mark.parametrize("seed", range(5))
def test_full_network(seed):
    report = check_network(seed=seed)
    assert report.passed, "\n".join(report.lines())


@pytest.mark.parametrize("alpha", [2.0, 0.5, 4.0])
def test_linearity_is_exact(alpha):
    _, _, _, state = small_state(seed=3)
    base = backprop(state)
    scaled = backprop(state, alpha)
    for name in base:
        assert np.array_equal(scaled[name], alpha * base[name]), name


def test_backprop_is_deterministic():
    _, _, _, state = small_state(seed=4)
    a, b = backprop(state), backprop(state)
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()
