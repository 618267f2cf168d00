import math

import numpy as np
import pytest

from surrotune import autodiff as ad
from surrotune import nn
from surrotune.blackbox.space import param_planes

from helpers import check_piecewise, weighted


def _inputs(rng, h=64, w=64):
    return ad.Tensor(rng.random((h, w, 3))), param_planes(ad.Tensor(rng.random(5)), h, w)


def test_surrogate_shapes_and_range():
    rng = np.random.default_rng(0)
    net = nn.SurrogateNet(seed=1)
    x, planes = _inputs(rng)
    y = nn.surrogate_forward(net, x, planes)
    assert y.shape == (64, 64, 3)
    assert np.all((y.data >= 0) & (y.data <= 1))


def test_param_learner_shapes_and_range():
    net = nn.ParamLearnerNet(seed=1)
    out = nn.param_learner_forward(net, np.random.default_rng(0).random((64, 64, 3)))
    assert out.shape == (64, 64, 5)
    assert np.all((out.data > 0) & (out.data < 1))
    u = ad.channel_mean(out).data
    assert u.shape == (5,) and np.all((u > 0) & (u < 1))


def test_input_validation():
    net = nn.SurrogateNet(seed=0)
    with pytest.raises(ValueError, match="divisible by 4"):
        net(ad.Tensor(np.zeros((30, 32, 3))), ad.Tensor(np.zeros((30, 32, 5))))
    with pytest.raises(ValueError, match="channels"):
        net(ad.Tensor(np.zeros((32, 32, 1))), ad.Tensor(np.zeros((32, 32, 5))))
    with pytest.raises(ValueError):
        net(ad.Tensor(np.zeros((32, 32, 3))), ad.Tensor(np.zeros((32, 32, 4))))
    with pytest.raises(ValueError, match="divisible by 4"):
        nn.ParamLearnerNet(seed=0)(ad.Tensor(np.zeros((6, 8, 3))))


def test_surrogate_sensitivity_to_every_plane():
    rng = np.random.default_rng(2)
    net = nn.SurrogateNet(seed=3)
    x = ad.Tensor(rng.random((32, 32, 3)))
    u = rng.random(5) * 0.8
    base = net(x, param_planes(ad.Tensor(u), 32, 32)).data
    for p in range(5):
        v = u.copy()
        v[p] += 0.1
        moved = net(x, param_planes(ad.Tensor(v), 32, 32)).data
        assert np.linalg.norm(moved - base) > 0, p


def test_init_is_deterministic_per_seed():
    a, b, c = nn.SurrogateNet(seed=5), nn.SurrogateNet(seed=5), nn.SurrogateNet(seed=6)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_init_scale_and_zero_bias():
    net = nn.ParamLearnerNet(seed=0)
    for layer in net.layers:
        k, _, cin, _ = layer.kernel.shape
        assert np.abs(layer.kernel.data).max() <= math.sqrt(1 / (k * k * cin))
        assert not layer.bias.data.any()


# -- gradient checks through the full networks ------------------------------------

@pytest.mark.parametrize("i", range(20))
def test_surrogate_gradients(i):
    rng = np.random.default_rng(50 + i)
    with ad.check_mode():
        net = nn.SurrogateNet(widths=(4, 6, 8), seed=i)
        x = ad.Tensor(rng.random((8, 8, 3)))
        u = ad.Tensor(rng.random(5))
        loss = lambda: weighted(net(x, param_planes(u, 8, 8)), np.random.default_rng(i))
        tensors = [u, x] + net.parameters()
        err, checked, rejected = check_piecewise(loss, tensors, rng)
    # small bias vectors can sit entirely next to kinks; every larger tensor gets full coverage
    assert checked >= 6 * sum(t.data.size >= 24 for t in tensors)
    assert err < 1e-3


@pytest.mark.parametrize("i", range(20))
def test_param_learner_gradients(i):
    rng = np.random.default_rng(80 + i)
    with ad.check_mode():
        net = nn.ParamLearnerNet(widths=(4, 6), seed=i)
        x = ad.Tensor(rng.random((8, 8, 3)))
        loss = lambda: weighted(ad.channel_mean(net(x)), np.random.default_rng(i))
        tensors = [x] + net.parameters()
        err, checked, rejected = check_piecewise(loss, tensors, rng)
    # small bias vectors can sit entirely next to kinks; every larger tensor gets full coverage
    assert checked >= 6 * sum(t.data.size >= 24 for t in tensors)
    assert err < 1e-3


# -- Adam -----------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    p = ad.Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0], np.float32)
    state = nn.AdamState(lr=0.01)
    nn.adam_step(state, [p])
    assert p.data[0] == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-7)
    assert state.t == 1


def test_adam_zero_grad_is_a_no_op():
    p = ad.Tensor(np.array([0.3, -0.7]), requires_grad=True)
    p.grad = np.zeros(2, np.float32)
    before = p.data.copy()
    nn.adam_step(nn.AdamState(lr=0.1), [p])
    np.testing.assert_array_equal(p.data, before)


def test_adam_missing_grad():
    with pytest.raises(ValueError, match="missing grad"):
        nn.adam_step(nn.AdamState(lr=0.1), [ad.Tensor(np.zeros(2), requires_grad=True)])


def test_adam_minimises_square():
    with ad.check_mode():
        w = ad.Tensor(np.array(1.0), requires_grad=True)
        state = nn.AdamState(lr=0.1)
        for _ in range(100):
            w.grad = None
            with ad.Tape():
                ad.backward(ad.mul(w, w))
            nn.adam_step(state, [w])
    assert abs(w.item()) < 0.1


def _scalar_adam(w, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    return w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps), m, v


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(9)
    worst = 0.0
    with ad.check_mode():
        for _ in range(1000):
            w0, g = rng.standard_normal(2)
            m0, v0 = rng.standard_normal(), rng.random()
            t = int(rng.integers(0, 50))
            p = ad.Tensor(np.array([w0]), requires_grad=True)
            p.grad = np.array([g])
            state = nn.AdamState(lr=0.01, t=t, m=[np.array([m0])], v=[np.array([v0])])
            nn.adam_step(state, [p])
            ref, mr, vr = _scalar_adam(w0, g, m0, v0, t + 1, 0.01)
            worst = max(worst, abs(p.data[0] - ref) / max(abs(ref), 1e-12))
            assert state.t == t + 1 and state.v[0][0] >= 0
    assert worst < 1e-5


# -- bundles ----------------------------------------------------------------------------

def test_bundle_round_trip(tmp_path):
    net = nn.SurrogateNet(widths=(4, 8, 8), seed=4)
    path, again = tmp_path / "a.mdl", tmp_path / "b.mdl"
    nn.save_model(net, path)
    loaded = nn.load_model(path)
    nn.save_model(loaded, again)
    assert path.read_bytes() == again.read_bytes()
    x, planes = _inputs(np.random.default_rng(0), 16, 16)
    assert np.array_equal(net(x, planes).data, loaded(x, planes).data)


def test_bundle_errors(tmp_path):
    net = nn.ParamLearnerNet(widths=(4, 8), seed=0)
    path = tmp_path / "m.mdl"
    nn.save_model(net, path)
    blob = path.read_bytes()
    (tmp_path / "cut.mdl").write_bytes(blob[:-3])
    with pytest.raises(nn.ModelFormatError, match="truncated payload"):
        nn.load_model(tmp_path / "cut.mdl")
    (tmp_path / "magic.mdl").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(nn.ModelFormatError, match="bad magic"):
        nn.load_model(tmp_path / "magic.mdl")
    (tmp_path / "long.mdl").write_bytes(blob + b"\0")
    with pytest.raises(nn.ModelFormatError, match="trailing"):
        nn.load_model(tmp_path / "long.mdl")
    with pytest.raises(nn.ModelFormatError, match="architecture mismatch"):
        nn.load_model(path, expect={"kind": "surrogate"})
