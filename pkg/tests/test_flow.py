import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unvp.flow import (
    ActNorm,
    AffineCoupling,
    DegenerateDataError,
    FlowModel,
    InvertibleMix,
    coupling_mask,
    flow_forward,
    flow_inverse,
    log_likelihood,
)
from unvp.numeric import Adam, Tensor, backward, no_grad
from unvp.preprocessing import Preprocessor
from unvp.priors import ClassPriorSet

LOG_2PI = np.log(2 * np.pi)


def perturb(module, rng, scale=0.01):
    for p in module.parameters():
        p.data += scale * rng.standard_normal(p.shape)


def random_flow(d, seed, n_blocks=8, hidden=16, shape=None):
    rng = np.random.default_rng(seed)
    model = FlowModel(shape or (d,), n_blocks=n_blocks, hidden=hidden, n_res_blocks=1, rng=rng)
    model.initialize(rng.uniform(-0.5, 0.5, size=(64, d)))
    perturb(model, rng)
    return model


def numeric_logdet(fn, x, h=1e-6):
    d = x.size
    jac = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        jac[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return np.linalg.slogdet(jac)[1]


def forward_np(block):
    def fn(v):
        with no_grad():
            return block.forward(Tensor(v[None]))[0].data[0]
    return fn


# --------------------------------------------------------------------------
# coupling


def test_zero_initialized_coupling_is_identity(rng):
    block = AffineCoupling(coupling_mask((6,), 0), 8, 3, rng)
    x = rng.normal(size=(5, 6))
    y, ld = block.forward(Tensor(x))
    np.testing.assert_array_equal(y.data, x)
    np.testing.assert_array_equal(ld.data, 0.0)


def _constant_block(s, t, clamp=2.0):
    block = AffineCoupling(np.array([True, False]), 4, 1, np.random.default_rng(0), clamp=clamp)
    for net in (block.scale_net, block.shift_net):
        for p in net.parameters():
            p.data[...] = 0.0
    # the clamp maps the raw output r to c*tanh(r/c)
    block.scale_net.out.bias.data[...] = clamp * np.arctanh(s / clamp)
    block.shift_net.out.bias.data[...] = t
    return block


def test_constant_coupling_in_two_dims():
    s, t = 0.7, -0.3
    block = _constant_block(s, t)
    x = np.array([[1.5, -2.0]])
    y, ld = block.forward(Tensor(x))
    np.testing.assert_allclose(y.data, [[1.5, -2.0 * np.exp(s) + t]], atol=1e-12)
    assert ld.data[0] == pytest.approx(s, abs=1e-12)
    assert numeric_logdet(forward_np(block), x[0]) == pytest.approx(s, abs=1e-6)


def test_constant_coupling_inverse_in_two_dims():
    s, t = 0.7, -0.3
    block = _constant_block(s, t)
    y = np.array([[0.4, 1.1]])
    np.testing.assert_allclose(block.inverse(y), [[0.4, (1.1 - t) * np.exp(-s)]], atol=1e-12)


def test_coupling_rejects_wrong_width(rng):
    block = AffineCoupling(coupling_mask((4,), 0), 8, 1, rng)
    with pytest.raises(ValueError):
        block.forward(Tensor(np.zeros((2, 5))))
    with pytest.raises(ValueError):
        block.inverse(np.zeros((2, 3)))


@pytest.mark.parametrize("d", [2, 5, 16])
def test_coupling_roundtrip(d):
    rng = np.random.default_rng(d)
    block = AffineCoupling(coupling_mask((d,), 1), 16, 3, rng)
    perturb(block, rng, 0.3)
    x = rng.normal(size=(100, d))
    y, _ = block.forward(Tensor(x))
    assert np.max(np.abs(block.inverse(y.data) - x)) < 1e-9
    y2 = rng.normal(size=(100, d))
    assert np.max(np.abs(block.forward(Tensor(block.inverse(y2)))[0].data - y2)) < 1e-9


def test_masks_alternate_and_cover():
    for shape in [(2,), (7,), (1, 4, 4), (3, 4, 4)]:
        for i in range(4):
            a, b = coupling_mask(shape, i), coupling_mask(shape, i + 1)
            assert a.any() and (~a).any()
            if shape[0] == 1 or len(shape) == 1:
                np.testing.assert_array_equal(a, ~b)
    checker = coupling_mask((1, 4, 4), 0).reshape(4, 4)
    assert checker[0, 0] and not checker[0, 1] and checker[1, 1]


# --------------------------------------------------------------------------
# actnorm and mixing


def test_actnorm_closed_form():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(4000)
    batch = (5.0 + 2.0 * (z - z.mean()) / z.std())[:, None]
    block = ActNorm((1,))
    block.initialize(batch)
    assert block.scale[0] == pytest.approx(0.5, abs=1e-12)
    assert block.bias.data[0] == pytest.approx(-2.5, abs=1e-12)


def test_actnorm_standardizes_batch(rng):
    batch = rng.normal(loc=[3.0, -1.0, 0.0], scale=[0.2, 4.0, 1.0], size=(50, 3))
    block = ActNorm((3,))
    block.initialize(batch)
    y = block.forward(Tensor(batch))[0].data
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-3)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-3)


def test_actnorm_on_standardized_batch_is_near_identity(rng):
    z = rng.standard_normal((20000, 2))
    block = ActNorm((2,))
    block.initialize(z)
    np.testing.assert_allclose(block.scale, 1.0, atol=0.03)
    np.testing.assert_allclose(block.bias.data, 0.0, atol=0.03)


def test_actnorm_degenerate_channel():
    batch = np.column_stack([np.arange(10.0), np.full(10, 3.0)])
    with pytest.raises(DegenerateDataError):
        ActNorm((2,)).initialize(batch)
    with pytest.raises(DegenerateDataError):
        ActNorm((2,)).initialize(batch[:1])


def test_actnorm_must_be_initialized():
    with pytest.raises(RuntimeError, match="initialization"):
        ActNorm((2,)).forward(Tensor(np.zeros((1, 2))))


def test_image_actnorm_is_per_channel(rng):
    batch = rng.normal(size=(30, 2 * 9)) * np.repeat([1.0, 3.0], 9)
    block = ActNorm((2, 3, 3))
    block.initialize(batch)
    y = block.forward(Tensor(batch))[0].data.reshape(30, 2, 9)
    np.testing.assert_allclose(y.transpose(1, 0, 2).reshape(2, -1).std(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("shape", [(4,), (3, 2, 2)])
def test_mix_is_invertible_with_exact_logdet(shape):
    rng = np.random.default_rng(1)
    block = InvertibleMix(shape, rng)
    perturb(block, rng, 0.2)
    d = int(np.prod(shape))
    w = block.weight_array()
    assert abs(np.linalg.det(w)) > 0
    x = rng.normal(size=(10, d))
    y, ld = block.forward(Tensor(x))
    np.testing.assert_allclose(block.inverse(y.data), x, atol=1e-10)
    assert float(ld.data) == pytest.approx(numeric_logdet(forward_np(block), x[0]), abs=1e-6)


# --------------------------------------------------------------------------
# full model


@pytest.mark.parametrize("d,shape", [(2, None), (16, None), (196, (1, 14, 14))])
def test_full_flow_roundtrip(d, shape):
    model = random_flow(d, seed=d, shape=shape)
    x = np.random.default_rng(d + 1).uniform(-0.5, 0.5, size=(100, d))
    z, _ = model.forward(Tensor(x))
    assert np.max(np.abs(model.inverse(z.data) - x)) < 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_full_flow_logdet_matches_numeric_jacobian(seed):
    d = 2 + seed
    model = random_flow(d, seed, n_blocks=4)
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(3, d))
    _, ld = model.forward(Tensor(x))
    for i in range(3):
        assert ld.data[i] == pytest.approx(numeric_logdet(lambda v: model.encode(v[None])[0], x[i]), abs=1e-4)


def test_identity_flow_equals_preprocessing():
    pre = Preprocessor(0.0, 4.0)
    rng = np.random.default_rng(0)
    model = FlowModel((3,), n_blocks=3, hidden=8, n_res_blocks=1, rng=rng, preprocessor=pre)
    model.mark_initialized()
    for block in model.blocks:
        if isinstance(block, InvertibleMix):
            block.lower.data[...] = 0.0
            block.upper.data[...] = 0.0
            block.log_s.data[...] = 0.0
            block.sign[...] = 1.0
            block.perm = np.eye(3)
    x = rng.uniform(0, 4, size=(7, 3))
    z, ld = flow_forward(model, x)
    np.testing.assert_allclose(z, pre(x), atol=1e-12)
    np.testing.assert_allclose(ld, -3 * np.log(4.0), atol=1e-12)
    np.testing.assert_allclose(flow_inverse(model, z), x, atol=1e-12)


def test_fresh_model_after_standardized_init_is_near_preprocessing():
    rng = np.random.default_rng(3)
    model = FlowModel((4,), n_blocks=2, hidden=8, n_res_blocks=1, rng=rng)
    batch = rng.standard_normal((50000, 4))
    model.initialize(batch)
    x = rng.uniform(-0.5, 0.5, size=(20, 4))
    z, ld = model.forward(Tensor(x))
    # a random rotation remains, which is norm-preserving with zero log-det
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), np.linalg.norm(x, axis=1), rtol=0.05)
    mix_logdet = sum(float(b.log_s.data.sum()) for b in model.blocks if isinstance(b, InvertibleMix))
    assert abs(mix_logdet) < 1e-10
    act_logdet = sum(float(b.log_scale.data.sum()) for b in model.blocks if isinstance(b, ActNorm))
    np.testing.assert_allclose(ld.data, act_logdet, atol=1e-12)


def test_flow_rejects_bad_input():
    model = random_flow(3, 0, n_blocks=1)
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 4)))
    fresh = FlowModel((3,), n_blocks=1, hidden=4, n_res_blocks=1)
    with pytest.raises(RuntimeError):
        fresh.forward(np.zeros((2, 3)))


def test_log_likelihood_standard_normal_at_origin():
    pre = Preprocessor(-0.5, 0.5)
    model = FlowModel((2,), n_blocks=1, hidden=4, n_res_blocks=1, preprocessor=pre)
    model.mark_initialized()
    mix = model.blocks[1]
    mix.lower.data[...] = 0.0
    mix.upper.data[...] = 0.0
    mix.log_s.data[...] = 0.0
    mix.sign[...] = 1.0
    mix.perm = np.eye(2)
    priors = ClassPriorSet(3, 2, "unvp")
    assert log_likelihood(model, priors, np.zeros((1, 2)), 0)[0] == pytest.approx(-LOG_2PI, abs=1e-6)
    assert log_likelihood(model, priors, np.zeros((1, 2)), 0)[0] == pytest.approx(-1.837877, abs=1e-6)
    # z at the class mean gives the mode density; class 0 mean is the origin
    with pytest.raises(ValueError):
        log_likelihood(model, priors, np.zeros((1, 2)), 3)


def test_log_likelihood_at_class_mode():
    # identity flow on [-3, 3]: preprocessing is x/6, so z = mu_c needs x = 6 mu_c
    pre = Preprocessor(-3.0, 3.0)
    model = FlowModel((2,), n_blocks=1, hidden=4, n_res_blocks=1, preprocessor=pre)
    model.mark_initialized()
    mix = model.blocks[1]
    mix.lower.data[...] = 0.0
    mix.upper.data[...] = 0.0
    mix.log_s.data[...] = np.log(6.0)
    mix.sign[...] = 1.0
    mix.perm = np.eye(2)
    priors = ClassPriorSet(2, 2, "unvp")
    x = np.array([[1.0, 1.0]])
    # total logdet is log(36) - log(36) = 0, so this is the prior's mode density
    assert log_likelihood(model, priors, x, 1)[0] == pytest.approx(-LOG_2PI, abs=1e-9)


@given(seed=st.integers(0, 1000))
def test_extra_identity_block_leaves_likelihood_unchanged(seed):
    rng = np.random.default_rng(seed)
    pre = Preprocessor(-1.0, 1.0)
    a = FlowModel((3,), n_blocks=2, hidden=8, n_res_blocks=1, rng=np.random.default_rng(0), preprocessor=pre)
    a.initialize(rng.uniform(-0.5, 0.5, size=(32, 3)))
    perturb(a, rng)
    b = FlowModel((3,), n_blocks=3, hidden=8, n_res_blocks=1, rng=np.random.default_rng(0), preprocessor=pre)
    b.load_state_dict({**b.state_dict(), **a.state_dict()})
    b.mark_initialized()
    extra = b.blocks[6:]
    extra[0].log_scale.data[...] = 0.0
    extra[0].bias.data[...] = 0.0
    extra[1].perm = np.eye(3)
    extra[1].lower.data[...] = 0.0
    extra[1].upper.data[...] = 0.0
    extra[1].log_s.data[...] = 0.0
    extra[1].sign[...] = 1.0
    priors = ClassPriorSet(2, 3, "unvp")
    x = rng.uniform(-1, 1, size=(5, 3))
    np.testing.assert_allclose(log_likelihood(a, priors, x, 1), log_likelihood(b, priors, x, 1), atol=1e-10)


def test_likelihood_training_reaches_entropy():
    rng = np.random.default_rng(0)
    n, d = 2000, 2
    y = np.repeat([0, 1], n // 2)
    x = y[:, None] + rng.standard_normal((n, d))
    pre = Preprocessor(-6.0, 7.0)
    xp = pre(x)
    model = FlowModel((d,), n_blocks=2, hidden=16, n_res_blocks=1, rng=np.random.default_rng(1), preprocessor=pre)
    model.initialize(xp)
    priors = ClassPriorSet(2, d, "unvp")
    opt = Adam(model.parameters(), lr=1e-2)
    for _ in range(150):
        z, ld = model.forward(xp)
        nll = -(priors.log_prob(z, y) + ld).mean() - pre.logdet(d)
        backward(nll)
        opt.step()
        opt.zero_grad()
    entropy = d / 2 * np.log(2 * np.pi * np.e)
    assert abs(nll.item() - entropy) < 0.05 * entropy
