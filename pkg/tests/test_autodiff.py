import numpy as np
import pytest

from tabsynth import autodiff as ad
from tabsynth.autodiff import Tensor
from tabsynth.errors import ValidationError
from tabsynth.nn import (
    TRAIN,
    AdamConfig,
    AdamState,
    Head,
    Mlp,
    MlpSpec,
    adam_step,
    critic_spec,
    generator_spec,
    grad_norm_penalty,
    gumbel_softmax,
    harden,
)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def central_diff(f, arrays, h=1e-6):
    """Finite-difference gradient of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            up = f()
            a[i] = old - h
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestScalarGradients:
    def test_square(self):
        x = leaf(3.0)
        (g,) = ad.grad(x * x, [x])
        assert g.item() == 6.0

    def test_product(self):
        x, y = leaf(2.0), leaf(5.0)
        gx, gy = ad.grad(x * y, [x, y])
        assert (gx.item(), gy.item()) == (5.0, 2.0)

    def test_second_derivative(self):
        x = leaf(1.5)
        (g,) = ad.grad(x * x * x, [x], create_graph=True)
        (gg,) = ad.grad(g, [x])
        assert gg.item() == pytest.approx(9.0)

    def test_nonscalar_root_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValidationError):
            ad.grad(x * 2.0, [x])

    def test_no_grad_records_nothing(self):
        x = leaf(2.0)
        with ad.no_grad():
            y = x * x
        assert not y.requires_grad

    def test_unused_input_gets_zero(self):
        x, y = leaf(2.0), leaf(np.ones(3))
        _, gy = ad.grad(x * x, [x, y])
        assert gy.numpy().tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: ad.sum_(ad.exp(x) * ad.tanh(x)),
        lambda x: ad.sum_(ad.log(x * x + 1.0) / (x + 3.0)),
        lambda x: ad.sum_(ad.softmax(x, axis=1) * ad.log_softmax(x, axis=1)),
        lambda x: ad.sum_(ad.sqrt(x * x + 0.5) ** 3),
        lambda x: ad.sum_(ad.row_norm(x)),
        lambda x: ad.mean(ad.concat([x, x[:, :2] * 2.0], axis=1) @ ad.transpose(ad.concat([x, x[:, :2]], axis=1))),
        lambda x: ad.sum_(ad.reshape(x, (3, 4)).mean(axis=0) ** 2),
    ],
)
def test_op_gradients_match_finite_differences(fn):
    a = np.random.default_rng(0).normal(size=(4, 3))
    x = leaf(a)
    (g,) = ad.grad(fn(x), [x])
    (fd,) = central_diff(lambda: fn(Tensor(a)).item(), [a])
    assert rel_err(g.numpy(), fd) < 1e-6


def test_row_norm_subgradient_at_zero():
    x = leaf(np.zeros((2, 3)))
    (g,) = ad.grad(ad.sum_(ad.row_norm(x)), [x])
    assert np.all(g.numpy() == 0)


class TestMlp:
    def test_identity_linear(self):
        spec = MlpSpec(input_width=3, hidden=(), output_width=3)
        net = Mlp(spec, params={"out.w": np.eye(3), "out.b": np.zeros(3)})
        x = np.array([[1.0, -2.0, 0.5]])
        assert net(x).numpy().tolist() == x.tolist()

    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 2.0])).numpy().tolist() == [0.0, 2.0]

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        net = Mlp(MlpSpec(input_width=4, hidden=(6, 5), activation="leaky_relu", output_width=1), rng)
        x = rng.normal(size=(7, 4))

        def loss():
            return ad.sum_(ad.tanh(net(x)))

        grads = ad.grad(loss(), net.parameters())
        fds = central_diff(lambda: loss().item(), [p.data for p in net.parameters()])
        for g, fd in zip(grads, fds):
            assert rel_err(g.numpy(), fd) < 1e-4

    def test_residual_widths(self):
        spec = generator_spec(5, 3, [Head("tanh", 0, 1), Head("softmax", 1, 2)], hidden=(4, 4))
        net = Mlp(spec, np.random.default_rng(0))
        shapes = dict(net.param_shapes())
        assert shapes["layer1.w"] == (12, 4)
        assert shapes["out.w"] == (16, 3)

    def test_pac_reshape(self):
        net = Mlp(critic_spec(3, pac=2, hidden=(4,)), np.random.default_rng(0))
        assert net(np.ones((6, 3))).shape == (3, 1)
        with pytest.raises(ValidationError):
            net(np.ones((5, 3)))

    def test_dropout_only_in_train(self):
        net = Mlp(critic_spec(3, pac=1, hidden=(16,)), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(net(x).numpy(), net(x).numpy())
        a = net(x, TRAIN, np.random.default_rng(2)).numpy()
        b = net(x, TRAIN, np.random.default_rng(3)).numpy()
        assert not np.array_equal(a, b)

    def test_spec_round_trip(self):
        spec = generator_spec(5, 3, [Head("tanh", 0, 1), Head("softmax", 1, 2)])
        assert MlpSpec.from_dict(spec.to_dict()) == spec


class TestGumbel:
    def test_simplex(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(50, 4)) * 3)
        out = gumbel_softmax(logits, 0.2, np.random.default_rng(1)).numpy()
        assert np.all(out >= 0)
        assert np.abs(out.sum(axis=1) - 1).max() <= 1e-9

    def test_low_temperature_is_one_hot(self):
        logits = np.random.default_rng(0).normal(size=(20, 5))
        out = gumbel_softmax(Tensor(logits), 1e-4, None).numpy()
        assert np.allclose(out, np.eye(5)[logits.argmax(axis=1)])

    def test_harden(self):
        heads = [Head("tanh", 0, 1), Head("softmax", 1, 3)]
        out = harden(np.array([[0.0, 1.0, 5.0, 2.0]]), heads)
        assert out.tolist() == [[0.0, 0.0, 1.0, 0.0]]


class TestGradientPenalty:
    def linear_critic(self, w):
        spec = MlpSpec(input_width=w.size, hidden=(), output_width=1)
        return Mlp(spec, params={"out.w": w[:, None], "out.b": np.zeros(1)})

    @pytest.mark.parametrize("seed", range(3))
    def test_linear_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=5)
        x_hat = rng.normal(size=(8, 5)) * 10
        penalty = grad_norm_penalty(self.linear_critic(w), x_hat).item()
        assert abs(penalty - (np.linalg.norm(w) - 1) ** 2) <= 1e-12

    def test_unit_norm_minimum(self):
        w = np.array([0.6, 0.8])
        critic = self.linear_critic(w)
        penalty = grad_norm_penalty(critic, np.ones((3, 2)))
        assert penalty.item() == pytest.approx(0.0, abs=1e-15)
        grads = ad.grad(penalty, critic.parameters())
        assert all(np.abs(g.numpy()).max() <= 1e-15 for g in grads)

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        critic = Mlp(critic_spec(3, pac=2, hidden=(5, 4), dropout=0.0), rng)
        x_hat = rng.normal(size=(6, 3))
        grads = ad.grad(grad_norm_penalty(critic, x_hat), critic.parameters())
        fds = central_diff(lambda: grad_norm_penalty(critic, x_hat).item(), [p.data for p in critic.parameters()])
        for g, fd in zip(grads, fds):
            assert rel_err(g.numpy(), fd) < 1e-3


class TestAdam:
    def test_zero_gradient(self):
        p = leaf([1.0, -2.0])
        state = adam_step([p], [np.zeros(2)], AdamState(), AdamConfig())
        assert p.numpy().tolist() == [1.0, -2.0]
        assert state.t == 1

    def test_descends(self):
        p = leaf(0.0)
        state = AdamState()
        for _ in range(50):
            state = adam_step([p], [np.array(3.0)], state, AdamConfig(lr=0.01))
        assert p.item() < -0.4

    def test_two_steps_by_hand(self):
        p = leaf(0.0)
        cfg = AdamConfig(lr=0.1, beta1=0.5, beta2=0.9, eps=0.0)
        state = adam_step([p], [np.array(1.0)], AdamState(), cfg)
        # m = 0.5, v = 0.1; bias-corrected both are 1
        assert p.item() == pytest.approx(-0.1, abs=1e-15)
        adam_step([p], [np.array(-2.0)], state, cfg)
        # m = -0.75, v = 0.49; corrections 0.75 and 0.19
        assert p.item() == pytest.approx(-0.1 + 0.1 / np.sqrt(0.49 / 0.19), abs=1e-15)

    def test_weight_decay(self):
        p = leaf(2.0)
        adam_step([p], [np.array(0.0)], AdamState(), AdamConfig(lr=0.1, weight_decay=1e-6))
        # decay supplies the whole gradient g = 2e-6, so eps = 1e-8 is visible
        g = 2e-6
        assert p.item() == pytest.approx(2.0 - 0.1 * g / (g + 1e-8), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            adam_step([leaf([1.0])], [np.zeros(2)], AdamState(), AdamConfig())
