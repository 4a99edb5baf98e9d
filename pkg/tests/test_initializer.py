import numpy as np
import pytest

from fgsmsdi import tensor as T
from fgsmsdi.attacks import AttackConfig, fgsm, input_gradient
from fgsmsdi.initializer import (
    adversarial_loss,
    generate_init,
    generator_ascent_step,
    sdi_perturbation,
    signed_gradient,
)
from fgsmsdi.models import GeneratorNet, init_params
from fgsmsdi.optim import SGD
from fgsmsdi.tensor import Tensor

from oracles import central_diff, max_rel_error

EPS = 8 / 255


def silence(gen):
    """Force the generator's raw output to exactly zero."""
    gen.conv3.weight.data[:] = 0
    gen.bn3.bias.data[:] = 0
    return gen


class TestSignedGradient:
    def test_zero_net(self, rng, linear_net):
        net = linear_net(np.zeros((3, 4)), np.zeros(3))
        s = signed_gradient(net, rng.uniform(0, 1, (2, 1, 1, 4)), np.array([0, 2]))
        np.testing.assert_array_equal(s, 0)

    def test_range(self, tiny_cnn, tiny_batch):
        assert set(np.unique(signed_gradient(tiny_cnn, *tiny_batch))) <= {-1.0, 0.0, 1.0}

    def test_one_dimensional_logistic(self, linear_net):
        # logit gap is x itself, so the label-1 loss log(1 + e^-x) falls as x grows
        net = linear_net(np.array([[0.0], [1.0]]), np.zeros(2))
        s = signed_gradient(net, np.array([[[[0.4]]]]), np.array([1]))
        assert s.item() == -1.0


class TestGenerateInit:
    def test_silent_generator(self, tiny_gen, tiny_batch):
        x, _ = tiny_batch
        eta = generate_init(silence(tiny_gen), x, np.ones_like(x), EPS)
        np.testing.assert_array_equal(eta.data, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded(self, seed, rng):
        gen = GeneratorNet(3, hidden=4, dtype=np.float64)
        init_params(gen, seed)
        x = rng.uniform(0, 1, (3, 3, 5, 5))
        eta = generate_init(gen, x, np.sign(rng.normal(size=x.shape)), EPS)
        assert np.abs(eta.data).max() <= EPS

    def test_zero_epsilon(self, tiny_gen, tiny_batch):
        x, _ = tiny_batch
        np.testing.assert_array_equal(generate_init(tiny_gen, x, np.sign(x - 0.5), 0.0).data, 0)


class TestSDIPerturbation:
    def test_silent_generator_is_fgsm(self, tiny_cnn, tiny_gen, tiny_batch):
        x, y = tiny_batch
        cfg = AttackConfig(EPS, alpha=EPS)
        delta = sdi_perturbation(tiny_cnn, silence(tiny_gen), x, y, cfg)
        assert delta.data.tobytes() == fgsm(tiny_cnn, x, y, cfg).tobytes()

    def test_bounded_and_valid(self, tiny_cnn, tiny_gen, rng):
        x = rng.choice([0.0, 0.02, 0.5, 0.98, 1.0], (6, 3, 6, 6))
        y = rng.integers(0, 4, 6)
        delta = sdi_perturbation(tiny_cnn, tiny_gen, x, y, AttackConfig(EPS)).data
        assert np.abs(delta).max() <= EPS
        assert (x + delta).min() >= 0 and (x + delta).max() <= 1

    def test_generator_gradient_matches_finite_differences(self, tiny_cnn, tiny_gen, tiny_batch, rng):
        x, y = tiny_batch
        cfg = AttackConfig(EPS)
        tiny_cnn.eval()
        s_x = signed_gradient(tiny_cnn, x, y)

        tiny_gen.zero_grad()
        delta = sdi_perturbation(tiny_cnn, tiny_gen, x, y, cfg, s_x=s_x)
        T.backward(adversarial_loss(tiny_cnn, x, y, delta))

        # the FGSM sign is held at its value for the unperturbed generator
        eta0 = generate_init(tiny_gen, x, s_x, EPS).data
        g0, _ = input_gradient(tiny_cnn, x + eta0, y)
        step = EPS * np.sign(g0)

        def loss():
            eta = EPS * tiny_gen(Tensor(x), Tensor(s_x)).data
            d = np.clip(eta + step, -EPS, EPS)
            d = np.clip(np.clip(x + d, 0, 1) - x, -EPS, EPS)
            return adversarial_loss(tiny_cnn, x, y, Tensor(d)).item()

        params = tiny_gen.parameters()
        checked = 0
        for p in params:
            coords = rng.choice(p.data.size, size=min(2, p.data.size), replace=False)
            numeric = central_diff(loss, p.data, coords=coords)
            assert max_rel_error(p.grad.reshape(-1)[coords], numeric.reshape(-1)[coords]) < 1e-4
            checked += len(coords)
            if checked >= 10:
                break
        assert checked >= 10


class TestAscentStep:
    def _loss_now(self, net, gen, x, y, cfg, s_x):
        return adversarial_loss(net, x, y, sdi_perturbation(net, gen, x, y, cfg, s_x=s_x)).item()

    def test_small_step_does_not_decrease_loss(self, tiny_cnn, tiny_gen, tiny_batch):
        x, y = tiny_batch
        cfg = AttackConfig(EPS)
        s_x = signed_gradient(tiny_cnn, x, y)
        before = self._loss_now(tiny_cnn, tiny_gen, x, y, cfg, s_x)
        generator_ascent_step(tiny_gen, tiny_cnn, x, y, cfg, SGD(1e-6, 0.9, maximize=True), s_x=s_x)
        after = self._loss_now(tiny_cnn, tiny_gen, x, y, cfg, s_x)
        assert after >= before - 1e-8

    def test_target_untouched(self, tiny_cnn, tiny_gen, tiny_batch):
        x, y = tiny_batch
        before = {k: v.copy() for k, v in tiny_cnn.state_dict().items() if "running" not in k}
        generator_ascent_step(tiny_gen, tiny_cnn, x, y, AttackConfig(EPS), SGD(0.1, maximize=True))
        for name, p in tiny_cnn.named_parameters():
            assert p.data.tobytes() == before[name].tobytes(), name
            assert p.grad is None

    def test_zero_learning_rate(self, tiny_cnn, tiny_gen, tiny_batch):
        x, y = tiny_batch
        before = [p.data.copy() for p in tiny_gen.parameters()]
        generator_ascent_step(tiny_gen, tiny_cnn, x, y, AttackConfig(EPS), SGD(0.0, maximize=True))
        for p, b in zip(tiny_gen.parameters(), before):
            assert p.data.tobytes() == b.tobytes()

    def test_requires_ascent_optimizer(self, tiny_cnn, tiny_gen, tiny_batch):
        with pytest.raises(ValueError, match="maximize"):
            generator_ascent_step(tiny_gen, tiny_cnn, *tiny_batch, AttackConfig(EPS), SGD(0.1))
