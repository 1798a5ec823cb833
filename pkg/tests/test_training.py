import numpy as np
import pytest

from ebad.checkpoint import load_checkpoint
from ebad.errors import ShapeMismatchError
from ebad.network import ModelParams, batch_energies, init_params, topology_for_input
from ebad.sampler import SamplerConfig
from ebad.training import (
    TrainConfig,
    TrainingDivergedError,
    cd_gradient,
    fit,
    init_optimizer,
    optimizer_step,
)

from conftest import affine_params, central_difference, max_rel_error, random_net


def tiny_train_config(**overrides):
    defaults = dict(
        learning_rate=1e-3,
        batch_size=4,
        epochs=1,
        seed=7,
        sampler=SamplerConfig(step_size=0.05, n_steps=3),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestCdGradient:
    def test_identical_batches_cancel_exactly(self):
        params, image = random_net(50)
        batch = np.stack([image, image * 0.3 + 0.1])
        g = cd_gradient(params, batch, batch)
        for a in g.weights + g.biases:
            np.testing.assert_array_equal(a, np.zeros_like(a))

    def test_affine_hand_value(self):
        # E = w*x + b, pos {x=1}, neg {x=3}: dL/dw = 1 - 3 = -2, dL/db = 0
        params = affine_params(weight=1.0, bias=0.0)
        g = cd_gradient(params, [np.array([[[1.0]]])], [np.array([[[3.0]]])])
        assert g.weights[0][0, 0, 0, 0] == pytest.approx(-2.0)
        assert g.biases[0][0] == pytest.approx(0.0)

    def test_shape_mismatch_rejected(self):
        params = affine_params()
        with pytest.raises(ShapeMismatchError):
            cd_gradient(params, [np.zeros((1, 1, 1))], [np.zeros((2, 2, 1))])

    def test_empty_batch_rejected(self):
        params = affine_params()
        with pytest.raises(ShapeMismatchError, match="empty"):
            cd_gradient(params, [], [np.zeros((1, 1, 1))])

    def test_matches_finite_differences(self):
        for seed in range(3):
            params, image = random_net(seed + 700)
            rng = np.random.default_rng(seed)
            pos = np.stack([image, rng.uniform(-1, 1, image.shape)])
            neg = np.stack([rng.uniform(-1, 1, image.shape) for _ in range(3)])

            grads = cd_gradient(params, pos, neg)

            def loss(ws, bs):
                p = ModelParams(params.topology, ws, bs)
                return float(np.mean(batch_energies(p, pos)) - np.mean(batch_energies(p, neg)))

            for li in range(len(params.weights)):
                def f_w(w, li=li):
                    ws = [a.copy() for a in params.weights]
                    ws[li] = w
                    return loss(ws, params.biases)

                fd = central_difference(f_w, params.weights[li])
                assert max_rel_error(grads.weights[li], fd) <= 1e-4

    def test_regularization_shifts_gradient(self):
        params, image = random_net(4)
        pos = np.stack([image])
        neg = np.stack([image * 0.5])
        plain = cd_gradient(params, pos, neg)
        reg = cd_gradient(params, pos, neg, reg_weight=0.1)
        assert any(not np.allclose(a, b) for a, b in zip(plain.weights, reg.weights))

    def test_regularized_matches_finite_differences(self):
        params, image = random_net(901)
        rng = np.random.default_rng(0)
        pos = np.stack([image, rng.uniform(-1, 1, image.shape)])
        neg = np.stack([rng.uniform(-1, 1, image.shape)])
        w_reg = 0.05

        grads = cd_gradient(params, pos, neg, reg_weight=w_reg)

        def loss(ws, bs):
            p = ModelParams(params.topology, ws, bs)
            ep = batch_energies(p, pos)
            en = batch_energies(p, neg)
            return float(ep.mean() - en.mean()
                         + w_reg * (np.mean(ep ** 2) + np.mean(en ** 2)))

        for li in range(len(params.weights)):
            def f_w(w, li=li):
                ws = [a.copy() for a in params.weights]
                ws[li] = w
                return loss(ws, params.biases)

            fd = central_difference(f_w, params.weights[li])
            assert max_rel_error(grads.weights[li], fd) <= 1e-4


class TestOptimizer:
    def test_sgd_zero_gradient_is_noop(self):
        params, _ = random_net(1)
        cfg = tiny_train_config(optimizer="sgd", learning_rate=0.1)
        state = init_optimizer(cfg, params)
        batch = np.zeros((1,) + _input_shape(params))
        zero = cd_gradient(params, batch, batch)  # identical batches cancel exactly
        new_params, _ = optimizer_step(params, zero, state, cfg)
        for a, b in zip(params.weights, new_params.weights):
            np.testing.assert_array_equal(a, b)

    def test_sgd_definition(self):
        cfg = tiny_train_config(optimizer="sgd", learning_rate=0.1)
        params = affine_params(weight=1.0, bias=0.0)
        state = init_optimizer(cfg, params)
        grads = cd_gradient(params, [np.array([[[0.0]]])], [np.array([[[2.0]]])])
        # dL/dw = 0 - 2 = -2 so w <- 1.0 - 0.1*(-2) = 1.2
        new_params, _ = optimizer_step(params, grads, state, cfg)
        assert new_params.weights[0][0, 0, 0, 0] == pytest.approx(1.2)

    def test_adam_first_step_magnitude(self):
        # at t=1 bias correction makes the update lr * g/(|g| + eps') ~= lr * sign(g)
        cfg = tiny_train_config(optimizer="adam", learning_rate=0.01)
        params = affine_params(weight=1.0, bias=0.5)
        state = init_optimizer(cfg, params)
        grads = cd_gradient(params, [np.array([[[1.0]]])], [np.array([[[3.0]]])])
        g = grads.weights[0][0, 0, 0, 0]  # -2.0
        expected = 1.0 - cfg.learning_rate * g / (abs(g) + cfg.adam_eps)
        new_params, new_state = optimizer_step(params, grads, state, cfg)
        assert new_params.weights[0][0, 0, 0, 0] == pytest.approx(expected, rel=1e-9)
        assert new_state.step == 1


def _input_shape(params):
    return params.topology.input_shape


class TestFit:
    def _dataset(self, n=8, size=32, channels=1, seed=0):
        rng = np.random.default_rng(seed)
        base = rng.uniform(0.3, 0.7, (size, size, channels))
        return np.clip(base + rng.normal(0, 0.05, (n, size, size, channels)), 0, 1)

    def test_zero_learning_rate_keeps_init(self):
        topo = topology_for_input(32, 1)
        cfg = tiny_train_config(learning_rate=0.0)
        params, history = fit(self._dataset(), topo, cfg)
        init_seed = int(np.random.SeedSequence(cfg.seed).spawn(3)[0].generate_state(1)[0])
        reference = init_params(topo, seed=init_seed)
        for a, b in zip(params.weights, reference.weights):
            np.testing.assert_array_equal(a, b)
        assert len(history) == 2  # 8 images / batch 4, 1 epoch

    def test_deterministic_across_runs(self):
        topo = topology_for_input(32, 1)
        data = self._dataset()
        p1, h1 = fit(data, topo, tiny_train_config())
        p2, h2 = fit(data, topo, tiny_train_config())
        for a, b in zip(p1.weights, p2.weights):
            np.testing.assert_array_equal(a, b)
        for r1, r2 in zip(h1.records, h2.records):
            assert (r1.pos_energy, r1.neg_energy, r1.grad_norm) == \
                   (r2.pos_energy, r2.neg_energy, r2.grad_norm)

    def test_divergence_guard_trips(self):
        topo = topology_for_input(32, 1)
        cfg = tiny_train_config(divergence_guard=1e-12)
        with pytest.raises(TrainingDivergedError) as err:
            fit(self._dataset(), topo, cfg)
        assert err.value.iteration == 0

    def test_checkpoint_cadence(self, tmp_path):
        topo = topology_for_input(32, 1)
        cfg = tiny_train_config(checkpoint_every=1)
        params, history = fit(self._dataset(), topo, cfg, checkpoint_dir=tmp_path)
        files = sorted(tmp_path.glob("checkpoint_*.ebm"))
        assert len(files) == len(history)
        loaded = load_checkpoint(files[-1])
        probe = self._dataset(n=2, seed=9)
        np.testing.assert_array_equal(batch_energies(loaded, probe),
                                      batch_energies(params, probe))

    def test_cadence_without_dir_rejected(self):
        cfg = tiny_train_config(checkpoint_every=2)
        with pytest.raises(ValueError, match="checkpoint_dir"):
            fit(self._dataset(), topology_for_input(32, 1), cfg)

    def test_history_csv(self, tmp_path):
        topo = topology_for_input(32, 1)
        _, history = fit(self._dataset(), topo, tiny_train_config())
        out = tmp_path / "history.csv"
        history.to_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "iter,pos_energy,neg_energy,gap,grad_norm,seconds"
        assert len(lines) == len(history) + 1
