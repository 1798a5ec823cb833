import numpy as np
import pytest

from ebad.network import init_params, topology_for_input
from ebad.sampler import (
    QuadraticEnergy,
    ReplayBuffer,
    SamplerConfig,
    SamplingDivergedError,
    chain_rngs,
    energy_trace,
    export_energy_trace_csv,
    init_chain,
    sample_negatives,
    sgld_step,
)

from conftest import affine_params


class ConstantEnergy:
    def energy(self, x):
        return 1.5

    def batch_energy_and_grad(self, batch):
        batch = np.asarray(batch, dtype=float)
        return np.full(batch.shape[0], 1.5), np.zeros_like(batch)


class TestConfig:
    def test_noise_coupling_default(self):
        cfg = SamplerConfig(step_size=0.04)
        assert cfg.resolved_noise_scale == pytest.approx(0.2)

    def test_noise_override(self):
        cfg = SamplerConfig(step_size=0.04, noise_scale=0.0)
        assert cfg.resolved_noise_scale == 0.0

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            SamplerConfig(step_size=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(n_steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(init_low=1.0, init_high=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(clamp_enabled=True, clamp_low=2.0, clamp_high=1.0)


class TestInitChain:
    def test_range_and_shape(self):
        cfg = SamplerConfig()
        x = init_chain(np.random.default_rng(0), (8, 8, 3), cfg)
        assert x.shape == (8, 8, 3)
        assert np.all(x >= 0.0) and np.all(x <= 1.0)

    def test_deterministic(self):
        cfg = SamplerConfig()
        a = init_chain(np.random.default_rng(5), (4, 4, 1), cfg)
        b = init_chain(np.random.default_rng(5), (4, 4, 1), cfg)
        np.testing.assert_array_equal(a, b)

    def test_uniform_mean(self):
        cfg = SamplerConfig()
        x = init_chain(np.random.default_rng(7), (1000, 1000, 1), cfg)
        assert abs(float(x.mean()) - 0.5) <= 0.002


class TestSgldStep:
    def test_constant_energy_identity(self):
        cfg = SamplerConfig(step_size=0.1, noise_scale=0.0, clamp_enabled=False)
        x = np.random.default_rng(0).uniform(0, 1, (4, 4, 1))
        out = sgld_step(ConstantEnergy(), x, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(out, x)

    def test_quadratic_closed_form(self):
        # E = ||x||^2 / 2 so one noise-free step scales x by 1 - step_size/2
        cfg = SamplerConfig(step_size=0.2, noise_scale=0.0, clamp_enabled=False)
        x = np.random.default_rng(0).normal(size=(3, 3, 2))
        out = sgld_step(QuadraticEnergy(), x, cfg, np.random.default_rng(1))
        np.testing.assert_allclose(out, 0.9 * x, rtol=1e-12)

    def test_clamped_to_range(self):
        cfg = SamplerConfig(step_size=4.0, clamp_enabled=True, clamp_low=0.0, clamp_high=1.0)
        x = np.full((2, 2, 1), 0.9)
        out = sgld_step(QuadraticEnergy(), x, cfg, np.random.default_rng(2))
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_langevin_stationary_moments_unit_gaussian(self):
        # time-average moments of a long chain on the quadratic energy
        cfg = SamplerConfig(step_size=0.15, clamp_enabled=False)
        rng = np.random.default_rng(2024)
        x = init_chain(rng, (4, 4, 1), cfg)
        model = QuadraticEnergy()
        n_steps = 100_000
        total = np.zeros_like(x)
        total_sq = np.zeros_like(x)
        for _ in range(n_steps):
            x = sgld_step(model, x, cfg, rng)
            total += x
            total_sq += x * x
        mean = total / n_steps
        var = total_sq / n_steps - mean ** 2
        assert float(np.abs(mean).max()) <= 0.05
        assert float(np.abs(var - 1.0).max()) <= 0.1


class TestSampleNegatives:
    def test_single_step_constant_energy_equals_init(self):
        cfg = SamplerConfig(step_size=0.1, noise_scale=0.0, n_steps=1, clamp_enabled=False)
        out = sample_negatives(ConstantEnergy(), 3, cfg, seed=11, shape=(4, 4, 1))
        expected = np.stack([init_chain(r, (4, 4, 1), cfg) for r in chain_rngs(11, 3)])
        np.testing.assert_array_equal(out, expected)

    def test_deterministic_across_runs(self):
        topo = topology_for_input(32, 1)
        params = init_params(topo, seed=4)
        cfg = SamplerConfig(step_size=0.01, n_steps=5)
        a = sample_negatives(params, 8, cfg, seed=123)
        b = sample_negatives(params, 8, cfg, seed=123)
        np.testing.assert_array_equal(a, b)

    def test_shape_inferred_from_topology(self):
        params = init_params(topology_for_input(32, 3), seed=0)
        cfg = SamplerConfig(n_steps=1)
        out = sample_negatives(params, 2, cfg, seed=0)
        assert out.shape == (2, 32, 32, 3)

    def test_clamp_bound_respected(self):
        params = init_params(topology_for_input(32, 1), seed=1)
        cfg = SamplerConfig(step_size=0.5, n_steps=3, clamp_enabled=True)
        out = sample_negatives(params, 4, cfg, seed=9)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_params_numerically_untouched(self):
        params = init_params(topology_for_input(32, 1), seed=2)
        before_w = [w.copy() for w in params.weights]
        before_b = [b.copy() for b in params.biases]
        cfg = SamplerConfig(n_steps=3)
        sample_negatives(params, 4, cfg, seed=3)
        for a, b in zip(before_w, params.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(before_b, params.biases):
            np.testing.assert_array_equal(a, b)

    def test_divergence_reports_step(self):
        cfg = SamplerConfig(step_size=1e9, noise_scale=0.0, n_steps=50, clamp_enabled=False)

        class BlowUp:
            def energy(self, x):
                return float(np.sum(np.asarray(x) ** 4))

            def batch_energy_and_grad(self, batch):
                batch = np.asarray(batch, dtype=float)
                with np.errstate(over="ignore"):  # overflow to inf is the point
                    e = np.sum(batch.reshape(batch.shape[0], -1) ** 4, axis=1)
                    return e, 4.0 * batch ** 3

        with pytest.raises(SamplingDivergedError) as err:
            sample_negatives(BlowUp(), 2, cfg, seed=0, shape=(4, 4, 1))
        assert err.value.step >= 0


class TestEnergyTrace:
    def test_constant_trace(self):
        cfg = SamplerConfig(step_size=0.1, noise_scale=0.0, n_steps=10, clamp_enabled=False)
        trace = energy_trace(ConstantEnergy(), cfg, seed=0, shape=(4, 4, 1))
        assert trace == [1.5] * 11

    def test_noise_free_quadratic_descends(self):
        cfg = SamplerConfig(step_size=0.2, noise_scale=0.0, n_steps=20, clamp_enabled=False)
        trace = energy_trace(QuadraticEnergy(), cfg, seed=1, shape=(4, 4, 1))
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_trace_length(self):
        cfg = SamplerConfig(n_steps=7)
        trace = energy_trace(QuadraticEnergy(), cfg, seed=2, shape=(2, 2, 1))
        assert len(trace) == 8

    def test_csv_export(self, tmp_path):
        cfg = SamplerConfig(n_steps=3)
        trace = energy_trace(QuadraticEnergy(), cfg, seed=4, shape=(2, 2, 1))
        out = tmp_path / "trace.csv"
        export_energy_trace_csv(trace, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "step,energy"
        assert len(lines) == 5
        assert float(lines[1].split(",")[1]) == trace[0]


class TestReplayBuffer:
    def test_capacity_bound(self):
        buf = ReplayBuffer(capacity=4, reinit_prob=0.0)
        buf.store(np.zeros((6, 2, 2, 1)))
        assert len(buf) == 4

    def test_draw_from_empty_inits_fresh(self):
        cfg = SamplerConfig()
        buf = ReplayBuffer(capacity=4, reinit_prob=0.0)
        x = buf.draw(np.random.default_rng(0), (2, 2, 1), cfg)
        assert x.shape == (2, 2, 1)

    def test_reused_states_flow_through_sampling(self):
        cfg = SamplerConfig(step_size=0.1, noise_scale=0.0, n_steps=1,
                            clamp_enabled=False, buffer_enabled=True,
                            buffer_reinit_prob=0.0)
        buf = ReplayBuffer(capacity=8, reinit_prob=0.0)
        seeded = np.full((1, 2, 2, 1), 0.5)
        buf.store(seeded)
        out = sample_negatives(ConstantEnergy(), 1, cfg, seed=0, shape=(2, 2, 1), buffer=buf)
        np.testing.assert_array_equal(out, seeded)  # zero gradient, zero noise
        assert len(buf) == 2  # final state stored back


def test_affine_model_step_matches_hand_value():
    # E = 2x + 0.5 so dE/dx = 2 and a noise-free step moves x by -step_size
    cfg = SamplerConfig(step_size=0.1, noise_scale=0.0, clamp_enabled=False)
    params = affine_params(weight=2.0, bias=0.5)
    x = np.array([[[0.7]]])
    out = sgld_step(params, x, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(out, np.array([[[0.6]]]), rtol=1e-12)
