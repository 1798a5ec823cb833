"""Short-run SGLD chains that synthesize negative samples for training.

Chains start from uniform noise and take a fixed number of Langevin steps

    x' = x - (step_size / 2) * dE/dx + noise_scale * eps,   eps ~ N(0, I)

with optional element-wise clamping to the data range. Gradients are taken
with respect to the sample only; no parameter-gradient state is created or
kept anywhere in this module.

Each chain owns an RNG stream spawned from the master seed (stream index =
chain index), so serial and parallel chain advancement produce bit-identical
batches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EbadError, NonFiniteError
from .network import DTYPE, ModelParams, NetworkEnergy


class SamplingDivergedError(EbadError):
    """A chain produced a non-finite gradient or energy."""

    def __init__(self, message: str, step: int, chain: int | None = None,
                 energy: float | None = None):
        super().__init__(message)
        self.step = step
        self.chain = chain
        self.energy = energy


@dataclass(frozen=True)
class SamplerConfig:
    """SGLD knobs. noise_scale None means the classical coupling sqrt(step_size)."""

    step_size: float = 0.01
    noise_scale: float | None = None
    n_steps: int = 100
    init_low: float = 0.0
    init_high: float = 1.0
    clamp_enabled: bool = True
    clamp_low: float = 0.0
    clamp_high: float = 1.0
    buffer_enabled: bool = False
    buffer_capacity: int = 1024
    buffer_reinit_prob: float = 0.05

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.init_low < self.init_high:
            raise ValueError("init_low must be < init_high")
        if self.clamp_enabled and not self.clamp_low < self.clamp_high:
            raise ValueError("clamp_low must be < clamp_high")
        if not 0.0 <= self.buffer_reinit_prob <= 1.0:
            raise ValueError("buffer_reinit_prob must be in [0, 1]")

    @property
    def resolved_noise_scale(self) -> float:
        if self.noise_scale is None:
            return float(np.sqrt(self.step_size))
        return float(self.noise_scale)


class QuadraticEnergy:
    """E(x) = 0.5 * ||x||^2; analytic test energy whose SGLD stationary law is N(0, I)."""

    def energy(self, x) -> float:
        x = np.asarray(x, dtype=DTYPE)
        return float(0.5 * np.sum(x * x))

    def batch_energy_and_grad(self, batch):
        batch = np.asarray(batch, dtype=DTYPE)
        energies = 0.5 * np.sum(batch.reshape(batch.shape[0], -1) ** 2, axis=1)
        return energies, batch.copy()


def _as_model(model):
    if isinstance(model, ModelParams):
        return NetworkEnergy(model)
    return model


def chain_rngs(seed, batch_size: int) -> list[np.random.Generator]:
    """Independent per-chain generators spawned from one master seed."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(ss) for ss in root.spawn(batch_size)]


def init_chain(rng: np.random.Generator, shape, config: SamplerConfig) -> np.ndarray:
    """I.i.d. uniform start on [init_low, init_high)."""
    return rng.uniform(config.init_low, config.init_high, size=shape).astype(DTYPE)


def sgld_step(model, x: np.ndarray, config: SamplerConfig, rng: np.random.Generator,
              step_index: int = 0) -> np.ndarray:
    """One Langevin update of a single sample. model may be ModelParams or any
    object with batch_energy_and_grad."""
    model = _as_model(model)
    x = np.asarray(x, dtype=DTYPE)
    try:
        energies, grads = model.batch_energy_and_grad(x[None])
    except NonFiniteError as exc:
        raise SamplingDivergedError(
            f"non-finite gradient at step {step_index}: {exc}", step=step_index) from exc
    return _apply_update(x, grads[0], float(energies[0]), config, rng, step_index)


def _apply_update(x, grad, energy, config: SamplerConfig, rng, step_index: int) -> np.ndarray:
    if not np.isfinite(grad).all() or not np.isfinite(energy):
        raise SamplingDivergedError(
            f"non-finite gradient at step {step_index} (energy {energy})",
            step=step_index, energy=energy)
    noise = config.resolved_noise_scale
    out = x - 0.5 * config.step_size * grad
    if noise:
        out += noise * rng.standard_normal(size=x.shape)
    if config.clamp_enabled:
        np.clip(out, config.clamp_low, config.clamp_high, out=out)
    return out


def _infer_shape(model) -> tuple[int, int, int]:
    params = model.params if isinstance(model, NetworkEnergy) else model
    return params.topology.input_shape


def sample_negatives(model, batch_size: int, config: SamplerConfig, seed,
                     shape=None, buffer=None) -> np.ndarray:
    """Advance batch_size fresh (or replayed) chains n_steps; returns (B, h, w, c).

    Deterministic for a given seed. With the replay buffer enabled, each chain
    restarts from uniform noise with probability buffer_reinit_prob and
    otherwise continues a stored chain; final states are stored back.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    model = _as_model(model)
    if shape is None:
        shape = _infer_shape(model)
    rngs = chain_rngs(seed, batch_size)
    use_buffer = config.buffer_enabled and buffer is not None
    if use_buffer:
        xs = np.stack([buffer.draw(rngs[c], shape, config) for c in range(batch_size)])
    else:
        xs = np.stack([init_chain(rngs[c], shape, config) for c in range(batch_size)])
    for step in range(config.n_steps):
        try:
            energies, grads = model.batch_energy_and_grad(xs)
        except NonFiniteError as exc:
            raise SamplingDivergedError(
                f"non-finite gradient at step {step}: {exc}", step=step) from exc
        nxt = np.empty_like(xs)
        for c in range(batch_size):
            try:
                nxt[c] = _apply_update(xs[c], grads[c], float(energies[c]), config,
                                       rngs[c], step)
            except SamplingDivergedError as exc:
                raise SamplingDivergedError(
                    f"chain {c}: {exc}", step=step, chain=c, energy=exc.energy) from exc
        xs = nxt
    if use_buffer:
        buffer.store(xs)
    return xs


def energy_trace(model, config: SamplerConfig, seed, shape=None) -> list[float]:
    """Per-step energies of a single chain, including the initial state."""
    model = _as_model(model)
    if shape is None:
        shape = _infer_shape(model)
    rng = chain_rngs(seed, 1)[0]
    x = init_chain(rng, shape, config)
    trace = [model.energy(x)]
    for step in range(config.n_steps):
        x = sgld_step(model, x, config, rng, step_index=step)
        trace.append(model.energy(x))
    return trace


def export_energy_trace_csv(trace: list[float], path) -> None:
    """Write a trace as step,energy rows (step 0 is the initial state)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "energy"])
        for step, energy in enumerate(trace):
            writer.writerow([step, repr(float(energy))])


class ReplayBuffer:
    """FIFO store of past chain states (optional feature, default off)."""

    def __init__(self, capacity: int, reinit_prob: float = 0.05):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.reinit_prob = reinit_prob
        self._samples: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._samples)

    def draw(self, rng: np.random.Generator, shape, config: SamplerConfig) -> np.ndarray:
        if not self._samples or rng.uniform() < self.reinit_prob:
            return init_chain(rng, shape, config)
        idx = int(rng.integers(len(self._samples)))
        return self._samples[idx].copy()

    def store(self, batch: np.ndarray) -> None:
        for x in batch:
            self._samples.append(np.array(x, dtype=DTYPE))
        if len(self._samples) > self.capacity:
            del self._samples[:len(self._samples) - self.capacity]
