"""Contrastive-divergence training of the energy network on normal images only.

Each iteration draws a batch of training images (positives), synthesizes an
equally sized batch of SGLD negatives, and descends the objective

    L = mean E(pos) - mean E(neg)  [+ reg_weight * (mean E(pos)^2 + mean E(neg)^2)]

which raises model density on data and lowers it on the sampler's negatives.
The dataset input carries images only; no labels or masks ever reach this
module.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_save_checkpoint
from .errors import EbadError, ShapeMismatchError
from .network import (
    DTYPE,
    ModelParams,
    NetworkTopology,
    ParamGradients,
    init_params,
    weighted_param_gradient,
    _stack_batch,
)
from .sampler import ReplayBuffer, SamplerConfig, sample_negatives

OPTIMIZERS = ("adam", "sgd")


class TrainingDivergedError(EbadError):
    """Mean batch energy blew past the divergence guard."""

    def __init__(self, message: str, iteration: int, pos_energy: float, neg_energy: float):
        super().__init__(message)
        self.iteration = iteration
        self.pos_energy = pos_energy
        self.neg_energy = neg_energy


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 4
    seed: int = 0
    energy_reg_weight: float = 0.0
    checkpoint_every: int = 0  # iterations between checkpoints; 0 = none
    divergence_guard: float = 1e6
    init_scheme: str = "lecun_uniform"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")


@dataclass
class IterationRecord:
    iteration: int
    pos_energy: float
    neg_energy: float
    gap: float  # neg - pos; positive once CD separates data from noise
    grad_norm: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "pos_energy", "neg_energy", "gap", "grad_norm", "seconds"])
            for r in self.records:
                writer.writerow([r.iteration, repr(r.pos_energy), repr(r.neg_energy),
                                 repr(r.gap), repr(r.grad_norm), repr(r.seconds)])


def cd_gradient(params: ModelParams, pos_batch, neg_batch,
                reg_weight: float = 0.0) -> ParamGradients:
    """Parameter gradient of the CD objective for one positive/negative pair."""
    grads, _, _ = _cd_gradient_with_energies(params, pos_batch, neg_batch, reg_weight)
    return grads


def _side_gradient(params, batch, reg_weight, reg_sign):
    """Gradient of mean E + reg_sign * reg_weight * mean(E^2) over one batch."""
    n = batch.shape[0]
    base = np.full(n, 1.0 / n)
    if reg_weight:
        # the reg term needs the energies before the backward pass
        from .network import batch_energies
        energies = batch_energies(params, batch)
        coeffs = base + reg_sign * 2.0 * reg_weight * energies / n
        grads, _ = weighted_param_gradient(params, batch, coeffs)
    else:
        grads, energies = weighted_param_gradient(params, batch, base)
    return grads, float(energies.mean())


def _cd_gradient_with_energies(params, pos_batch, neg_batch, reg_weight):
    pos = _stack_batch(pos_batch)
    neg = _stack_batch(neg_batch)
    if pos.shape[1:] != neg.shape[1:]:
        raise ShapeMismatchError(
            f"positive images {pos.shape[1:]} and negatives {neg.shape[1:]} differ")
    # sides are computed separately and subtracted so identical batches cancel
    # bitwise; the neg side carries its reg contribution with flipped sign so
    # the subtraction restores +reg for both branches
    pos_grads, pos_mean = _side_gradient(params, pos, reg_weight, reg_sign=+1.0)
    neg_grads, neg_mean = _side_gradient(params, neg, reg_weight, reg_sign=-1.0)
    grads = ParamGradients(
        [a - b for a, b in zip(pos_grads.weights, neg_grads.weights)],
        [a - b for a, b in zip(pos_grads.biases, neg_grads.biases)])
    return grads, pos_mean, neg_mean


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: list[np.ndarray] | None = None  # first moments (adam)
    v: list[np.ndarray] | None = None  # second moments (adam)


def init_optimizer(config: TrainConfig, params: ModelParams) -> OptimizerState:
    if config.optimizer == "sgd":
        return OptimizerState(kind="sgd")
    arrays = params.weights + params.biases
    return OptimizerState(kind="adam",
                          m=[np.zeros_like(a) for a in arrays],
                          v=[np.zeros_like(a) for a in arrays])


def optimizer_step(params: ModelParams, grads: ParamGradients, state: OptimizerState,
                   config: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """One update; returns fresh params, leaving the inputs untouched."""
    lr = config.learning_rate
    arrays = params.weights + params.biases
    garrays = grads.weights + grads.biases
    out: list[np.ndarray] = []
    if state.kind == "sgd":
        for a, g in zip(arrays, garrays):
            out.append(a - lr * g)
        new_state = OptimizerState(kind="sgd", step=state.step + 1)
    else:
        t = state.step + 1
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        new_m, new_v = [], []
        for a, g, m, v in zip(arrays, garrays, state.m, state.v):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            out.append(a - lr * m_hat / (np.sqrt(v_hat) + eps))
            new_m.append(m)
            new_v.append(v)
        new_state = OptimizerState(kind="adam", step=t, m=new_m, v=new_v)
    n_w = len(params.weights)
    new_params = ModelParams(params.topology, out[:n_w], out[n_w:])
    return new_params, new_state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def fit(dataset, topology: NetworkTopology, config: TrainConfig,
        checkpoint_dir=None, log=None) -> tuple[ModelParams, TrainHistory]:
    """Train on normal images; deterministic for a fixed config.seed.

    dataset is a list of (h, w, c) images or one (N, h, w, c) array. Emits a
    checkpoint every config.checkpoint_every iterations into checkpoint_dir
    when that cadence is set.
    """
    images = _stack_batch(dataset).astype(DTYPE)
    if config.checkpoint_every > 0 and checkpoint_dir is None:
        raise ValueError("checkpoint_every is set but no checkpoint_dir given")

    root = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, sampler_ss = root.spawn(3)
    params = init_params(topology, seed=int(init_ss.generate_state(1)[0]),
                         scheme=config.init_scheme)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    state = init_optimizer(config, params)
    buffer = None
    if config.sampler.buffer_enabled:
        buffer = ReplayBuffer(config.sampler.buffer_capacity,
                              config.sampler.buffer_reinit_prob)

    history = TrainHistory()
    iteration = 0
    n = images.shape[0]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            pos = images[order[start:start + config.batch_size]]
            t0 = time.perf_counter()
            neg = sample_negatives(params, pos.shape[0], config.sampler,
                                   seed=sampler_ss.spawn(1)[0], buffer=buffer)
            grads, pos_mean, neg_mean = _cd_gradient_with_energies(
                params, pos, neg, config.energy_reg_weight)
            if (abs(pos_mean) > config.divergence_guard
                    or abs(neg_mean) > config.divergence_guard):
                raise TrainingDivergedError(
                    f"iteration {iteration}: mean energy exceeded guard "
                    f"{config.divergence_guard:g} (pos {pos_mean:g}, neg {neg_mean:g})",
                    iteration=iteration, pos_energy=pos_mean, neg_energy=neg_mean)
            params, state = optimizer_step(params, grads, state, config)
            seconds = time.perf_counter() - t0
            history.append(IterationRecord(
                iteration=iteration, pos_energy=pos_mean, neg_energy=neg_mean,
                gap=neg_mean - pos_mean, grad_norm=grads.norm(), seconds=seconds))
            if log is not None:
                log(history.records[-1])
            iteration += 1
            if config.checkpoint_every > 0 and iteration % config.checkpoint_every == 0:
                atomic_save_checkpoint(
                    Path(checkpoint_dir) / f"checkpoint_{iteration:06d}.ebm", params)
    return params, history
