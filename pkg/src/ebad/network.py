"""All-convolutional energy network with exact hand-derived gradients.

The network maps an image (h, w, c) to a single scalar energy through a fixed
stack of zero-padded convolutions (cross-correlation orientation, no kernel
flip) with ELU activations between layers. Reverse-mode gradients with respect
to both the input pixels and the parameters are derived by hand for this fixed
layer vocabulary; everything runs in float64.

Images are numpy arrays of shape (h, w, c); batches add a leading axis.
Weights are (f_out, f_in, kh, kw), biases (f_out,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

DTYPE = np.float64

ACTIVATIONS = ("elu", "none")
INIT_SCHEMES = ("lecun_uniform", "he_uniform")


def elu(x, alpha: float = 1.0):
    """ELU: x for x > 0, alpha*(e^x - 1) otherwise."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))
    return out if out.ndim else float(out)


def elu_grad(x, alpha: float = 1.0):
    """Derivative of elu; defined as 1 at x == 0 (right-limit convention)."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.where(x >= 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ConvLayerSpec:
    """One convolution layer: kernel (kh, kw), stride, zero padding, channels, activation."""

    kernel: tuple[int, int]
    stride: int
    padding: int
    f_in: int
    f_out: int
    activation: str

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or self.stride < 1:
            raise ValueError(f"kernel and stride must be >= 1, got {self.kernel}, {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.f_in < 1 or self.f_out < 1:
            raise ValueError(f"channel counts must be >= 1, got f_in={self.f_in}, f_out={self.f_out}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow

    def describe(self, index: int) -> str:
        kh, kw = self.kernel
        return (f"layer {index} ({kh}x{kw}/s{self.stride}/p{self.padding}/"
                f"{self.f_in}->{self.f_out})")


@dataclass(frozen=True)
class NetworkTopology:
    """Ordered convolution stack ending in a single-channel, activation-free layer."""

    layers: tuple[ConvLayerSpec, ...]
    elu_alpha: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("topology needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.elu_alpha <= 0:
            raise ValueError(f"elu_alpha must be > 0, got {self.elu_alpha}")
        for i in range(len(self.layers) - 1):
            a, b = self.layers[i], self.layers[i + 1]
            if a.f_out != b.f_in:
                raise ValueError(
                    f"{b.describe(i + 1)} expects f_in={b.f_in} but "
                    f"{a.describe(i)} produces f_out={a.f_out}")
        last = self.layers[-1]
        if last.f_out != 1 or last.activation != "none":
            raise ValueError("final layer must have f_out=1 and no activation")

    @property
    def input_channels(self) -> int:
        return self.layers[0].f_in

    @property
    def input_size(self) -> int:
        """Square input size that collapses to a 1x1 output (inverse layer walk)."""
        size = 1
        for layer in reversed(self.layers):
            size = (size - 1) * layer.stride + layer.kernel[0] - 2 * layer.padding
        return size

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_size, self.input_size, self.input_channels)

    def spatial_trace(self, input_size: int) -> list[int]:
        """Per-layer output sizes for a square input, starting with the input size."""
        trace = [input_size]
        h = w = input_size
        for layer in self.layers:
            h, w = layer.output_size(h, w)
            trace.append(h)
        return trace


def canonical_topology(channels: int = 3) -> NetworkTopology:
    """Default topology for 128x128 inputs (reduces 128 -> ... -> 1 spatially)."""
    return _topology(channels, squeeze_layers=2)


def topology_for_input(input_size: int, channels: int = 3) -> NetworkTopology:
    """Topology variant matched to a square input size of 128, 64 or 32.

    Smaller inputs drop trailing stride-2 256->256 layers from the canonical
    stack (one per halving) so the final layer still sees a 4x4 grid.
    """
    drops = {128: 0, 64: 1, 32: 2}
    if input_size not in drops:
        raise ValueError(f"supported input sizes are 128, 64, 32; got {input_size}")
    return _topology(channels, squeeze_layers=2 - drops[input_size])


def _topology(channels: int, squeeze_layers: int) -> NetworkTopology:
    if channels not in (1, 3):
        raise ValueError(f"input channel count must be 1 or 3, got {channels}")
    layers = [
        ConvLayerSpec((3, 3), 1, 1, channels, 32, "elu"),
        ConvLayerSpec((4, 4), 2, 1, 32, 64, "elu"),
        ConvLayerSpec((4, 4), 2, 1, 64, 128, "elu"),
        ConvLayerSpec((4, 4), 2, 1, 128, 256, "elu"),
    ]
    for _ in range(squeeze_layers):
        layers.append(ConvLayerSpec((4, 4), 2, 1, 256, 256, "elu"))
    layers.append(ConvLayerSpec((4, 4), 1, 0, 256, 1, "none"))
    return NetworkTopology(tuple(layers))


@dataclass
class ModelParams:
    """Weights and biases for every layer of a topology."""

    topology: NetworkTopology
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.topology.layers) or len(self.biases) != len(self.topology.layers):
            raise ShapeMismatchError("one weight and bias array per layer required")
        for i, layer in enumerate(self.topology.layers):
            kh, kw = layer.kernel
            want_w = (layer.f_out, layer.f_in, kh, kw)
            if self.weights[i].shape != want_w:
                raise ShapeMismatchError(
                    f"{layer.describe(i)}: weight shape {self.weights[i].shape} != {want_w}")
            if self.biases[i].shape != (layer.f_out,):
                raise ShapeMismatchError(
                    f"{layer.describe(i)}: bias shape {self.biases[i].shape} != {(layer.f_out,)}")
        self.weights = [np.ascontiguousarray(w, dtype=DTYPE) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=DTYPE) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NonFiniteError(f"{self.topology.layers[i].describe(i)}: non-finite parameter")

    def copy(self) -> "ModelParams":
        return ModelParams(self.topology,
                           [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])


@dataclass
class ParamGradients:
    """Gradient arrays shaped exactly like ModelParams weights/biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def norm(self) -> float:
        total = 0.0
        for a in self.weights + self.biases:
            total += float(np.sum(a * a))
        return float(np.sqrt(total))


def init_params(topology: NetworkTopology, seed: int, scheme: str = "lecun_uniform") -> ModelParams:
    """Seeded parameter init: fan-in-scaled uniform weights, zero biases.

    lecun_uniform draws U(-sqrt(3/fan_in), sqrt(3/fan_in)) (variance 1/fan_in);
    he_uniform uses twice that variance. Deterministic for a given seed.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}, expected one of {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in topology.layers:
        kh, kw = layer.kernel
        fan_in = layer.f_in * kh * kw
        target_var = init_weight_variance(scheme, fan_in)
        limit = np.sqrt(3.0 * target_var)
        weights.append(rng.uniform(-limit, limit, size=(layer.f_out, layer.f_in, kh, kw)).astype(DTYPE))
        biases.append(np.zeros(layer.f_out, dtype=DTYPE))
    return ModelParams(topology, weights, biases)


def init_weight_variance(scheme: str, fan_in: int) -> float:
    """Variance targeted by an init scheme for a layer with the given fan-in."""
    if scheme == "lecun_uniform":
        return 1.0 / fan_in
    if scheme == "he_uniform":
        return 2.0 / fan_in
    raise ValueError(f"unknown init scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Convolution core. All routines take batched (B, h, w, c) arrays. The forward
# gathers kernel windows into an im2col matrix and runs one GEMM per layer;
# the input gradient pushes the GEMM result back through the exact adjoint of
# the gather (one strided slice-add per kernel offset).
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _out_size(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[int, int]:
    return (xp.shape[1] - kh) // stride + 1, (xp.shape[2] - kw) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """All kernel windows of a padded batch as a (B*oh*ow, kh*kw*c) matrix."""
    n, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, kh * kw * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(f_out, f_in, kh, kw) kernel as a (kh*kw*f_in, f_out) GEMM operand."""
    f_out, f_in, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * f_in, f_out)


def _conv2d(xp: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlate an already-padded batch xp with w and add the bias."""
    f_out, _, kh, kw = w.shape
    oh, ow = _out_size(xp, kh, kw, stride)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = (cols @ _kernel_matrix(w)).reshape(xp.shape[0], oh, ow, f_out)
    out += b
    return out


def _conv2d_input_grad(dout: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int,
                       padding: int) -> np.ndarray:
    n, h, wd, c = x_shape
    f_out, _, kh, kw = w.shape
    oh, ow = dout.shape[1], dout.shape[2]
    dwin = (dout.reshape(n * oh * ow, f_out) @ _kernel_matrix(w).T)
    dwin = dwin.reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dwin[:, :, :, i, j, :]
    if padding:
        return dxp[:, padding:padding + h, padding:padding + wd, :]
    return dxp


def _conv2d_param_grad(dout: np.ndarray, xp: np.ndarray, kernel: tuple[int, int],
                       stride: int) -> tuple[np.ndarray, np.ndarray]:
    kh, kw = kernel
    n, oh, ow, f_out = dout.shape
    f_in = xp.shape[3]
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    dw2 = cols.T @ dout.reshape(n * oh * ow, f_out)
    dw = dw2.reshape(kh, kw, f_in, f_out).transpose(3, 2, 0, 1)
    db = dout.sum(axis=(0, 1, 2))
    return np.ascontiguousarray(dw), db


def _check_image_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 4:
        raise ShapeMismatchError(f"expected batch of (h, w, c) images, got shape {batch.shape}")
    if not np.isfinite(batch).all():
        raise NonFiniteError("input image contains NaN or Inf")
    topo = params.topology
    if batch.shape[3] != topo.input_channels:
        raise ShapeMismatchError(
            f"{topo.layers[0].describe(0)}: input has {batch.shape[3]} channels, "
            f"expected {topo.input_channels}")
    h, w = batch.shape[1], batch.shape[2]
    for i, layer in enumerate(topo.layers):
        oh, ow = layer.output_size(h, w)
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(
                f"{layer.describe(i)}: spatial input {h}x{w} collapses below 1x1")
        h, w = oh, ow
    if (h, w) != (1, 1):
        last = len(topo.layers) - 1
        raise ShapeMismatchError(
            f"{topo.layers[last].describe(last)}: final spatial size is {h}x{w}, expected 1x1")
    return batch


def _forward(params: ModelParams, batch: np.ndarray, keep_cache: bool):
    """Run the stack; returns per-image energies and per-layer (padded input, pre-activation)."""
    topo = params.topology
    x = batch
    cache = [] if keep_cache else None
    for i, layer in enumerate(topo.layers):
        xp = _pad(x, layer.padding)
        z = _conv2d(xp, params.weights[i], params.biases[i], layer.stride)
        if keep_cache:
            cache.append((xp, z))
        x = elu(z, topo.elu_alpha) if layer.activation == "elu" else z
    energies = x.reshape(x.shape[0])
    return energies, cache


def _backward_to_input(params: ModelParams, cache, dout: np.ndarray) -> np.ndarray:
    """Propagate d(sum of weighted energies)/d(output) back to the input pixels."""
    topo = params.topology
    for i in range(len(topo.layers) - 1, -1, -1):
        layer = topo.layers[i]
        xp, z = cache[i]
        if layer.activation == "elu":
            dout = dout * elu_grad(z, topo.elu_alpha)
        p = layer.padding
        x_shape = (xp.shape[0], xp.shape[1] - 2 * p, xp.shape[2] - 2 * p, layer.f_in)
        dout = _conv2d_input_grad(dout, params.weights[i], x_shape, layer.stride, p)
    return dout


def _backward_to_params(params: ModelParams, cache, dout: np.ndarray) -> ParamGradients:
    topo = params.topology
    dws = [None] * len(topo.layers)
    dbs = [None] * len(topo.layers)
    for i in range(len(topo.layers) - 1, -1, -1):
        layer = topo.layers[i]
        xp, z = cache[i]
        if layer.activation == "elu":
            dout = dout * elu_grad(z, topo.elu_alpha)
        dws[i], dbs[i] = _conv2d_param_grad(dout, xp, layer.kernel, layer.stride)
        if i > 0:
            p = layer.padding
            x_shape = (xp.shape[0], xp.shape[1] - 2 * p, xp.shape[2] - 2 * p, layer.f_in)
            dout = _conv2d_input_grad(dout, params.weights[i], x_shape, layer.stride, p)
    return ParamGradients(dws, dbs)


def _seed_dout(batch_size: int, coeffs: np.ndarray) -> np.ndarray:
    return coeffs.reshape(batch_size, 1, 1, 1).astype(DTYPE)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def forward_energy(params: ModelParams, image: np.ndarray) -> float:
    """Scalar energy of one image. Pure and deterministic."""
    batch = _check_image_batch(params, np.asarray(image, dtype=DTYPE)[None])
    energies, _ = _forward(params, batch, keep_cache=False)
    e = float(energies[0])
    if not np.isfinite(e):
        raise NonFiniteError(f"energy evaluated to {e}")
    return e


def batch_energies(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Energies of a batch (B, h, w, c) -> (B,)."""
    batch = _check_image_batch(params, images)
    energies, _ = _forward(params, batch, keep_cache=False)
    if not np.isfinite(energies).all():
        raise NonFiniteError("energy evaluated to a non-finite value")
    return energies


def input_gradient(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """dE/dx for one image, same shape as the image."""
    energies, grads = batch_input_gradients(params, np.asarray(image, dtype=DTYPE)[None])
    return grads[0]


def batch_input_gradients(params: ModelParams, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Energies and per-image dE/dx for a batch; grads share the batch's shape."""
    batch = _check_image_batch(params, images)
    energies, cache = _forward(params, batch, keep_cache=True)
    if not np.isfinite(energies).all():
        raise NonFiniteError("energy evaluated to a non-finite value")
    dout = _seed_dout(batch.shape[0], np.ones(batch.shape[0]))
    grads = _backward_to_input(params, cache, dout)
    if not np.isfinite(grads).all():
        raise NonFiniteError("input gradient contains NaN or Inf")
    return energies, grads


def param_gradient(params: ModelParams, batch) -> ParamGradients:
    """Gradient of the batch-mean energy (1/B) sum_b E(x_b) w.r.t. all parameters."""
    images = _stack_batch(batch)
    n = images.shape[0]
    grads, _ = weighted_param_gradient(params, images, np.full(n, 1.0 / n))
    return grads


def weighted_param_gradient(params: ModelParams, batch,
                            coeffs: np.ndarray) -> tuple[ParamGradients, np.ndarray]:
    """Gradient of sum_b coeffs[b] * E(x_b) w.r.t. parameters, plus the energies."""
    images = _check_image_batch(params, _stack_batch(batch))
    coeffs = np.asarray(coeffs, dtype=DTYPE)
    if coeffs.shape != (images.shape[0],):
        raise ShapeMismatchError(f"need one coefficient per image, got {coeffs.shape}")
    energies, cache = _forward(params, images, keep_cache=True)
    grads = _backward_to_params(params, cache, _seed_dout(images.shape[0], coeffs))
    for a in grads.weights + grads.biases:
        if not np.isfinite(a).all():
            raise NonFiniteError("parameter gradient contains NaN or Inf")
    return grads, energies


def _stack_batch(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.ndim == 4:
        images = batch
    else:
        items = list(batch)
        if not items:
            raise ShapeMismatchError("batch is empty")
        if any(np.shape(x) != np.shape(items[0]) for x in items):
            raise ShapeMismatchError("batch images must share one shape")
        images = np.stack([np.asarray(x, dtype=DTYPE) for x in items])
    if images.shape[0] == 0:
        raise ShapeMismatchError("batch is empty")
    return images


class NetworkEnergy:
    """Bundles params into the energy-model interface the sampler consumes."""

    def __init__(self, params: ModelParams):
        self.params = params

    def energy(self, x: np.ndarray) -> float:
        return forward_energy(self.params, x)

    def batch_energy_and_grad(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return batch_input_gradients(self.params, batch)
