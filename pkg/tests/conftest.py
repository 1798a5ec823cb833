"""Shared test oracles: naive convolution, finite differences, random small nets.

The oracles here are deliberately independent of the package internals --
nested loops and scalar arithmetic only -- so they can certify the fast paths.
"""

import numpy as np
import pytest

from ebad.network import ConvLayerSpec, ModelParams, NetworkTopology, init_params


def naive_conv(x, w, b, stride, padding):
    """Direct cross-correlation with zero padding, scalar loops everywhere."""
    h, wd, f_in = x.shape
    f_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((h + 2 * padding, wd + 2 * padding, f_in))
    xp[padding:padding + h, padding:padding + wd, :] = x
    out = np.zeros((oh, ow, f_out))
    for oi in range(oh):
        for oj in range(ow):
            for oc in range(f_out):
                acc = b[oc]
                for ki in range(kh):
                    for kj in range(kw):
                        for c in range(f_in):
                            acc += xp[oi * stride + ki, oj * stride + kj, c] * w[oc, c, ki, kj]
                out[oi, oj, oc] = acc
    return out


def naive_forward_energy(params, image):
    """Whole-network energy via naive_conv and scalar ELU."""
    x = np.asarray(image, dtype=float)
    for layer, w, b in zip(params.topology.layers, params.weights, params.biases):
        x = naive_conv(x, w, b, layer.stride, layer.padding)
        if layer.activation == "elu":
            a = params.topology.elu_alpha
            x = np.where(x > 0, x, a * (np.exp(x) - 1.0))
    assert x.shape == (1, 1, 1)
    return float(x[0, 0, 0])


def central_difference(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_small_topology(rng, channels=None):
    """Random valid topology whose final layer collapses a small input to 1x1."""
    channels = channels or int(rng.integers(1, 4))
    size = int(rng.integers(5, 10))
    layers = []
    f_in = channels
    cur = size
    for _ in range(int(rng.integers(1, 3))):
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        out = (cur + 2 * padding - k) // stride + 1
        if out < 2:
            continue
        f_out = int(rng.integers(1, 5))
        layers.append(ConvLayerSpec((k, k), stride, padding, f_in, f_out, "elu"))
        f_in, cur = f_out, out
    layers.append(ConvLayerSpec((cur, cur), 1, 0, f_in, 1, "none"))
    return NetworkTopology(tuple(layers)), size


def random_net(seed):
    """(params, image) pair on a random small topology, non-degenerate scale."""
    rng = np.random.default_rng(seed)
    topology, size = random_small_topology(rng)
    params = init_params(topology, seed=int(rng.integers(0, 2**31)))
    # widen weights so gradients are far from zero relative to fd noise
    for w in params.weights:
        w *= 3.0
    for b in params.biases:
        b += rng.normal(0.0, 0.3, size=b.shape)
    image = rng.uniform(-1.0, 1.0, size=(size, size, topology.input_channels))
    return params, image


def affine_params(weight=2.0, bias=0.5):
    """Single 1x1-kernel layer with no activation: E(x) = weight*x + bias."""
    topo = NetworkTopology((ConvLayerSpec((1, 1), 1, 0, 1, 1, "none"),))
    return ModelParams(topo, [np.full((1, 1, 1, 1), weight)], [np.full(1, bias)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
