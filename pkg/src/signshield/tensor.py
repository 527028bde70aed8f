"""Small differentiable network engine.

Networks are plain sequences of :class:`LayerSpec` plus a dict of weight
arrays. Activations use channel-last layout, ``(N, H, W, C)`` for images
and ``(N, F)`` after flattening. Everything is computed in the dtype of
the weights (float32 for trained models); passing float64 weights gives
a float64 network, which the finite-difference oracle relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputShapeError, LabelError, ParameterError

LAYER_KINDS = ("conv2d", "maxpool2d", "relu", "flatten", "dense", "residual_add")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``units`` is the output channel count (conv) or width (dense).

    For ``residual_add`` the output of layer ``source`` is added to the
    incoming activation; ``source=-1`` refers to the network input.
    """

    kind: str
    name: str = ""
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    units: int = 0
    source: int = -1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "maxpool2d"):
            if self.kernel < 1:
                raise ParameterError(f"{self.kind} kernel extent must be >= 1, got {self.kernel}")
            if self.stride < 1:
                raise ParameterError(f"{self.kind} stride must be >= 1, got {self.stride}")
        if self.kind in ("conv2d", "dense") and self.units < 1:
            raise ParameterError(f"{self.kind} needs units >= 1")


def conv(name, units, kernel=3, stride=1, padding=None):
    if padding is None:
        padding = kernel // 2
    return LayerSpec("conv2d", name=name, kernel=kernel, stride=stride, padding=padding, units=units)


def maxpool(kernel=2, stride=None):
    return LayerSpec("maxpool2d", kernel=kernel, stride=stride or kernel)


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def dense(name, units):
    return LayerSpec("dense", name=name, units=units)


def residual_add(source):
    return LayerSpec("residual_add", source=source)


def infer_shapes(layers: Sequence[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Per-layer output shapes (without batch axis). Raises on inconsistent chaining."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        cur = shapes[-1]
        if layer.kind == "conv2d":
            if len(cur) != 3:
                raise InputShapeError(f"layer {i} (conv2d) expects H x W x C input, got {cur}")
            h, w, _ = cur
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise InputShapeError(f"layer {i} (conv2d) output would be empty for input {cur}")
            out = (ho, wo, layer.units)
        elif layer.kind == "maxpool2d":
            if len(cur) != 3:
                raise InputShapeError(f"layer {i} (maxpool2d) expects H x W x C input, got {cur}")
            h, w, c = cur
            ho = (h - layer.kernel) // layer.stride + 1
            wo = (w - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise InputShapeError(f"layer {i} (maxpool2d) output would be empty for input {cur}")
            out = (ho, wo, c)
        elif layer.kind == "relu":
            out = cur
        elif layer.kind == "flatten":
            out = (int(np.prod(cur)),)
        elif layer.kind == "dense":
            if len(cur) != 1:
                raise InputShapeError(f"layer {i} (dense) expects a flat input, got {cur}")
            out = (layer.units,)
        else:  # residual_add
            if not -1 <= layer.source < i:
                raise InputShapeError(f"layer {i} residual source {layer.source} is not an earlier layer")
            skip = shapes[layer.source + 1]
            if skip != cur:
                raise InputShapeError(f"layer {i} residual shapes differ: {skip} vs {cur}")
            out = cur
        shapes.append(out)
    return shapes


def param_shapes(layers: Sequence[LayerSpec], input_shape: tuple) -> dict[str, tuple]:
    shapes = infer_shapes(layers, input_shape)
    out = {}
    for layer, cur in zip(layers, shapes):
        if layer.kind == "conv2d":
            out[layer.name + ".w"] = (layer.kernel, layer.kernel, cur[2], layer.units)
            out[layer.name + ".b"] = (layer.units,)
        elif layer.kind == "dense":
            out[layer.name + ".w"] = (cur[0], layer.units)
            out[layer.name + ".b"] = (layer.units,)
    return out


@dataclass
class Network:
    input_shape: tuple
    layers: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = tuple(self.layers)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        expected = param_shapes(self.layers, self.input_shape)
        for key, shape in expected.items():
            if key in self.params and tuple(self.params[key].shape) != shape:
                raise InputShapeError(f"parameter {key} has shape {self.params[key].shape}, expected {shape}")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def dtype(self):
        for v in self.params.values():
            return v.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Network":
        return Network(self.input_shape, self.layers, {k: v.astype(dtype) for k, v in self.params.items()})


@dataclass
class LossGradient:
    loss: float
    grad_input: np.ndarray


def glorot_init(layers, input_shape, rng: np.random.Generator, dtype=np.float32) -> dict:
    params = {}
    for key, shape in param_shapes(layers, input_shape).items():
        if key.endswith(".b"):
            params[key] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            receptive = shape[0] * shape[1]
            fan_in, fan_out = receptive * shape[2], receptive * shape[3]
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[key] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


# -- layer kernels -----------------------------------------------------------


def _im2col(x, k, s, p):
    n, h, w, c = x.shape
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def _col2im(dcols, x_shape, k, s, p, ho, wo):
    n, h, w, c = x_shape
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    if p:
        dx = dx[:, p:-p, p:-p, :]
    return dx


def _pool_windows(x, k, s):
    n, h, w, c = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    # last axis enumerates the window in row-major scan order
    win = np.stack(
        [x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] for i in range(k) for j in range(k)],
        axis=-1,
    )
    return win, ho, wo


def _forward_cached(net: Network, x: np.ndarray):
    acts = [x]
    caches = []
    for layer in net.layers:
        a = acts[-1]
        if layer.kind == "conv2d":
            wt = net.params[layer.name + ".w"]
            cols, ho, wo = _im2col(a, layer.kernel, layer.stride, layer.padding)
            out = cols @ wt.reshape(-1, wt.shape[-1]) + net.params[layer.name + ".b"]
            out = out.reshape(a.shape[0], ho, wo, wt.shape[-1])
            caches.append((cols, ho, wo))
        elif layer.kind == "maxpool2d":
            win, ho, wo = _pool_windows(a, layer.kernel, layer.stride)
            idx = np.argmax(win, axis=-1)  # first maximum on ties
            out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            caches.append((idx, ho, wo))
        elif layer.kind == "relu":
            out = np.maximum(a, 0)
            caches.append(None)
        elif layer.kind == "flatten":
            out = a.reshape(a.shape[0], -1)
            caches.append(None)
        elif layer.kind == "dense":
            out = a @ net.params[layer.name + ".w"] + net.params[layer.name + ".b"]
            caches.append(None)
        else:
            out = a + acts[layer.source + 1]
            caches.append(None)
        acts.append(out)
    return acts, caches


def _backward(net: Network, acts, caches, dout, want_params: bool):
    n_layers = len(net.layers)
    dacts = [None] * (n_layers + 1)
    dacts[-1] = dout
    grads = {}
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        d = dacts[i + 1]
        if d is None:
            continue
        a = acts[i]
        if layer.kind == "conv2d":
            wt = net.params[layer.name + ".w"]
            cols, ho, wo = caches[i]
            d2 = d.reshape(-1, wt.shape[-1])
            if want_params:
                grads[layer.name + ".w"] = (cols.T @ d2).reshape(wt.shape)
                grads[layer.name + ".b"] = d2.sum(axis=0)
            dcols = d2 @ wt.reshape(-1, wt.shape[-1]).T
            da = _col2im(dcols, a.shape, layer.kernel, layer.stride, layer.padding, ho, wo)
        elif layer.kind == "maxpool2d":
            idx, ho, wo = caches[i]
            k, s = layer.kernel, layer.stride
            da = np.zeros_like(a)
            for pos in range(k * k):
                r, c = divmod(pos, k)
                da[:, r:r + s * (ho - 1) + 1:s, c:c + s * (wo - 1) + 1:s, :] += np.where(idx == pos, d, 0)
        elif layer.kind == "relu":
            da = d * (a > 0)  # subgradient 0 at exactly 0
        elif layer.kind == "flatten":
            da = d.reshape(a.shape)
        elif layer.kind == "dense":
            wt = net.params[layer.name + ".w"]
            if want_params:
                grads[layer.name + ".w"] = a.T @ d
                grads[layer.name + ".b"] = d.sum(axis=0)
            da = d @ wt.T
        else:
            src = layer.source + 1
            dacts[src] = d if dacts[src] is None else dacts[src] + d
            da = d
        dacts[i] = da if dacts[i] is None else dacts[i] + da
    return dacts[0], grads


# -- public surface ----------------------------------------------------------


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    shape = tuple(x.shape)
    if shape == net.input_shape:
        return x[None].astype(net.dtype, copy=False), True
    if len(shape) == len(net.input_shape) + 1 and shape[1:] == net.input_shape:
        return x.astype(net.dtype, copy=False), False
    raise InputShapeError(f"input shape {shape} does not match network input {net.input_shape}")


def forward(net: Network, x) -> np.ndarray:
    """Logits for one input (returns ``(classes,)``) or a batch (``(N, classes)``)."""
    xb, single = _as_batch(net, x)
    acts, _ = _forward_cached(net, xb)
    return acts[-1][0] if single else acts[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y) -> np.ndarray:
    """Per-sample ``-log softmax(logits)[y]`` computed through log-sum-exp."""
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(y))
    m = logits.max(axis=-1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=-1))
    return lse - logits[np.arange(len(y)), y]


def _check_labels(net: Network, y):
    y = np.atleast_1d(np.asarray(y))
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= net.num_classes):
        raise LabelError(f"label(s) {y.tolist()} outside [0, {net.num_classes})")
    return y


def loss_and_input_gradient(net: Network, x, y) -> LossGradient:
    """Softmax cross-entropy at ``(x, y)`` and its exact gradient w.r.t. ``x``."""
    yb = _check_labels(net, y)
    xb, single = _as_batch(net, x)
    if not single:
        raise InputShapeError("loss_and_input_gradient takes a single input")
    acts, caches = _forward_cached(net, xb)
    logits = acts[-1]
    dlogits = softmax(logits)
    dlogits[0, yb[0]] -= 1
    dx, _ = _backward(net, acts, caches, dlogits, want_params=False)
    return LossGradient(float(cross_entropy(logits, yb)[0]), dx[0])


def logits_vjp(net: Network, x, v) -> tuple[np.ndarray, np.ndarray]:
    """Logits at ``x`` and ``v^T d(logits)/dx`` for a single input."""
    xb, single = _as_batch(net, x)
    if not single:
        raise InputShapeError("logits_vjp takes a single input")
    acts, caches = _forward_cached(net, xb)
    dx, _ = _backward(net, acts, caches, np.asarray(v, dtype=acts[-1].dtype)[None], want_params=False)
    return acts[-1][0], dx[0]


def loss_and_param_gradients(net: Network, xb, yb) -> tuple[float, dict]:
    """Mean cross-entropy over a batch and its gradients w.r.t. every weight."""
    yb = _check_labels(net, yb)
    xb, _ = _as_batch(net, xb)
    acts, caches = _forward_cached(net, xb)
    logits = acts[-1]
    d = softmax(logits)
    d[np.arange(len(yb)), yb] -= 1
    d /= len(yb)
    _, grads = _backward(net, acts, caches, d, want_params=True)
    return float(cross_entropy(logits, yb).mean()), grads


def finite_difference_gradient(net, x, y=None, h: float = 1e-3) -> np.ndarray:
    """Central differences ``(J(x + h e) - J(x - h e)) / 2h`` for every element ``e``.

    ``net`` is either a :class:`Network` (``J`` is its cross-entropy at
    label ``y``, evaluated in the network's dtype; use
    ``net.astype(np.float64)`` for a precise oracle) or any callable
    mapping an array to a scalar.
    """
    if not h > 0:
        raise ParameterError(f"finite-difference step must be > 0, got {h}")
    if isinstance(net, Network):
        yb = _check_labels(net, y)
        x = np.array(x, dtype=net.dtype)
        _as_batch(net, x)

        def loss(v):
            return cross_entropy(forward(net, v)[None], yb)[0]
    else:
        x = np.array(x, dtype=np.float64)
        loss = net
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for e in range(flat.size):
        orig = flat[e]
        flat[e] = orig + h
        up = loss(x)
        flat[e] = orig - h
        down = loss(x)
        flat[e] = orig
        gflat[e] = (up - down) / (2 * h)
    return grad
