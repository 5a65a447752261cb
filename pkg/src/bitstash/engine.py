"""A small deterministic layer-wise autodiff engine.

Each layer's backward consumes the input activation it stashed on the way
forward, so what sits between the two passes is entirely controlled by the
:class:`~bitstash.stash.StashPolicy` in force.

Arrays are plain NCHW numpy arrays. Training runs in float32; the
finite-difference oracle runs whole models in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bitmap import BitmapTensor
from .errors import InvalidInputError, ProtocolViolationError
from .stash import DENSE, MemoryLedger, RecomputeContext, StashPolicy, stash_restore, stash_store


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class Gradients:
    """Per-layer parameter gradients (dicts keyed like ``layer.params``) and the input gradient."""

    params: list
    input: Optional[np.ndarray] = None

    def flat(self):
        for i, g in enumerate(self.params):
            for name, arr in g.items():
                yield i, name, arr


# -- layers ------------------------------------------------------------------


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def macs(self, input_shape) -> int:
        return 0

    def forward(self, x, training=True, update_running=True):
        """Return ``(output, ctx)``; ``ctx`` is any small extra state backward needs."""
        raise NotImplementedError

    def backward(self, x, ctx, grad_out):
        """Return ``(grad_in, param_grads)`` given the stashed input ``x``."""
        raise NotImplementedError

    def init_params(self, rng, dtype):
        pass


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel)
        self.stride = int(stride)
        self.padding = int(padding)

    def init_params(self, rng, dtype):
        kh, kw = self.kernel
        fan_in = self.in_channels * kh * kw
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(self.out_channels, self.in_channels, kh, kw))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(self.out_channels, dtype=dtype)}

    def output_shape(self, input_shape):
        b, c, h, w = input_shape
        kh, kw = self.kernel
        if c != self.in_channels:
            raise InvalidInputError(f"conv2d expects {self.in_channels} input channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise InvalidInputError(f"conv2d output would be {ho}x{wo} for input {h}x{w}")
        return (b, self.out_channels, ho, wo)

    def macs(self, input_shape):
        b, o, ho, wo = self.output_shape(input_shape)
        kh, kw = self.kernel
        return b * o * ho * wo * self.in_channels * kh * kw

    def forward(self, x, training=True, update_running=True):
        return conv2d_forward(x, self), None

    def backward(self, x, ctx, grad_out):
        g = conv2d_backward(x, self, grad_out)
        return g.input, g.params[0]


class Linear(Layer):
    """Fully connected layer; inputs with more than two dims are flattened per sample."""

    kind = "linear"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def init_params(self, rng, dtype):
        bound = math.sqrt(6.0 / self.in_features)
        w = rng.uniform(-bound, bound, size=(self.out_features, self.in_features))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(self.out_features, dtype=dtype)}

    def output_shape(self, input_shape):
        feats = math.prod(input_shape[1:])
        if feats != self.in_features:
            raise InvalidInputError(f"linear expects {self.in_features} features, got {feats}")
        return (input_shape[0], self.out_features)

    def macs(self, input_shape):
        return input_shape[0] * self.in_features * self.out_features

    def forward(self, x, training=True, update_running=True):
        return linear_forward(x, self), None

    def backward(self, x, ctx, grad_out):
        g = linear_backward(x, self, grad_out)
        return g.input, g.params[0]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=True, update_running=True):
        return relu_forward(x), None

    def backward(self, x, ctx, grad_out):
        return relu_backward(x, grad_out), {}


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = _pair(kernel)
        self.stride = int(stride) if stride is not None else self.kernel[0]

    def output_shape(self, input_shape):
        b, c, h, w = input_shape
        kh, kw = self.kernel
        if kh > h or kw > w:
            raise InvalidInputError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
        return (b, c, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    def forward(self, x, training=True, update_running=True):
        return maxpool_forward(x, self), None

    def backward(self, x, ctx, grad_out):
        return maxpool_backward(x, self, grad_out), {}


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, eps=1e-5, momentum=0.1, double_mask=False):
        super().__init__()
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.double_mask = bool(double_mask)
        self.running_mean = None
        self.running_var = None

    def init_params(self, rng, dtype):
        self.params = {"gamma": np.ones(self.channels, dtype=dtype), "beta": np.zeros(self.channels, dtype=dtype)}
        self.running_mean = np.zeros(self.channels, dtype=dtype)
        self.running_var = np.ones(self.channels, dtype=dtype)

    def output_shape(self, input_shape):
        if input_shape[1] != self.channels:
            raise InvalidInputError(f"batchnorm expects {self.channels} channels, got {input_shape[1]}")
        return tuple(input_shape)

    def macs(self, input_shape):
        return math.prod(input_shape)

    def forward(self, x, training=True, update_running=True):
        y, stats = batchnorm_forward(x, self, training, update_running)
        return y, stats

    def backward(self, x, ctx, grad_out):
        g = batchnorm_backward(x, ctx, self, grad_out)
        return g.input, g.params[0]


# -- layer math --------------------------------------------------------------


def _windows(xp, kernel, stride):
    kh, kw = kernel
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, layer: Conv2d):
    layer.output_shape(x.shape)
    p = layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, layer.kernel, layer.stride)  # B, C, Ho, Wo, kh, kw
    out = np.tensordot(win, layer.params["weight"], axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, O
    out = out.transpose(0, 3, 1, 2) + layer.params["bias"][None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x, layer: Conv2d, grad_out) -> Gradients:
    p, s = layer.padding, layer.stride
    kh, kw = layer.kernel
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, layer.kernel, s)
    _, _, ho, wo = grad_out.shape
    dw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
    db = grad_out.sum(axis=(0, 2, 3))
    dwin = np.tensordot(grad_out, layer.params["weight"], axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
    dxp = np.zeros(xp.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
    return Gradients([{"weight": dw.astype(x.dtype), "bias": db.astype(x.dtype)}], np.ascontiguousarray(dx))


def linear_forward(x, layer: Linear):
    layer.output_shape(x.shape)
    x2 = x.reshape(x.shape[0], -1)
    return (x2 @ layer.params["weight"].T + layer.params["bias"]).astype(x.dtype, copy=False)


def linear_backward(x, layer: Linear, grad_out) -> Gradients:
    x2 = x.reshape(x.shape[0], -1)
    dw = grad_out.T @ x2
    db = grad_out.sum(axis=0)
    dx = (grad_out @ layer.params["weight"]).reshape(x.shape)
    return Gradients([{"weight": dw, "bias": db}], dx)


def relu_forward(x):
    # np.where yields +0.0 for negatives and for -0.0
    return np.where(x > 0, x, x.dtype.type(0))


def relu_backward(stashed_input, grad_out):
    return np.where(stashed_input > 0, grad_out, grad_out.dtype.type(0))


def maxpool_forward(x, layer: MaxPool2d):
    layer.output_shape(x.shape)
    win = _windows(x, layer.kernel, layer.stride)
    return np.ascontiguousarray(win.max(axis=(4, 5)))


def maxpool_backward(stashed_input, layer: MaxPool2d, grad_out):
    """Route each output gradient to its window's argmax (first flat index on ties)."""
    kh, kw = layer.kernel
    s = layer.stride
    win = _windows(stashed_input, layer.kernel, s)
    b, c, ho, wo = win.shape[:4]
    arg = win.reshape(b, c, ho, wo, kh * kw).argmax(axis=-1)
    di, dj = np.divmod(arg, kw)
    rows = np.arange(ho)[None, None, :, None] * s + di
    cols = np.arange(wo)[None, None, None, :] * s + dj
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    dx = np.zeros_like(stashed_input)
    if s >= kh and s >= kw:
        dx[bi, ci, rows, cols] = grad_out
    else:
        np.add.at(dx, (np.broadcast_to(bi, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), grad_out)
    return dx


def batchnorm_forward(x, layer: BatchNorm2d, training=True, update_running=True):
    """Return ``(output, (mean, var))``; statistics use the biased variance."""
    layer.output_shape(x.shape)
    if training:
        if x.shape[0] < 2:
            raise InvalidInputError("batchnorm needs a batch of at least 2 in training mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            mom = x.dtype.type(layer.momentum)
            layer.running_mean = (1 - mom) * layer.running_mean + mom * mean
            layer.running_var = (1 - mom) * layer.running_var + mom * var
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(layer.eps))
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = layer.params["gamma"][None, :, None, None] * xhat + layer.params["beta"][None, :, None, None]
    if layer.double_mask:
        # beta is added before masking, so masked positions are exactly zero
        y = np.where(x == 0, x.dtype.type(0), y)
    return y.astype(x.dtype, copy=False), (mean, var)


def batchnorm_backward(stashed_input, stashed_stats, layer: BatchNorm2d, grad_out) -> Gradients:
    x = stashed_input
    mean, var = stashed_stats
    n = x.shape[0] * x.shape[2] * x.shape[3]
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(layer.eps))
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    g = grad_out
    if layer.double_mask:
        mask = x != 0
        g = np.where(mask, g, g.dtype.type(0))
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * layer.params["gamma"][None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    if layer.double_mask:
        dx = np.where(mask, dx, dx.dtype.type(0))
    return Gradients([{"gamma": dgamma, "beta": dbeta}], dx.astype(x.dtype, copy=False))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1
    return float(loss), (grad / b).astype(logits.dtype, copy=False)


# -- network -----------------------------------------------------------------


@dataclass
class ForwardState:
    policy: StashPolicy
    ledger: Optional[MemoryLedger]
    handles: list = field(default_factory=list)
    ctxs: list = field(default_factory=list)
    codec_elements: int = 0


class Network:
    """An ordered stack of layers with stash-aware forward and backward."""

    def __init__(self, layers, seed=0, dtype=np.float32):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self._state = None
        self.last_counts = {}
        # one stream, layers in order, elements row-major within each tensor
        rng = np.random.Generator(np.random.PCG64(seed))
        for layer in self.layers:
            layer.init_params(rng, self.dtype)

    def __len__(self):
        return len(self.layers)

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield i, name, arr

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def _check_dtype(self, x):
        if x.dtype != self.dtype:
            raise InvalidInputError(f"input dtype {x.dtype} differs from model precision {self.dtype}")

    def forward(self, x, policy: StashPolicy = DENSE, ledger: Optional[MemoryLedger] = None):
        """Training-mode forward that stashes every layer input under ``policy``."""
        self._check_dtype(x)
        if self._state is not None and any(not h.restored for h in self._state.handles):
            raise ProtocolViolationError("forward called again before the previous backward consumed its stash")
        state = ForwardState(policy, ledger)
        for i, layer in enumerate(self.layers):
            mask_only = policy.relu_mask_only and isinstance(layer, ReLU)
            h = stash_store(ledger, policy, i, x, mask_only=mask_only)
            if isinstance(h.payload, BitmapTensor):
                state.codec_elements += x.size
            state.handles.append(h)
            x, ctx = layer.forward(x, training=True)
            state.ctxs.append(ctx)
        self._state = state
        return x

    def backward(self, grad_out, ledger: Optional[MemoryLedger] = None) -> Gradients:
        state = self._state
        if state is None:
            raise ProtocolViolationError("backward called without a preceding forward")
        ledger = ledger if ledger is not None else state.ledger
        rc = None
        if state.policy.checkpoint_every_m is not None:
            rc = RecomputeContext(self, state.handles, state.policy, ledger)
        grads = [None] * len(self.layers)
        g = grad_out
        codec = state.codec_elements
        for i in range(len(self.layers) - 1, -1, -1):
            h = state.handles[i]
            x = stash_restore(ledger, h, rc)
            if isinstance(h.payload, BitmapTensor):
                codec += x.size
            g, grads[i] = self.layers[i].backward(x, state.ctxs[i], g)
        self._state = None
        self.last_counts = {
            "recompute_macs": rc.recomputed_macs if rc else 0,
            "codec_elements": codec + (rc.codec_elements if rc else 0),
        }
        return Gradients(grads, g)

    def predict(self, x):
        """Inference forward with running statistics; nothing is stashed."""
        self._check_dtype(x)
        for layer in self.layers:
            x, _ = layer.forward(x, training=False)
        return x

    def pending_handles(self):
        return [] if self._state is None else [h for h in self._state.handles if not h.restored]


def forward(model: Network, x, policy: StashPolicy = DENSE, ledger=None):
    return model.forward(x, policy, ledger)


def backward(model: Network, grad_out, ledger=None) -> Gradients:
    return model.backward(grad_out, ledger)


def sgd_step(model: Network, grads: Gradients, lr: float) -> Network:
    """In-place ``p <- p - lr * g`` over every parameter."""
    for i, name, g in grads.flat():
        p = model.layers[i].params[name]
        p -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
    return model


# -- finite differences ------------------------------------------------------


def central_difference(f, arr, eps=1e-4):
    """Gradient of scalar ``f()`` w.r.t. ``arr`` by perturbing ``arr`` in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f()
        flat[k] = orig - eps
        fm = f()
        flat[k] = orig
        out[k] = (fp - fm) / (2 * eps)
    return grad


def _probe_loss(model, x, weights):
    y = model.forward(x, DENSE, None)
    model._state = None
    return float(np.sum(y * weights))


def finite_difference_grad(model: Network, x, param_index, eps=1e-4, weights=None):
    """FP64 central-difference estimate of d(sum(weights * model(x)))/d(target).

    ``param_index`` is ``(layer_idx, name)`` or the string ``"input"``.
    ``weights`` defaults to ones over the output.
    """
    if model.dtype != np.float64:
        raise InvalidInputError("finite differences require a float64 model")
    if weights is None:
        weights = np.ones(model.output_shape(x.shape))
    if param_index == "input":
        target = x
    else:
        i, name = param_index
        target = model.layers[i].params[name]
    running = [(layer, layer.running_mean, layer.running_var) for layer in model.layers
               if isinstance(layer, BatchNorm2d)]
    try:
        return central_difference(lambda: _probe_loss(model, x, weights), target, eps)
    finally:
        for layer, rm, rv in running:
            layer.running_mean, layer.running_var = rm, rv
