"""Trainable layer units with hand-written forward and backward passes.

Every layer caches whatever its backward pass needs during forward; calling
backward before forward is a usage error.  Parameter and gradient registries
are plain dicts keyed by parameter name, composites prefix their children.
"""

import math

import numpy as np

from . import ops
from .errors import ConfigError, DataError, ShapeError


def mid_channels(c_in, c_out, kt, d):
    """Intermediate width of the factored convolution.

    Chosen so the two factor kernels together hold about as many weights
    as the single (kt, d, d) kernel they replace:
    M = floor(kt d^2 C_in C_out / (d^2 C_in + kt C_out)), at least 1.
    """
    if min(c_in, c_out, kt, d) < 1:
        raise ValueError("mid_channels arguments must be >= 1")
    num = kt * d * d * c_in * c_out
    den = d * d * c_in + kt * c_out
    return max(1, num // den)


class Layer:
    """Base contract: forward caches, backward consumes the cache."""

    name = "layer"

    def params(self):
        return {}

    def grads(self):
        return {}

    def buffers(self):
        """Non-trainable state that still belongs in checkpoints."""
        return {}

    def param_count(self):
        return sum(int(p.size) for p in self.params().values())

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _need_cache(self, cached):
        if cached is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        return cached


def _child_dict(children, which):
    out = {}
    for prefix, layer in children:
        for key, value in getattr(layer, which)().items():
            out[f"{prefix}.{key}"] = value
    return out


class Conv3D(Layer):
    """Plain volumetric convolution; kernel (1, kh, kw) gives the 2D case."""

    def __init__(self, c_in, c_out, kernel=(3, 3, 3), stride=1, padding="same",
                 rng=None, dtype=np.float32, name="conv3d"):
        self.name = name
        self.kernel = ops.as_triple(kernel, "kernel")
        self.stride = ops.as_triple(stride, "stride")
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * self.kernel[0] * self.kernel[1] * self.kernel[2]
        self.weights = ops.fan_in_uniform(rng, (c_out,) + (c_in,) + self.kernel,
                                          fan_in, dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self._gw = np.zeros_like(self.weights)
        self._gb = np.zeros_like(self.bias)
        self._x = None
        self._cols = None
        self.skip_input_grad = False

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return {"weights": self._gw, "bias": self._gb}

    def forward(self, x, training=False):
        if training:
            out, cols = ops.conv3d_forward(
                x, self.weights, self.bias, stride=self.stride,
                padding=self.padding, return_patches=True)
            self._x, self._cols = x, cols
            return out
        return ops.conv3d_forward(x, self.weights, self.bias,
                                  stride=self.stride, padding=self.padding)

    def backward(self, grad_out):
        x = self._need_cache(self._x)
        gi, gw, gb = ops.conv3d_backward(
            x, self.weights, grad_out, stride=self.stride,
            padding=self.padding, cols=self._cols,
            need_input=not self.skip_input_grad)
        self._x = self._cols = None
        self._gw[...] = gw
        self._gb[...] = gb
        return gi


class Conv2Plus1D(Layer):
    """Factored convolution: (1,kh,kw) spatial then (kt,1,1) temporal.

    The spatial factor carries the spatial stride and the temporal factor
    the temporal stride, so stride behaviour matches the unfactored kernel.
    No nonlinearity sits between the factors unless interleaved_relu is set.
    """

    def __init__(self, c_in, c_out, kernel=(3, 3, 3), stride=1, padding="same",
                 interleaved_relu=False, mid=None, rng=None, dtype=np.float32,
                 name="conv2p1d"):
        self.name = name
        kt, kh, kw = ops.as_triple(kernel, "kernel")
        if kh != kw:
            raise ConfigError(f"{name}: spatial kernel must be square, got ({kh},{kw})")
        st, sh, sw = ops.as_triple(stride, "stride")
        self.padding = padding
        self.interleaved_relu = bool(interleaved_relu)
        self.mid = int(mid) if mid is not None else mid_channels(c_in, c_out, kt, kh)
        if self.mid < 1:
            raise ConfigError(f"{name}: mid-channel count must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spatial_stride = (1, sh, sw)
        self.temporal_stride = (st, 1, 1)
        self.spatial_weights = ops.fan_in_uniform(
            rng, (self.mid, c_in, 1, kh, kw), c_in * kh * kw, dtype)
        self.spatial_bias = np.zeros(self.mid, dtype=dtype)
        self.temporal_weights = ops.fan_in_uniform(
            rng, (c_out, self.mid, kt, 1, 1), self.mid * kt, dtype)
        self.temporal_bias = np.zeros(c_out, dtype=dtype)
        self._g = {k: np.zeros_like(getattr(self, k)) for k in
                   ("spatial_weights", "spatial_bias",
                    "temporal_weights", "temporal_bias")}
        self._cache = None
        self.skip_input_grad = False

    def params(self):
        return {"spatial_weights": self.spatial_weights,
                "spatial_bias": self.spatial_bias,
                "temporal_weights": self.temporal_weights,
                "temporal_bias": self.temporal_bias}

    def grads(self):
        return dict(self._g)

    def forward(self, x, training=False):
        if training:
            mid, s_cols = ops.conv3d_forward(
                x, self.spatial_weights, self.spatial_bias,
                stride=self.spatial_stride, padding=self.padding,
                return_patches=True)
            act = np.maximum(mid, 0) if self.interleaved_relu else mid
            out, t_cols = ops.conv3d_forward(
                act, self.temporal_weights, self.temporal_bias,
                stride=self.temporal_stride, padding=self.padding,
                return_patches=True)
            self._cache = (x, mid, act, s_cols, t_cols)
            return out
        mid = ops.conv3d_forward(x, self.spatial_weights, self.spatial_bias,
                                 stride=self.spatial_stride, padding=self.padding)
        act = np.maximum(mid, 0) if self.interleaved_relu else mid
        return ops.conv3d_forward(act, self.temporal_weights, self.temporal_bias,
                                  stride=self.temporal_stride, padding=self.padding)

    def backward(self, grad_out):
        x, mid, act, s_cols, t_cols = self._need_cache(self._cache)
        self._cache = None
        g_act, gtw, gtb = ops.conv3d_backward(
            act, self.temporal_weights, grad_out,
            stride=self.temporal_stride, padding=self.padding, cols=t_cols)
        if self.interleaved_relu:
            g_act = g_act * (mid > 0)
        gi, gsw, gsb = ops.conv3d_backward(
            x, self.spatial_weights, g_act,
            stride=self.spatial_stride, padding=self.padding, cols=s_cols,
            need_input=not self.skip_input_grad)
        self._g["spatial_weights"][...] = gsw
        self._g["spatial_bias"][...] = gsb
        self._g["temporal_weights"][...] = gtw
        self._g["temporal_bias"][...] = gtb
        return gi


class BatchNorm(Layer):
    """Per-channel normalization over the (N, T, H, W) axes.

    Training normalizes with batch statistics (biased variance) and keeps
    exponential running averages (unbiased variance, torch convention) for
    inference.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32,
                 name="batchnorm"):
        if eps <= 0:
            raise ConfigError("batchnorm eps must be positive")
        if not 0 < momentum <= 1:
            raise ConfigError("batchnorm momentum must be in (0, 1]")
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._gg = np.zeros_like(self.gamma)
        self._gb = np.zeros_like(self.beta)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self._gg, "beta": self._gb}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @staticmethod
    def _per_c(v):
        return v[None, :, None, None, None]

    def forward(self, x, training=False):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: expected (N,{self.channels},T,H,W), got {x.shape}")
        axes = (0, 2, 3, 4)
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
            if m < 2:
                raise DataError(
                    f"{self.name}: train-mode batch has one element per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - self._per_c(mean)) * self._per_c(inv)
            mom = self.momentum
            self.running_mean *= 1 - mom
            self.running_mean += (mom * mean).astype(self.running_mean.dtype)
            self.running_var *= 1 - mom
            self.running_var += (mom * var * m / (m - 1)).astype(self.running_var.dtype)
            self._cache = ("train", xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self._per_c(self.running_mean)) * self._per_c(inv)
            self._cache = ("infer", xhat, inv)
        out = self._per_c(self.gamma) * xhat + self._per_c(self.beta)
        ops.ensure_finite(out, self.name)
        return out

    def backward(self, grad_out):
        mode, xhat, inv = self._need_cache(self._cache)
        axes = (0, 2, 3, 4)
        self._gg[...] = (grad_out * xhat).sum(axis=axes)
        self._gb[...] = grad_out.sum(axis=axes)
        scale = self._per_c(self.gamma * inv)
        if mode == "infer":
            return scale * grad_out
        # train mode: account for the gradient flowing through mu and sigma
        g_mean = self._per_c(grad_out.mean(axis=axes))
        gx_mean = self._per_c((grad_out * xhat).mean(axis=axes))
        return scale * (grad_out - g_mean - xhat * gx_mean)


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name
        self._mask = None

    def forward(self, x, training=False):
        if training:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        mask = self._need_cache(self._mask)
        return grad_out * mask


class ResizeVideo(Layer):
    """Trilinear resampling of the (T, H, W) axes to a fixed target."""

    def __init__(self, target, name="resize"):
        self.name = name
        self.target = ops.as_triple(target, "target")
        self._source = None

    def forward(self, x, training=False):
        if training:
            self._source = x.shape[2:]
        return ops.trilinear_resize(x, self.target)

    def backward(self, grad_out):
        source = self._need_cache(self._source)
        return ops.trilinear_resize_backward(grad_out, source)


class CenterFrame(Layer):
    """Keep only the middle time step (length-1 time axis retained)."""

    def __init__(self, name="center"):
        self.name = name
        self._shape = None

    def forward(self, x, training=False):
        if x.ndim != 5:
            raise ShapeError(f"{self.name}: expected 5D input, got {x.shape}")
        if training:
            self._shape = x.shape
        t0 = x.shape[2] // 2
        return np.ascontiguousarray(x[:, :, t0:t0 + 1])

    def backward(self, grad_out):
        shape = self._need_cache(self._shape)
        grad = np.zeros(shape, dtype=grad_out.dtype)
        t0 = shape[2] // 2
        grad[:, :, t0:t0 + 1] = grad_out
        return grad


class GlobalAvgPool(Layer):
    """Mean over (T, H, W): (N, C, T, H, W) -> (N, C)."""

    def __init__(self, name="pool"):
        self.name = name
        self._shape = None

    def forward(self, x, training=False):
        if x.ndim != 5:
            raise ShapeError(f"{self.name}: expected 5D input, got {x.shape}")
        if training:
            self._shape = x.shape
        return ops.reduce_mean(x, (2, 3, 4))

    def backward(self, grad_out):
        shape = self._need_cache(self._shape)
        scale = 1.0 / (shape[2] * shape[3] * shape[4])
        return np.broadcast_to(
            (grad_out * grad_out.dtype.type(scale))[:, :, None, None, None],
            shape).copy()


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x, training=False):
        if training:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        shape = self._need_cache(self._shape)
        return grad_out.reshape(shape)


class Dropout(Layer):
    """Inverted dropout: survivors scaled at train time, identity at infer."""

    def __init__(self, rate=0.5, rng=None, name="dropout"):
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.name = name
        self.rate = float(rate)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.last_mask = None
        self._mode = None

    def forward(self, x, training=False):
        if not training:
            self._mode = "infer"
            self.last_mask = None
            return x
        self._mode = "train"
        keep = 1.0 - self.rate
        if self.rate == 0:
            self.last_mask = np.ones_like(x)
            return x
        mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype)
        self.last_mask = mask
        return x * mask * x.dtype.type(1.0 / keep)

    def backward(self, grad_out):
        mode = self._need_cache(self._mode)
        if mode == "infer" or self.rate == 0:
            return grad_out
        return grad_out * self.last_mask * grad_out.dtype.type(1.0 / (1.0 - self.rate))


class Dense(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32,
                 name="dense"):
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = ops.fan_in_uniform(rng, (out_features, in_features),
                                          in_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self._gw = np.zeros_like(self.weights)
        self._gb = np.zeros_like(self.bias)
        self._x = None

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return {"weights": self._gw, "bias": self._gb}

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeError(
                f"{self.name}: expected (N,{self.weights.shape[1]}), got {x.shape}")
        if training:
            self._x = x
        out = x @ self.weights.T + self.bias
        ops.ensure_finite(out, self.name)
        return out

    def backward(self, grad_out):
        x = self._need_cache(self._x)
        self._gw[...] = grad_out.T @ x
        self._gb[...] = grad_out.sum(axis=0)
        return grad_out @ self.weights


class ResidualBlock(Layer):
    """conv-BN-ReLU-conv-BN branch added to a skip path, then ReLU.

    The skip is the identity when shapes carry through unchanged; otherwise
    a 1x1x1 convolution plus BatchNorm projects it.  The first branch
    convolution and the projection carry the block stride.
    """

    def __init__(self, c_in, c_out, kernel=(3, 3, 3), conv_kind="2p1d", stride=1,
                 interleaved_relu=False, rng=None, dtype=np.float32, name="residual"):
        self.name = name
        stride = ops.as_triple(stride, "stride")
        rng = rng if rng is not None else np.random.default_rng(0)
        if conv_kind == "2p1d":
            def make(ci, co, s, nm):
                return Conv2Plus1D(ci, co, kernel, stride=s,
                                   interleaved_relu=interleaved_relu,
                                   rng=rng, dtype=dtype, name=nm)
        elif conv_kind == "3d":
            def make(ci, co, s, nm):
                return Conv3D(ci, co, kernel, stride=s, rng=rng, dtype=dtype, name=nm)
        else:
            raise ConfigError(f"unknown conv kind {conv_kind!r}")
        self.conv1 = make(c_in, c_out, stride, "conv1")
        self.bn1 = BatchNorm(c_out, dtype=dtype, name="bn1")
        self.conv2 = make(c_out, c_out, 1, "conv2")
        self.bn2 = BatchNorm(c_out, dtype=dtype, name="bn2")
        self.projection = None
        self.projection_bn = None
        if c_in != c_out or stride != (1, 1, 1):
            self.projection = Conv3D(c_in, c_out, (1, 1, 1), stride=stride,
                                     rng=rng, dtype=dtype, name="proj")
            self.projection_bn = BatchNorm(c_out, dtype=dtype, name="proj_bn")
        self._cache = None

    def _children(self):
        kids = [("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.projection is not None:
            kids += [("proj", self.projection), ("proj_bn", self.projection_bn)]
        return kids

    def params(self):
        return _child_dict(self._children(), "params")

    def grads(self):
        return _child_dict(self._children(), "grads")

    def buffers(self):
        return _child_dict(self._children(), "buffers")

    def forward(self, x, training=False):
        b = self.conv1.forward(x, training)
        b = self.bn1.forward(b, training)
        mid_mask = b > 0
        b = np.maximum(b, 0)
        b = self.conv2.forward(b, training)
        b = self.bn2.forward(b, training)
        if self.projection is not None:
            skip = self.projection.forward(x, training)
            skip = self.projection_bn.forward(skip, training)
        else:
            skip = x
        if b.shape != skip.shape:
            raise ShapeError(
                f"{self.name}: branch {b.shape} vs skip {skip.shape}; "
                "projection required but absent")
        pre = b + skip
        if training:
            self._cache = (mid_mask, pre > 0)
        return np.maximum(pre, 0)

    def backward(self, grad_out):
        mid_mask, out_mask = self._need_cache(self._cache)
        g = grad_out * out_mask
        gb = self.bn2.backward(g)
        gb = self.conv2.backward(gb)
        gb = gb * mid_mask
        gb = self.bn1.backward(gb)
        gb = self.conv1.backward(gb)
        if self.projection is not None:
            gs = self.projection_bn.backward(g)
            gs = self.projection.backward(gs)
        else:
            gs = g
        return gb + gs


def global_avg_pool(x):
    """Functional form of the pooling layer."""
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool: expected 5D input, got {x.shape}")
    return ops.reduce_mean(x, (2, 3, 4))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood plus its gradient w.r.t. the logits.

    labels are one-hot rows; returns (loss, grad) with grad already divided
    by the batch size so it feeds straight into backward().
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape != labels.shape:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if k < 2:
        raise ShapeError("softmax_cross_entropy: need at least 2 classes")
    onehot_ok = (np.all((labels == 0) | (labels == 1))
                 and np.all(labels.sum(axis=1) == 1))
    if not onehot_ok:
        raise DataError("labels must be one-hot rows")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = float(-(labels * logp).sum() / n)
    grad = (np.exp(logp) - labels) / n
    if not math.isfinite(loss):
        raise DataError("softmax_cross_entropy: non-finite loss")
    ops.ensure_finite(grad, "softmax_cross_entropy grad")
    return loss, grad.astype(logits.dtype, copy=False)


def layer_backward(layer, grad_out):
    """(grad_input, parameter-gradient dict) for the latest cached forward."""
    grad_in = layer.backward(grad_out)
    return grad_in, dict(layer.grads())
