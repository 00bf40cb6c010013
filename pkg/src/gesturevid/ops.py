"""Dense-array kernels every layer is built from.

Video tensors use the fixed axis order (N, C, T, H, W); 2D images are the
degenerate case T = 1.  All functions are pure: they never mutate their
inputs and always allocate fresh outputs.  Convolution runs as a
patch-gather plus matrix product; the naive nested-loop reference it is
checked against lives in the test suite.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError, ShapeError

_ELEMENTWISE_TAGS = ("add", "sub", "mul", "relu", "scale")


def ensure_finite(array, what):
    """Raise NumericError if ``array`` contains NaN/Inf.

    Fast path: a finite sum implies every element is finite (NaN and Inf
    both propagate through summation).  An overflowing-but-finite input
    only costs the full elementwise check.
    """
    total = np.sum(array)
    if not np.isfinite(total):
        if not np.all(np.isfinite(array)):
            raise NumericError(f"{what} produced non-finite values")


def elementwise(op, a, b=None):
    """Apply a tagged elementwise operation.

    ``op`` is one of add/sub/mul (binary, equal shapes or scalar ``b``),
    relu (unary), scale (``b`` scalar).
    """
    a = np.asarray(a)
    if op not in _ELEMENTWISE_TAGS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op == "relu":
        out = np.maximum(a, 0)
    else:
        if b is None:
            raise ShapeError(f"elementwise {op!r} needs a second operand")
        if op == "scale":
            if np.ndim(b) != 0:
                raise ShapeError(f"scale expects a scalar, got shape {np.shape(b)}")
        elif np.ndim(b) != 0 and np.shape(b) != a.shape:
            raise ShapeError(
                f"elementwise {op!r}: shape mismatch {a.shape} vs {np.shape(b)}"
            )
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        else:  # mul, scale
            out = a * b
    ensure_finite(out, f"elementwise {op}")
    return out


def as_triple(value, name):
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3 or any(v < 1 for v in value):
        raise ShapeError(f"{name} must be three positive ints, got {value}")
    return value


def conv_geometry(in_extents, kernel, stride, padding):
    """Per-axis (pad_front, pad_back) and output extents.

    'same' picks zero padding so stride-1 output extents equal input
    extents (ceil(L/s) in general), splitting odd deficits with the extra
    pad on the trailing side.  'valid' uses no padding and requires the
    kernel to fit.
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    pads, outs = [], []
    for length, k, s in zip(in_extents, kernel, stride):
        if padding == "same":
            out = -(-length // s)
            total = max((out - 1) * s + k - length, 0)
            front = total // 2
            pads.append((front, total - front))
        else:
            if k > length:
                raise ShapeError(
                    f"'valid' convolution: kernel extent {k} exceeds input extent {length}"
                )
            out = (length - k) // s + 1
            pads.append((0, 0))
        outs.append(out)
    return pads, tuple(outs)


def _pad_channels_last(x, pads):
    """(N,C,T,H,W) -> zero-padded (N,Tp,Hp,Wp,C).

    Channels-last staging makes the patch-gather copy read contiguous
    (kw, C) runs instead of single elements, which is what keeps im2col
    off the critical path.
    """
    n, c = x.shape[:2]
    ext = tuple(length + f + b for length, (f, b) in zip(x.shape[2:], pads))
    out = np.zeros((n,) + ext + (c,), dtype=x.dtype)
    out[:, pads[0][0]:pads[0][0] + x.shape[2],
        pads[1][0]:pads[1][0] + x.shape[3],
        pads[2][0]:pads[2][0] + x.shape[4], :] = np.moveaxis(x, 1, -1)
    return out


def _patch_matrix(padded_cl, kernel, stride, out_extents):
    """im2col: one row per output position, columns ordered (kt, kh, kw, C).

    The reshape of the strided window view materialises the patches; that
    single copy is what lets the contraction run as one BLAS matmul.
    """
    n = padded_cl.shape[0]
    c = padded_cl.shape[-1]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_extents
    sn, s1, s2, s3, sc = padded_cl.strides
    win = as_strided(
        padded_cl,
        shape=(n, to, ho, wo, kt, kh, kw, c),
        strides=(sn, s1 * st, s2 * sh, s3 * sw, s1, s2, s3, sc),
        writeable=False,
    )
    return win.reshape(n * to * ho * wo, kt * kh * kw * c)


def _weight_matrix(weights):
    """(C_out,C_in,kt,kh,kw) -> (C_out, kt*kh*kw*C_in), matching _patch_matrix."""
    c_out = weights.shape[0]
    return np.ascontiguousarray(
        weights.transpose(0, 2, 3, 4, 1)).reshape(c_out, -1)


def _check_conv_args(x, weights, stride, name):
    if x.ndim != 5:
        raise ShapeError(f"{name}: input must be 5D (N,C,T,H,W), got {x.shape}")
    if weights.ndim != 5:
        raise ShapeError(
            f"{name}: weights must be 5D (C_out,C_in,kt,kh,kw), got {weights.shape}"
        )
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"{name}: channel mismatch, input {x.shape} vs weights {weights.shape}"
        )
    return as_triple(stride, "stride")


def conv3d_forward(x, weights, bias=None, stride=1, padding="same",
                   return_patches=False):
    """3D convolution over (T, H, W) with zero padding.

    out[n,co,t,h,w] = bias[co]
        + sum_{ci,dt,dh,dw} x[n,ci,t*st+dt-pt, h*sh+dh-ph, w*sw+dw-pw]
                            * weights[co,ci,dt,dh,dw]
    with out-of-range input treated as zero.  A 2D convolution is the
    degenerate case kt = 1.  ``return_patches`` additionally hands back the
    im2col matrix so a following backward pass can skip rebuilding it.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    stride = _check_conv_args(x, weights, stride, "conv3d_forward")
    kernel = weights.shape[2:]
    pads, out_ext = conv_geometry(x.shape[2:], kernel, stride, padding)
    c_out = weights.shape[0]
    cols = _patch_matrix(_pad_channels_last(x, pads), kernel, stride, out_ext)
    out_cl = cols @ _weight_matrix(weights).T  # (N*T'*H'*W', C_out)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (c_out,):
            raise ShapeError(
                f"conv3d_forward: bias shape {bias.shape} != ({c_out},)"
            )
        out_cl += bias
    out = np.ascontiguousarray(
        np.moveaxis(out_cl.reshape((x.shape[0],) + out_ext + (c_out,)), -1, 1)
    )
    ensure_finite(out, "conv3d_forward")
    if return_patches:
        return out, cols
    return out


def conv3d_backward(x, weights, grad_out, stride=1, padding="same",
                    cols=None, need_input=True):
    """Exact gradients of sum(grad_out * conv3d_forward(...)).

    Returns (grad_input, grad_weights, grad_bias).  ``cols`` may pass in the
    patch matrix from the matching forward call; ``need_input=False`` skips
    the input gradient (for the first layer of a network) and returns None
    in its place.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    grad_out = np.asarray(grad_out)
    stride = _check_conv_args(x, weights, stride, "conv3d_backward")
    kernel = weights.shape[2:]
    pads, out_ext = conv_geometry(x.shape[2:], kernel, stride, padding)
    expected = (x.shape[0], weights.shape[0]) + out_ext
    if grad_out.shape != expected:
        raise ShapeError(
            f"conv3d_backward: grad_out shape {grad_out.shape} != {expected}"
        )

    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))

    n, c_in = x.shape[:2]
    c_out = weights.shape[0]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_ext
    if cols is None:
        cols = _patch_matrix(_pad_channels_last(x, pads), kernel, stride,
                             out_ext)
    go_mat = np.moveaxis(grad_out, 1, -1).reshape(-1, c_out)  # (N*T'*H'*W', Co)
    # columns are (kt,kh,kw,C); bring the contraction back to weight layout
    grad_weights = np.ascontiguousarray(
        (go_mat.T @ cols).reshape((c_out, kt, kh, kw, c_in))
        .transpose(0, 4, 1, 2, 3))

    if not need_input:
        ensure_finite(grad_weights, "conv3d_backward grad_weights")
        ensure_finite(grad_bias, "conv3d_backward grad_bias")
        return None, grad_weights, grad_bias

    if stride == (1, 1, 1):
        # At unit stride the input gradient is itself a convolution: correlate
        # grad_out with the channel-transposed, spatially flipped kernel,
        # padded so the 'valid' output lands exactly on the input grid.
        wt = weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        back_pads = tuple((k - 1 - f, k - 1 - b)
                          for (f, b), k in zip(pads, kernel))
        cols_b = _patch_matrix(_pad_channels_last(grad_out, back_pads),
                               kernel, stride, x.shape[2:])
        gi_cl = cols_b @ _weight_matrix(wt).T
        grad_input = np.ascontiguousarray(
            np.moveaxis(gi_cl.reshape((n,) + x.shape[2:] + (c_in,)), -1, 1)
        )
    else:
        # Strided case: one matmul gives every patch's gradient, then each
        # kernel offset scatter-adds its slice back onto the padded grid.
        # Channels-last accumulation keeps the strided writes cheap.
        grad_cols = (go_mat @ _weight_matrix(weights)).reshape(
            (n, to, ho, wo, kt, kh, kw, c_in)
        )
        padded_ext = tuple(length + f + b
                           for length, (f, b) in zip(x.shape[2:], pads))
        grad_padded = np.zeros((n,) + padded_ext + (c_in,), dtype=x.dtype)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    grad_padded[:, dt:dt + st * to:st,
                                dh:dh + sh * ho:sh,
                                dw:dw + sw * wo:sw, :] += \
                        grad_cols[:, :, :, :, dt, dh, dw, :]
        grad_input = np.moveaxis(grad_padded, -1, 1)[
            :, :,
            pads[0][0]:pads[0][0] + x.shape[2],
            pads[1][0]:pads[1][0] + x.shape[3],
            pads[2][0]:pads[2][0] + x.shape[4],
        ]
        grad_input = np.ascontiguousarray(grad_input)
    for grad, what in ((grad_input, "grad_input"), (grad_weights, "grad_weights"),
                       (grad_bias, "grad_bias")):
        ensure_finite(grad, f"conv3d_backward {what}")
    return grad_input, grad_weights, grad_bias


def _resize_coords(old, new):
    """Align-corners source coordinates: src = dst*(old-1)/(new-1)."""
    if new == 1:
        src = np.zeros(1)
    else:
        src = np.arange(new) * ((old - 1) / (new - 1))
    i0 = np.minimum(np.floor(src).astype(np.intp), old - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, old - 1)
    return i0, i1, frac


def _resize_axis(x, axis, new_len):
    old = x.shape[axis]
    if new_len == old:
        return x
    i0, i1, frac = _resize_coords(old, new_len)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = new_len
    f = frac.astype(x.dtype).reshape(shape)
    # lerp as a + f*(b-a): exact for f=0 and for constant volumes
    return a + f * (b - a)


def _resize_axis_backward(grad, axis, old_len):
    new = grad.shape[axis]
    if new == old_len:
        return grad
    i0, i1, frac = _resize_coords(old_len, new)
    out = np.zeros(grad.shape[:axis] + (old_len,) + grad.shape[axis + 1:],
                   dtype=grad.dtype)
    gm = np.moveaxis(grad, axis, -1)
    om = np.moveaxis(out, axis, -1)
    for k in range(new):
        f = grad.dtype.type(frac[k])
        om[..., i0[k]] += (1 - f) * gm[..., k]
        if i1[k] != i0[k]:
            om[..., i1[k]] += f * gm[..., k]
    return out


def trilinear_resize(x, target):
    """Resize the (T, H, W) axes of a (N, C, T, H, W) tensor.

    Each output sample interpolates its 8 nearest input samples under the
    align-corners mapping; resizing to the same shape is the identity.
    """
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"trilinear_resize: input must be 5D, got {x.shape}")
    target = as_triple(target, "target")
    out = x
    for axis, new_len in zip((2, 3, 4), target):
        out = _resize_axis(out, axis, new_len)
    if out is x:
        out = x.copy()
    ensure_finite(out, "trilinear_resize")
    return out


def trilinear_resize_backward(grad_out, source_extents):
    """Adjoint of trilinear_resize back onto (T, H, W) = source_extents."""
    grad_out = np.asarray(grad_out)
    if grad_out.ndim != 5:
        raise ShapeError(
            f"trilinear_resize_backward: grad must be 5D, got {grad_out.shape}"
        )
    source_extents = as_triple(source_extents, "source_extents")
    grad = grad_out
    for axis, old_len in zip((4, 3, 2), reversed(source_extents)):
        grad = _resize_axis_backward(grad, axis, old_len)
    if grad is grad_out:
        grad = grad_out.copy()
    ensure_finite(grad, "trilinear_resize_backward")
    return grad


def reduce_mean(x, axes):
    """Arithmetic mean over ``axes``; reduced axes are removed.

    An empty axis set is a no-op and returns the input unchanged.
    """
    x = np.asarray(x)
    axes = tuple(axes)
    if not axes:
        return x
    for axis in axes:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"reduce_mean: axis {axis} invalid for shape {x.shape}")
    out = x.mean(axis=axes)
    ensure_finite(out, "reduce_mean")
    return np.asarray(out)


def relu(x):
    return np.maximum(x, 0)


def onehot(labels, num_classes, dtype=np.float64):
    """Integer class labels -> one-hot rows."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1D, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ShapeError(f"labels out of range for {num_classes} classes")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def fan_in_uniform(rng, shape, fan_in, dtype):
    """Kaiming-style fan-in scaled uniform init: U(-sqrt(6/fan_in), +)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
