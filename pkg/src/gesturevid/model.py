"""Architecture builders, whole-network execution, and checkpoints.

Four variants share one stage schedule (widths like [8, 16, 32, 64], even
stages are conv+BN+ReLU units, odd stages are residual blocks):

  proposed  factored (2+1)D convs, trilinear resize between stages
  3d        full 3D convs, same resize schedule
  2p1d      factored convs, stride-2 downsampling instead of resizing
  2d        center frame only, (1,3,3) convs, resize schedule with T pinned

Every variant ends with global average pooling, flatten, dropout, and a
dense classifier head.
"""

import dataclasses
import json
import os

import numpy as np

from . import io_ustf
from .errors import ConfigError, DataError, ShapeError
from .layers import (BatchNorm, CenterFrame, Conv2Plus1D, Conv3D, Dense,
                     Dropout, Flatten, GlobalAvgPool, ReLU, ResidualBlock,
                     ResizeVideo)

VARIANTS = ("2d", "3d", "2p1d", "proposed")

_VARIANT_ALIASES = {
    "2d": "2d", "cnn2d": "2d",
    "3d": "3d", "cnn3d": "3d",
    "2p1d": "2p1d", "cnn2p1d": "2p1d", "cnn2p1d_base": "2p1d",
    "proposed": "proposed",
}

CHECKPOINT_FORMAT = "gesturevid-checkpoint"
CHECKPOINT_VERSION = 1


def canonical_variant(name):
    key = str(name).strip().lower().replace("-", "_")
    if key not in _VARIANT_ALIASES:
        raise ConfigError(
            f"unknown model variant {name!r}; expected one of {VARIANTS}")
    return _VARIANT_ALIASES[key]


@dataclasses.dataclass
class ModelSpec:
    """Everything needed to rebuild a network deterministically."""

    variant: str
    num_classes: int = 12
    input_shape: tuple = (1, 16, 64, 64)  # (C, T, H, W)
    stage_filters: tuple = (8, 16, 32, 64)
    seed: int = 0
    dropout_rate: float = 0.5
    interleaved_relu: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.num_classes = int(self.num_classes)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 4 or any(v < 1 for v in self.input_shape):
            raise ConfigError(
                f"input_shape must be 4 positive extents (C,T,H,W), got {self.input_shape}")
        self.stage_filters = tuple(int(v) for v in self.stage_filters)
        if not self.stage_filters or any(v < 1 for v in self.stage_filters):
            raise ConfigError("stage_filters must be a nonempty list of widths >= 1")
        if any(b < a for a, b in zip(self.stage_filters, self.stage_filters[1:])):
            raise ConfigError("stage_filters must be nondecreasing")
        self.seed = int(self.seed)
        if not 0 <= float(self.dropout_rate) < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")

    def to_json(self):
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stage_filters"] = list(self.stage_filters)
        return d

    @classmethod
    def from_json(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)


class Network:
    """Ordered layer list with a flat parameter registry."""

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = list(layers)
        self.dtype = np.dtype(spec.dtype)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        # registry bijection check: flat keys must be unique
        keys = list(self.param_items())
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate parameter names in registry")

    def _flat(self, which):
        out = {}
        for layer in self.layers:
            for key, value in getattr(layer, which)().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def param_items(self):
        return self._flat("params")

    def grad_items(self):
        return self._flat("grads")

    def buffer_items(self):
        return self._flat("buffers")

    @property
    def dropout_layer(self):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                return layer
        return None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {x.shape} does not match input shape "
                f"(N,)+{self.spec.input_shape}")
        for idx, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, training=training)
            except ShapeError as exc:
                raise ShapeError(f"layer {idx} ({layer.name}): {exc}") from exc
        return x

    def backward(self, grad_logits):
        g = np.asarray(grad_logits, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                # the first trainable layer skips its input gradient;
                # nothing upstream has parameters
                break
        return self.grad_items()


def _stage_stride(variant, i, n_stages):
    if variant != "2p1d" or i == 0:
        return (1, 1, 1)
    return (2, 2, 2) if i == n_stages - 1 else (1, 2, 2)


def build(spec: ModelSpec) -> Network:
    """Construct the layer graph for one variant, seeded end to end."""
    rng = np.random.default_rng(spec.seed)
    dropout_rng = np.random.default_rng((spec.seed, 1))
    dtype = np.dtype(spec.dtype)
    variant = spec.variant
    c, t, h, w = spec.input_shape
    layers = []
    if variant == "2d":
        layers.append(CenterFrame(name="center"))
        t = 1
        kernel = (1, 3, 3)
        conv_kind = "3d"
    else:
        kernel = (3, 3, 3)
        conv_kind = "2p1d" if variant in ("2p1d", "proposed") else "3d"
    n = len(spec.stage_filters)
    cur = (t, h, w)
    c_prev = c
    for i, width in enumerate(spec.stage_filters):
        stride = _stage_stride(variant, i, n)
        if i % 2 == 0:
            if conv_kind == "2p1d":
                conv = Conv2Plus1D(c_prev, width, kernel, stride=stride,
                                   interleaved_relu=spec.interleaved_relu,
                                   rng=rng, dtype=dtype, name=f"s{i}_conv")
            else:
                conv = Conv3D(c_prev, width, kernel, stride=stride,
                              rng=rng, dtype=dtype, name=f"s{i}_conv")
            layers += [conv, BatchNorm(width, dtype=dtype, name=f"s{i}_bn"),
                       ReLU(name=f"s{i}_relu")]
        else:
            layers.append(ResidualBlock(
                c_prev, width, kernel, conv_kind=conv_kind, stride=stride,
                interleaved_relu=spec.interleaved_relu, rng=rng, dtype=dtype,
                name=f"s{i}_res"))
        cur = tuple(-(-length // s) for length, s in zip(cur, stride))
        c_prev = width
        if variant != "2p1d" and i <= n - 2:
            halve_t = (i == n - 2) and variant != "2d"
            target = (cur[0] // 2 if halve_t else cur[0], cur[1] // 2, cur[2] // 2)
            if min(target) < 1:
                raise ConfigError(
                    f"input {spec.input_shape} too small for the resize schedule "
                    f"(stage {i} would shrink {cur} to {target})")
            layers.append(ResizeVideo(target, name=f"s{i}_resize"))
            cur = target
    layers += [GlobalAvgPool(name="pool"), Flatten(name="flatten"),
               Dropout(spec.dropout_rate, rng=dropout_rng, name="dropout"),
               Dense(c_prev, spec.num_classes, rng=rng, dtype=dtype, name="head")]
    for layer in layers:
        if layer.params():
            # nothing with parameters sits upstream, so the input gradient
            # of the very first trainable layer is never consumed
            layer.skip_input_grad = True
            break
    return Network(spec, layers)


def count_params(net) -> int:
    """Trainable scalars: weights, biases, and BN affine terms."""
    return sum(int(p.size) for p in net.param_items().values())


def describe(net):
    """Per-layer output shape and parameter count from a probe forward."""
    x = np.zeros((1,) + net.spec.input_shape, dtype=net.dtype)
    rows = []
    for layer in net.layers:
        x = layer.forward(x, training=False)
        rows.append({"layer": layer.name,
                     "kind": type(layer).__name__,
                     "output_shape": list(x.shape),
                     "params": layer.param_count()})
    return rows


def format_describe(rows) -> str:
    lines = [f"{'layer':<12} {'kind':<14} {'output shape':<22} params"]
    total = 0
    for row in rows:
        shape = "x".join(str(v) for v in row["output_shape"])
        lines.append(f"{row['layer']:<12} {row['kind']:<14} {shape:<22} {row['params']}")
        total += row["params"]
    lines.append(f"total trainable parameters: {total}")
    return "\n".join(lines)


def save_checkpoint(net, out_dir):
    """Write spec + every parameter/buffer as USTF files plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "spec": net.spec.to_json(), "params": {}, "buffers": {}}
    for i, (name, arr) in enumerate(net.param_items().items()):
        fname = f"p{i:03d}.ustf"
        io_ustf.write_tensor(os.path.join(out_dir, fname), arr)
        manifest["params"][name] = fname
    for i, (name, arr) in enumerate(net.buffer_items().items()):
        fname = f"b{i:03d}.ustf"
        io_ustf.write_tensor(os.path.join(out_dir, fname), arr)
        manifest["buffers"][name] = fname
    path = os.path.join(out_dir, "model.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(ckpt_dir) -> Network:
    path = os.path.join(ckpt_dir, "model.json")
    if not os.path.isfile(path):
        raise DataError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version")
    spec = ModelSpec.from_json(manifest["spec"])
    net = build(spec)
    for kind, registry in (("params", net.param_items()),
                           ("buffers", net.buffer_items())):
        entries = manifest.get(kind, {})
        if set(entries) != set(registry):
            raise DataError(
                f"{path}: {kind} do not match the rebuilt network "
                f"(missing {sorted(set(registry) - set(entries))[:3]}, "
                f"extra {sorted(set(entries) - set(registry))[:3]})")
        for name, fname in entries.items():
            data = io_ustf.read_tensor(os.path.join(ckpt_dir, fname))
            target = registry[name]
            if data.shape != target.shape:
                raise DataError(
                    f"{path}: {name} has shape {data.shape}, expected {target.shape}")
            target[...] = data.astype(target.dtype, copy=False)
    return net
