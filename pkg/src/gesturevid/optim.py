"""Adam with moment-state serialization for exact training resume."""

import json
import os

import numpy as np

from . import io_ustf
from .errors import ConfigError, DataError, NumericError


class Adam:
    """Standard Adam; parameters are updated in place.

    A step either applies to every parameter or to none: all gradients are
    validated finite before the first moment update, and a bad gradient
    aborts with the offending parameter named.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("beta1/beta2 must be in [0, 1)")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params, grads):
        if set(params) != set(self.m) or set(grads) != set(self.m):
            raise ValueError("parameter/gradient keys do not match optimizer state")
        for name in self.m:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.m:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            params[name] -= update.astype(params[name].dtype, copy=False)

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        manifest = {"format": "gesturevid-adam", "version": 1,
                    "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                    "eps": self.eps, "t": self.t, "slots": {}}
        for i, name in enumerate(sorted(self.m)):
            mf, vf = f"m{i:03d}.ustf", f"v{i:03d}.ustf"
            io_ustf.write_tensor(os.path.join(out_dir, mf), self.m[name])
            io_ustf.write_tensor(os.path.join(out_dir, vf), self.v[name])
            manifest["slots"][name] = {"m": mf, "v": vf}
        path = os.path.join(out_dir, "adam.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, state_dir, params):
        path = os.path.join(state_dir, "adam.json")
        if not os.path.isfile(path):
            raise DataError(f"no optimizer state at {path}")
        with open(path) as fh:
            manifest = json.load(fh)
        if manifest.get("format") != "gesturevid-adam":
            raise DataError(f"{path}: not an optimizer state file")
        opt = cls(params, lr=manifest["lr"], beta1=manifest["beta1"],
                  beta2=manifest["beta2"], eps=manifest["eps"])
        slots = manifest["slots"]
        if set(slots) != set(opt.m):
            raise DataError(f"{path}: slot names do not match the parameters")
        opt.t = int(manifest["t"])
        for name, files in slots.items():
            for key, registry in (("m", opt.m), ("v", opt.v)):
                data = io_ustf.read_tensor(os.path.join(state_dir, files[key]))
                if data.shape != registry[name].shape:
                    raise DataError(f"{path}: {name}/{key} shape mismatch")
                registry[name][...] = data.astype(registry[name].dtype, copy=False)
        return opt
