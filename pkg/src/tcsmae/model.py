"""Five-level convolutional U-Net with per-level projection heads.

The encoder halves the spatial size at every level (stride-2 conv followed by
a stride-1 conv, both ReLU). The decoder upsamples by nearest neighbour,
concatenates the matching encoder level and convolves. Projection heads
flatten one pyramid level and apply a single linear layer.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor, ops
from .validation import check_resolution

LEVELS = 5
HEADS = ("recon", "binary", "multiclass")
SCALE_LEVELS = {0: (), 1: (5,), 2: (4, 5), 3: (3, 4, 5)}


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (8, 16, 32, 64, 128)
    in_channels: int = 3
    resolution: int = 64
    head: str = "recon"
    n_classes: int = 2
    scales: int = 2
    embed_dim: int = 128
    seed: int = 0
    recon_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != LEVELS:
            raise ValueError(f"encoder needs exactly {LEVELS} channel widths, got {len(self.channels)}")
        check_resolution(self.resolution, self.resolution, 2 ** LEVELS)
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.scales not in SCALE_LEVELS:
            raise ValueError(f"scales must be 0, 1, 2 or 3, got {self.scales}")
        if self.head == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass head needs n_classes >= 2")

    @property
    def out_channels(self):
        return {"recon": self.recon_channels, "binary": 1, "multiclass": self.n_classes}[self.head]

    @property
    def projection_levels(self):
        return SCALE_LEVELS[self.scales]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _stream(seed, name):
    # independent, name-keyed stream so adding a parameter never shifts the others
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class UNet:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self._init_trunk()
            self._init_head()
            self._init_projection()

    # construction

    def _conv(self, name, c_in, c_out, k=3):
        w = _he(_stream(self.config.seed, name), (c_out, c_in, k, k), c_in * k * k)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")

    def _init_trunk(self):
        ch = self.config.channels
        c_prev = self.config.in_channels
        for lvl in range(1, LEVELS + 1):
            c = ch[lvl - 1]
            self._conv(f"encoder.{lvl}.down", c_prev, c)
            self._conv(f"encoder.{lvl}.conv", c, c)
            c_prev = c
        for lvl in range(LEVELS - 1, 0, -1):
            self._conv(f"decoder.{lvl}.conv", ch[lvl] + ch[lvl - 1], ch[lvl - 1])
        self._conv("decoder.0.conv", ch[0], ch[0])

    def _init_head(self, seed=None):
        seed = self.config.seed if seed is None else seed
        c_in, c_out = self.config.channels[0], self.config.out_channels
        if self.config.head == "recon":
            w = _stream(seed, "head.recon").normal(0.0, np.sqrt(1.0 / c_in), (c_out, c_in, 1, 1))
        else:
            # segmentation heads start at zero: pretrained decoder activations can be
            # large, and a random head on top of them starts finetuning saturated
            w = np.zeros((c_out, c_in, 1, 1))
        self.params["head.weight"] = Tensor(w, requires_grad=True, name="head.weight")
        self.params["head.bias"] = Tensor(np.zeros(c_out), requires_grad=True, name="head.bias")

    def _init_projection(self):
        if self.config.head != "recon":
            return
        res = self.config.resolution
        for lvl in self.config.projection_levels:
            side = res // 2 ** lvl
            fan_in = self.config.channels[lvl - 1] * side * side
            # uniform +-1/sqrt(fan_in) for weight and bias; a nonzero bias keeps the
            # embedding of an all-masked (all-zero) input away from the zero vector
            rng = _stream(self.config.seed, f"mep.{lvl}")
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (self.config.embed_dim, fan_in))
            b = rng.uniform(-bound, bound, self.config.embed_dim)
            self.params[f"mep.{lvl}.weight"] = Tensor(w, requires_grad=True, name=f"mep.{lvl}.weight")
            self.params[f"mep.{lvl}.bias"] = Tensor(b, requires_grad=True, name=f"mep.{lvl}.bias")

    # forward pieces

    def _apply_conv(self, name, x, stride=1, padding=1):
        return ops.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                          stride=stride, padding=padding)

    def encode(self, x):
        """Return the five pyramid levels F1..F5 (index 0 is F1)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        h, w = x.shape[-2:]
        check_resolution(h, w, 2 ** LEVELS)
        feats = []
        for lvl in range(1, LEVELS + 1):
            x = ops.relu(self._apply_conv(f"encoder.{lvl}.down", x, stride=2))
            x = ops.relu(self._apply_conv(f"encoder.{lvl}.conv", x))
            feats.append(x)
        return feats

    def decode_logits(self, feats):
        d = feats[-1]
        for lvl in range(LEVELS - 1, 0, -1):
            d = ops.concat([ops.upsample2x(d), feats[lvl - 1]], axis=1)
            d = ops.relu(self._apply_conv(f"decoder.{lvl}.conv", d))
        d = ops.relu(self._apply_conv("decoder.0.conv", ops.upsample2x(d)))
        return self._apply_conv("head", d, padding=0)

    def decode(self, feats):
        logits = self.decode_logits(feats)
        if self.config.head == "multiclass":
            return ops.softmax(logits, axis=1)
        return ops.sigmoid(logits)

    def project(self, feats):
        """One embedding (N, embed_dim) per configured pyramid level."""
        out = []
        for lvl in self.config.projection_levels:
            out.append(ops.fully_connected(ops.flatten(feats[lvl - 1]),
                                           self.params[f"mep.{lvl}.weight"],
                                           self.params[f"mep.{lvl}.bias"]))
        return out

    def forward(self, x):
        return self.decode(self.encode(x))

    # parameter bookkeeping

    def trunk_names(self):
        return [n for n in self.params if n.startswith(("encoder.", "decoder."))]

    def head_names(self):
        return [n for n in self.params if n.startswith("head.")]

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_trunk(self, arrays):
        """Copy encoder/decoder weights in; any missing or misshapen name is an error."""
        problems = []
        for name in self.trunk_names():
            if name not in arrays:
                problems.append(f"{name} (missing)")
            elif np.shape(arrays[name]) != self.params[name].shape:
                problems.append(f"{name} (shape {np.shape(arrays[name])} != {self.params[name].shape})")
        if problems:
            raise ValueError("checkpoint does not match architecture: " + ", ".join(problems))
        for name in self.trunk_names():
            self.params[name].data[...] = arrays[name]

    def load_state(self, arrays):
        problems = sorted(set(self.params) ^ set(arrays))
        problems += [n for n in self.params if n in arrays and np.shape(arrays[n]) != self.params[n].shape]
        if problems:
            raise ValueError("checkpoint does not match architecture: " + ", ".join(problems))
        for name, p in self.params.items():
            p.data[...] = arrays[name]

    def trunk_checksum(self):
        crc = 0
        for name in self.trunk_names():
            crc = zlib.crc32(self.params[name].data.tobytes(), crc)
        return crc

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def describe(self):
        """Rows of (name, shape, size) for every parameter."""
        return [(n, tuple(p.shape), int(p.data.size)) for n, p in self.params.items()]


def swap_head(model, head, n_classes=None, seed=None):
    """Replace the output layer; trunk parameter objects are carried over untouched.

    Projection heads only exist in reconstruction mode and are dropped
    otherwise.
    """
    n_classes = model.config.n_classes if n_classes is None else n_classes
    cfg = replace(model.config, head=head, n_classes=n_classes)
    new = UNet.__new__(UNet)
    new.config = cfg
    new.params = {n: model.params[n] for n in model.trunk_names()}
    new._init_head(seed)
    if head == "recon":
        new._init_projection()
    return new
