"""Declarative network specs, builder with He initialization, checkpoints.

A spec is a stem convolution, a sequence of stages (optional 3x3/stride-2
max pool, then residual blocks at a fixed width) and a global-average-pool +
fully-connected head. The named specs cover the reference CIFAR depths
(20/44), the deeper multi-dataset net (34), and two desk-scale reductions
that train in seconds.

Weighted-layer accounting: 1 stem conv + 2 convs per block + 1 fc.

Checkpoint format (external interface, little-endian):
    magic "BLNS" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | name bytes | u8 rank | u32 dims[rank]
                | raw float32 payload
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .batchnorm import BatchNorm
from .layers import Conv, Fc, GlobalAvgPool, MaxPool, Relu, ResidualBlock
from .tensor import DTYPE, require_finite


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    pool: bool = True


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stem_width: int
    stages: tuple
    classes: int = 10
    in_channels: int = 3
    stem_kernel: int = 3
    stem_stride: int = 1

    def weighted_layers(self):
        return 2 + 2 * sum(s.blocks for s in self.stages)


MODEL_SPECS = {
    "cifar-20": ModelSpec("cifar-20", 64, (StageSpec(3, 64, pool=False),
                                           StageSpec(3, 128), StageSpec(3, 256))),
    "cifar-44": ModelSpec("cifar-44", 64, (StageSpec(7, 64, pool=False),
                                           StageSpec(7, 128), StageSpec(7, 256))),
    "imagenet-34": ModelSpec("imagenet-34", 96, (StageSpec(3, 96), StageSpec(4, 192),
                                                 StageSpec(6, 384), StageSpec(3, 768)),
                             stem_kernel=5),
    "cifar-8": ModelSpec("cifar-8", 16, (StageSpec(1, 16, pool=False),
                                         StageSpec(1, 32), StageSpec(1, 64))),
    "toy-6": ModelSpec("toy-6", 16, (StageSpec(1, 16, pool=False),
                                     StageSpec(1, 32))),
}


def get_model_spec(name, classes=None, in_channels=None):
    if name not in MODEL_SPECS:
        raise ValueError(f"unknown model spec {name!r}; have {sorted(MODEL_SPECS)}")
    spec = MODEL_SPECS[name]
    if classes is not None:
        spec = replace(spec, classes=classes)
    if in_channels is not None:
        spec = replace(spec, in_channels=in_channels)
    return spec


def _he_conv(rng, out_c, in_c, k, dtype):
    if rng is None:
        return np.zeros((out_c, in_c, k, k), dtype=dtype)
    std = np.sqrt(2.0 / (in_c * k * k))
    return (rng.gaussian((out_c, in_c, k, k)) * std).astype(dtype)


def build(spec, rng, dtype=DTYPE):
    """Construct a Network from a spec. rng=None gives zero weights (used
    when a checkpoint will overwrite them)."""
    if spec.classes < 2:
        raise ValueError("spec needs at least 2 classes")
    if any(s.blocks < 1 or s.width < 1 for s in spec.stages):
        raise ValueError("stage block counts and widths must be positive")
    layers = []
    k = spec.stem_kernel
    layers.append(("stem.conv", Conv(_he_conv(rng, spec.stem_width, spec.in_channels,
                                              k, dtype),
                                     stride=spec.stem_stride, pad=k // 2)))
    layers.append(("stem.bn", BatchNorm(spec.stem_width, dtype=dtype)))
    layers.append(("stem.relu", Relu()))
    width = spec.stem_width
    for i, stage in enumerate(spec.stages, start=1):
        if stage.pool:
            layers.append((f"s{i}.pool", MaxPool(3, 2)))
        for j in range(1, stage.blocks + 1):
            conv1 = Conv(_he_conv(rng, stage.width, width, 3, dtype), pad=1)
            bn1 = BatchNorm(stage.width, dtype=dtype)
            conv2 = Conv(_he_conv(rng, stage.width, stage.width, 3, dtype), pad=1)
            bn2 = BatchNorm(stage.width, dtype=dtype)
            layers.append((f"s{i}.b{j}", ResidualBlock(conv1, bn1, conv2, bn2)))
            width = stage.width
    layers.append(("head.gap", GlobalAvgPool()))
    if rng is None:
        fc_w = np.zeros((spec.classes, width), dtype=dtype)
    else:
        fc_w = (rng.gaussian((spec.classes, width)) * np.sqrt(2.0 / width)).astype(dtype)
    fc_b = np.zeros(spec.classes, dtype=dtype)
    layers.append(("head.fc", Fc(fc_w, fc_b)))
    return Network(spec, layers)


class Network:
    """Ordered layer composition with a name -> tensor parameter registry.

    Single-owner while training (BN running stats mutate in TRAIN mode);
    frozen networks are read-only and shareable.
    """

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers

    def forward(self, x, mode, need_cache=True):
        caches = []
        h = x
        for _, layer in self.layers:
            h, cache = layer.forward(h, mode)
            if need_cache:
                caches.append(cache)
        return h, caches

    def backward(self, caches, grad_logits):
        grads = {}
        g = grad_logits
        for (name, layer), cache in zip(reversed(self.layers), reversed(caches)):
            g, layer_grads = layer.backward(cache, g)
            for key, val in layer_grads.items():
                grads[f"{name}.{key}"] = val
        return g, grads

    def params(self):
        out = {}
        for name, layer in self.layers:
            for key, val in layer.params().items():
                out[f"{name}.{key}"] = val
        return out

    def buffers(self):
        out = {}
        for name, layer in self.layers:
            for key, val in layer.buffers().items():
                out[f"{name}.{key}"] = val
        return out

    def decay_param_names(self):
        """Weight-decay targets: conv and fc weights, never BN gamma/beta
        or the fc bias."""
        return {name for name in self.params() if name.endswith(".w")}

    def norm_layers(self):
        out = []
        for name, layer in self.layers:
            if isinstance(layer, BatchNorm):
                out.append((name, layer))
            elif isinstance(layer, ResidualBlock):
                out.append((f"{name}.bn1", layer.bn1))
                out.append((f"{name}.bn2", layer.bn2))
        return out

    def bn_batch_stats(self, caches):
        """Per-BN (mean, var) of the batch that produced these caches."""
        stats = {}
        for (name, layer), cache in zip(self.layers, caches):
            if isinstance(layer, BatchNorm):
                stats[name] = cache[3]
            elif isinstance(layer, ResidualBlock):
                stats[f"{name}.bn1"] = cache[1][3]
                stats[f"{name}.bn2"] = cache[4][3]
        return stats

    def state_tensors(self):
        """(name, array) pairs in fixed order: parameters, running stats,
        BN batch counters (stored as one-element tensors)."""
        items = list(self.params().items()) + list(self.buffers().items())
        for name, bn in self.norm_layers():
            items.append((f"{name}.num_batches_tracked",
                          np.asarray([bn.num_batches_tracked], dtype=np.float32)))
        return items


CHECKPOINT_MAGIC = b"BLNS"
CHECKPOINT_VERSION = 1


def save_checkpoint(network, path):
    tensors = network.state_tensors()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors:
            require_finite(arr, name)
            raw = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            fh.write(raw.tobytes())


def read_checkpoint_tensors(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims))
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise ValueError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tensors


def load_checkpoint(path, spec):
    """Rebuild a Network for spec and fill it from the checkpoint.

    Raises on magic/version mismatch and on any name or shape disagreement
    between the file and the spec's parameter registry.
    """
    tensors = read_checkpoint_tensors(path)
    network = build(spec, rng=None)
    expected = dict(network.state_tensors())
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise ValueError(f"checkpoint does not match spec {spec.name!r}: "
                         f"missing={missing[:3]} unexpected={unexpected[:3]}")
    registry = dict(network.params().items())
    registry.update(network.buffers().items())
    counters = {f"{name}.num_batches_tracked": bn for name, bn in network.norm_layers()}
    for name, value in tensors.items():
        if name in counters:
            counters[name].num_batches_tracked = int(round(float(value[0])))
            continue
        target = registry[name]
        if target.shape != value.shape:
            raise ValueError(f"shape mismatch for {name!r}: spec {target.shape}, "
                             f"file {value.shape}")
        target[...] = value
    return network


def predict_logits(network, images, mode, batch_size=256):
    """Forward in fixed-order slices; no caches retained."""
    chunks = []
    for start in range(0, len(images), batch_size):
        logits, _ = network.forward(images[start:start + batch_size], mode,
                                    need_cache=False)
        chunks.append(logits)
    return np.concatenate(chunks, axis=0)
