"""Layer abstractions, the MicroResNet model, and checkpoint serialization.

The network is partitioned into named layer groups (stem, stage1..3, head)
that freeze/unfreeze together and carry their own learning rate. A frozen
group never changes: its parameters are skipped by the optimizer and its
batchnorm layers run on (constant) running statistics even inside a
training pass.
"""

from __future__ import annotations

import copy
import hashlib
import struct

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TTCK"
CHECKPOINT_VERSION = 1


class Layer:
    """Base layer: stateless unless a subclass adds parameters."""

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def params(self):
        """Trainable (name, Tensor) pairs."""
        return []

    def arrays(self):
        """All persistent (name, ndarray) pairs, including running stats."""
        return [(name, p.data) for name, p in self.params()]


class Conv2d(Layer):
    """Bias-free convolution; He-initialized (a batchnorm always follows)."""

    def __init__(self, in_channels, out_channels, ksize, stride, padding, rng):
        fan_in = in_channels * ksize * ksize
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, ksize, ksize))
        self.weight = Tensor(w, requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x, training):
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def params(self):
        return [("weight", self.weight)]


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.momentum, self.eps, training=training)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def arrays(self):
        return [("gamma", self.gamma.data), ("beta", self.beta.data),
                ("running_mean", self.running_mean), ("running_var", self.running_var)]


class ReLU(Layer):
    def forward(self, x, training):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, kernel):
        self.kernel = kernel

    def forward(self, x, training):
        return T.maxpool2d(x, self.kernel)


class GlobalAvgPool(Layer):
    def forward(self, x, training):
        return T.global_avgpool(x)


class Flatten(Layer):
    def forward(self, x, training):
        return T.flatten(x)


class Dense(Layer):
    """Fully connected layer with small-uniform weight init."""

    def __init__(self, in_features, out_features, rng, init_scale=0.01):
        w = rng.uniform(-init_scale, init_scale, size=(in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x, training):
        return T.add(T.matmul(x, self.weight), self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ResidualBlock(Layer):
    """conv-BN-relu-conv-BN branch plus identity skip, no output relu.

    With both conv weights at zero and default BN affine the block is
    exactly the identity map.
    """

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x, training):
        y = self.bn1.forward(self.conv1.forward(x, training), training)
        y = self.bn2.forward(self.conv2.forward(T.relu(y), training), training)
        return T.add(x, y)

    def _children(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]

    def params(self):
        return [(f"{cn}.{n}", p) for cn, child in self._children() for n, p in child.params()]

    def arrays(self):
        return [(f"{cn}.{n}", a) for cn, child in self._children() for n, a in child.arrays()]


class LayerGroup:
    """Ordered layers sharing one trainable flag and one learning rate."""

    def __init__(self, name, layers, trainable=True, learning_rate=1e-3):
        self.name = name
        self.layers = layers
        self.trainable = trainable
        self.learning_rate = learning_rate

    def forward(self, x, training):
        # frozen groups behave as in evaluation even during training passes
        mode = training and self.trainable
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def params(self):
        return [(f"{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.params()]

    def arrays(self):
        return [(f"{i}.{n}", a) for i, layer in enumerate(self.layers) for n, a in layer.arrays()]

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        for _, p in self.params():
            p.requires_grad = self.trainable


class Model:
    """Layer groups ending in exactly one head group."""

    def __init__(self, groups, num_classes, input_shape, width):
        self.groups = groups
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.width = width

    @property
    def head(self):
        return self.groups[-1]

    @property
    def base_group_names(self):
        return [g.name for g in self.groups[:-1]]

    @property
    def group_names(self):
        return [g.name for g in self.groups]

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise ConfigurationError(f"unknown layer group {name!r}; have {self.group_names}")

    def forward(self, x, training=False):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1:] != self.input_shape:
            raise DimensionError(
                f"model input {x.data.shape} does not match N x {self.input_shape}")
        for g in self.groups:
            x = g.forward(x, training)
        return x

    def parameters(self, trainable_only=False):
        """Yield (group_name, path, Tensor) for every parameter."""
        for g in self.groups:
            if trainable_only and not g.trainable:
                continue
            for path, p in g.params():
                yield g.name, f"{g.name}.{path}", p

    def parameter_count(self):
        return sum(p.data.size for _, _, p in self.parameters())

    def zero_grad(self):
        for _, _, p in self.parameters():
            p.zero_grad()

    def named_arrays(self):
        for g in self.groups:
            for path, a in g.arrays():
                yield f"{g.name}.{path}", a

    def state_dict(self):
        return {name: a.copy() for name, a in self.named_arrays()}

    def load_state_dict(self, state):
        for name, a in self.named_arrays():
            if name not in state:
                raise ConfigurationError(f"checkpoint missing array {name!r}")
            src = state[name]
            if src.shape != a.shape:
                raise DimensionError(f"array {name!r}: checkpoint {src.shape} != model {a.shape}")
            np.copyto(a, src)

    def set_group_lrs(self, rates):
        """Assign per-group rates, base to head; must be non-decreasing."""
        if len(rates) != len(self.groups):
            raise ConfigurationError(f"{len(rates)} rates for {len(self.groups)} groups")
        for earlier, later in zip(rates, rates[1:]):
            if later < earlier:
                raise ConfigurationError(f"group learning rates must be non-decreasing: {rates}")
        for g, lr in zip(self.groups, rates):
            g.learning_rate = float(lr)

    def clone(self):
        return copy.deepcopy(self)


def set_trainable(model: Model, group_names, flag: bool):
    """Set the trainable flag (and BN stat updates) for the named groups."""
    for name in group_names:
        model.group(name).set_trainable(flag)


def freeze_base(model: Model):
    set_trainable(model, model.base_group_names, False)
    model.head.set_trainable(True)


def unfreeze_all(model: Model):
    set_trainable(model, model.group_names, True)


def build_micro_resnet(input_shape, num_classes, width=8, seed=0):
    """Stem conv, three 2-block residual stages, global pool, dense head.

    Stages 2 and 3 open with a stride-2 channel-doubling transition, so
    spatial extent falls 4x from input to head.
    """
    c, h, w = input_shape
    if h < 16 or w < 16:
        raise ConfigurationError(f"input {h}x{w} too small for the pooling pyramid (need >= 16)")
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    if width < 1:
        raise ConfigurationError(f"width must be positive, got {width}")
    rng = np.random.default_rng(seed)
    stem = LayerGroup("stem", [Conv2d(c, width, 3, 1, 1, rng), BatchNorm2d(width), ReLU()])
    stage1 = LayerGroup("stage1", [ResidualBlock(width, rng), ResidualBlock(width, rng)])
    stage2 = LayerGroup("stage2", [
        Conv2d(width, 2 * width, 3, 2, 1, rng), BatchNorm2d(2 * width), ReLU(),
        ResidualBlock(2 * width, rng), ResidualBlock(2 * width, rng)])
    stage3 = LayerGroup("stage3", [
        Conv2d(2 * width, 4 * width, 3, 2, 1, rng), BatchNorm2d(4 * width), ReLU(),
        ResidualBlock(4 * width, rng), ResidualBlock(4 * width, rng)])
    head = LayerGroup("head", [GlobalAvgPool(), Dense(4 * width, num_classes, rng)])
    model = Model([stem, stage1, stage2, stage3, head], num_classes, input_shape, width)
    for g in model.groups:
        g.set_trainable(True)
    return model


def replace_head(model: Model, new_num_classes, seed=0):
    """Swap the dense head for a fresh one; base groups stay untouched."""
    if new_num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {new_num_classes}")
    rng = np.random.default_rng(seed)
    head = LayerGroup("head", [GlobalAvgPool(), Dense(4 * model.width, new_num_classes, rng)],
                      trainable=model.head.trainable, learning_rate=model.head.learning_rate)
    head.set_trainable(head.trainable)
    model.groups[-1] = head
    model.num_classes = new_num_classes
    return model


def state_checksum(model: Model, group_names=None):
    """SHA-256 over the raw bytes of the selected groups' arrays."""
    digest = hashlib.sha256()
    wanted = set(group_names) if group_names is not None else None
    for g in model.groups:
        if wanted is not None and g.name not in wanted:
            continue
        for path, a in g.arrays():
            digest.update(f"{g.name}.{path}".encode())
            digest.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return digest.hexdigest()


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_str(buf, off):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off:off + n].decode("utf-8"), off + n


def save_checkpoint(model: Model, path):
    """Write the model to a byte-reproducible flat binary container."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    c, h, w = model.input_shape
    parts.append(struct.pack("<5I", c, h, w, model.num_classes, model.width))
    parts.append(struct.pack("<I", len(model.groups)))
    for g in model.groups:
        parts.append(_pack_str(g.name))
        parts.append(struct.pack("<Bd", int(g.trainable), g.learning_rate))
    arrays = list(model.named_arrays())
    parts.append(struct.pack("<I", len(arrays)))
    for name, a in arrays:
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{max(a.ndim, 1)}I", *(a.shape or (1,))))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    from .report_io import write_atomic_bytes
    write_atomic_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Rebuild a Model from a checkpoint file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    c, h, w, num_classes, width = struct.unpack_from("<5I", buf, off)
    off += 20
    (n_groups,) = struct.unpack_from("<I", buf, off)
    off += 4
    group_meta = []
    for _ in range(n_groups):
        name, off = _read_str(buf, off)
        trainable, lr = struct.unpack_from("<Bd", buf, off)
        off += 9
        group_meta.append((name, bool(trainable), lr))
    (n_arrays,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(n_arrays):
        name, off = _read_str(buf, off)
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{max(ndim, 1)}I", buf, off)
        off += 4 * max(ndim, 1)
        shape = dims[:ndim]
        count = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        state[name] = a.astype(np.float64)
    model = build_micro_resnet((c, h, w), num_classes, width=width, seed=0)
    model.load_state_dict(state)
    for g, (name, trainable, lr) in zip(model.groups, group_meta):
        if g.name != name:
            raise ConfigurationError(f"{path}: group order mismatch ({g.name} vs {name})")
        g.set_trainable(trainable)
        g.learning_rate = lr
    return model
