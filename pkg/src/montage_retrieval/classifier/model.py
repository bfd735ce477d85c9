"""Residual CNN over 1-channel montages with 2 output logits.

Two presets exist. ``micro`` is a small basic-block network sized for CPU
training; ``resnet50`` follows the 50-layer bottleneck topology (without
batch normalization). Both are built from an :class:`ArchitectureDescriptor`
so tests can build tiny variants of the same code path.
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidDescriptor, ShapeMismatch
from . import layers as L

N_CLASSES = 2
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ArchitectureDescriptor:
    preset: str
    input_side: int
    stem_width: int
    stem_kernel: int
    stem_stride: int
    stem_pool: bool
    block: str  # "basic" | "bottleneck"
    stage_widths: tuple
    stage_blocks: tuple
    stage_strides: tuple

    def __post_init__(self):
        n = len(self.stage_widths)
        if not (n == len(self.stage_blocks) == len(self.stage_strides)) or n == 0:
            raise InvalidDescriptor("stage lists must be non-empty and equally long")
        if self.block not in ("basic", "bottleneck"):
            raise InvalidDescriptor(f"unknown block type {self.block!r}")
        if min(self.stage_blocks) < 1 or min(self.stage_widths) < 1 or min(self.stage_strides) < 1:
            raise InvalidDescriptor("stage entries must be positive")
        if self.block == "bottleneck" and any(w % 4 for w in self.stage_widths):
            raise InvalidDescriptor("bottleneck widths must be divisible by 4")
        if self.input_side < 1 or self.stem_width < 1 or self.stem_kernel % 2 == 0:
            raise InvalidDescriptor("bad stem or input side")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("stage_widths", "stage_blocks", "stage_strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            d = dict(d)
            for k in ("stage_widths", "stage_blocks", "stage_strides"):
                d[k] = tuple(d[k])
            return cls(**d)
        except (TypeError, KeyError) as e:
            raise InvalidDescriptor(str(e)) from e

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def micro(input_side=128):
    return ArchitectureDescriptor("micro", input_side, 8, 3, 1, False, "basic",
                                  (8, 16, 32), (2, 2, 2), (2, 2, 2))


def resnet50(input_side=512):
    return ArchitectureDescriptor("resnet50", input_side, 64, 7, 2, True, "bottleneck",
                                  (256, 512, 1024, 2048), (3, 4, 6, 3), (1, 2, 2, 2))


PRESETS = {"micro": micro, "resnet50": resnet50}


def preset(name, input_side=None):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise InvalidDescriptor(f"unknown preset {name!r}") from None
    return factory() if input_side is None else factory(input_side)


def layer_specs(arch: ArchitectureDescriptor):
    """List of ``(name, out, in, kernel)`` for every conv/linear layer."""
    specs = [("stem", arch.stem_width, 1, arch.stem_kernel)]
    c = arch.stem_width
    for s, (width, nblocks, stride) in enumerate(zip(arch.stage_widths, arch.stage_blocks, arch.stage_strides)):
        for b in range(nblocks):
            st = stride if b == 0 else 1
            p = f"s{s}.b{b}"
            if arch.block == "basic":
                specs += [(p + ".conv1", width, c, 3), (p + ".conv2", width, width, 3)]
            else:
                mid = width // 4
                specs += [(p + ".conv1", mid, c, 1), (p + ".conv2", mid, mid, 3),
                          (p + ".conv3", width, mid, 1)]
            if st != 1 or c != width:
                specs.append((p + ".proj", width, c, 1))
            c = width
    specs.append(("head", N_CLASSES, c, None))
    return specs


def _init_bound(fan_in):
    # He-uniform: var = 2 / fan_in
    return np.sqrt(6.0 / fan_in)


@dataclass
class Model:
    arch: ArchitectureDescriptor
    params: OrderedDict
    provenance: dict = field(default_factory=dict)

    def copy(self):
        return Model(self.arch, OrderedDict((k, v.copy()) for k, v in self.params.items()),
                     dict(self.provenance))

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))


def init_model(arch: ArchitectureDescriptor, seed=0) -> Model:
    """Seeded fan-in uniform weights, zero biases."""
    if not isinstance(arch, ArchitectureDescriptor):
        raise InvalidDescriptor("expected an ArchitectureDescriptor")
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, out, inp, k in layer_specs(arch):
        if k is None:
            shape, fan_in = (out, inp), inp
            bound = np.sqrt(1.0 / fan_in)
        else:
            shape, fan_in = (out, inp, k, k), inp * k * k
            bound = _init_bound(fan_in)
        params[name + ".w"] = rng.uniform(-bound, bound, shape)
        params[name + ".b"] = np.zeros(out)
    return Model(arch, params, {"seed": int(seed)})


def _conv(params, name, x, stride, pad, tape):
    y, cache = L.conv2d_forward(x, params[name + ".w"], params[name + ".b"], stride, pad)
    tape.append(("conv", name, cache))
    return y


def _relu(x, tape):
    y, mask = L.relu_forward(x)
    tape.append(("relu", None, mask))
    return y


def _forward(model: Model, x: np.ndarray):
    """Forward pass on NHWC input; returns logits and the tape for backward."""
    arch, P = model.arch, model.params
    tape = []
    h = _conv(P, "stem", x, arch.stem_stride, arch.stem_kernel // 2, tape)
    h = _relu(h, tape)
    if arch.stem_pool:
        h, cache = L.maxpool_forward(h)
        tape.append(("pool", None, cache))
    for s, (nblocks, stride) in enumerate(zip(arch.stage_blocks, arch.stage_strides)):
        for b in range(nblocks):
            st = stride if b == 0 else 1
            p = f"s{s}.b{b}"
            tape.append(("fork", None, None))
            if arch.block == "basic":
                r = _relu(_conv(P, p + ".conv1", h, st, 1, tape), tape)
                r = _conv(P, p + ".conv2", r, 1, 1, tape)
            else:
                r = _relu(_conv(P, p + ".conv1", h, 1, 0, tape), tape)
                r = _relu(_conv(P, p + ".conv2", r, st, 1, tape), tape)
                r = _conv(P, p + ".conv3", r, 1, 0, tape)
            tape.append(("skip", p, None))
            skip = _conv(P, p + ".proj", h, st, 0, tape) if p + ".proj.w" in P else h
            tape.append(("join", None, None))
            h = _relu(r + skip, tape)
    pooled, shape = L.gap_forward(h)
    tape.append(("gap", None, shape))
    logits, xin = L.linear_forward(pooled, P["head.w"], P["head.b"])
    tape.append(("head", "head", xin))
    return logits, tape


def _backward(model: Model, tape, dlogits):
    P = model.params
    grads = {}
    g = dlogits
    pending = []
    for kind, name, cache in reversed(tape):
        if kind == "head":
            g, grads["head.w"], grads["head.b"] = L.linear_backward(g, cache, P["head.w"])
        elif kind == "gap":
            g = L.gap_backward(g, cache)
        elif kind == "relu":
            g = L.relu_backward(g, cache)
        elif kind == "pool":
            g = L.maxpool_backward(g, cache)
        elif kind == "conv":
            g, grads[name + ".w"], grads[name + ".b"] = L.conv2d_backward(g, cache)
        elif kind == "join":
            # d(r + skip): park a copy for the branch, carry g down the skip path
            pending.append(g)
        elif kind == "skip":
            g, skip_grad = pending.pop(), g
            pending.append(skip_grad)
        elif kind == "fork":
            g = g + pending.pop()
    return grads


def to_nhwc(batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ShapeMismatch(f"expected (batch, 1, rows, cols), got {batch.shape}")
    return batch.transpose(0, 2, 3, 1)


def _check_side(model, batch):
    side = model.arch.input_side
    if batch.shape[2:] != (side, side):
        raise ShapeMismatch(f"input {batch.shape[2:]} does not match input side {side}")


def forward(model: Model, batch) -> np.ndarray:
    """Logits ``(batch, 2)`` for an NCHW batch with one channel."""
    batch = np.asarray(batch)
    x = to_nhwc(batch)
    _check_side(model, batch)
    return _forward(model, x)[0]


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def weighted_ce(logits, labels, weights=(1.0, 10.0), return_grad=False):
    """Class-weighted cross-entropy, normalised by the summed sample weights."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("class weights must be positive")
    n = logits.shape[0]
    logp = log_softmax(logits)
    picked = logp[np.arange(n), labels]
    floored = picked < np.log(PROB_FLOOR)
    sw = weights[labels]
    total = sw.sum()
    loss = float(np.sum(sw * -np.maximum(picked, np.log(PROB_FLOOR))) / total)
    if not return_grad:
        return loss
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    d *= (sw * ~floored / total)[:, None]
    return loss, d


def loss_and_grads(model: Model, batch, labels, weights=(1.0, 10.0)):
    batch = np.asarray(batch)
    x = to_nhwc(batch)
    _check_side(model, batch)
    if len(labels) != x.shape[0]:
        raise ShapeMismatch("labels and batch differ in length")
    logits, tape = _forward(model, x)
    loss, dlogits = weighted_ce(logits, labels, weights, return_grad=True)
    return loss, _backward(model, tape, dlogits)


def backward(model: Model, batch, labels, weights=(1.0, 10.0)):
    """Exact gradients of the batch loss for every parameter."""
    return loss_and_grads(model, batch, labels, weights)[1]
