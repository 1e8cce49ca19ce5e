"""Feed-forward reward-bonus network with hand-written backprop.

The network maps an observation of shape ``(C, H, W)`` to one bonus per
action. Parameters live in one flat float64 vector whose layout is fixed:
layers in order, and for each parametrised layer the weights (row-major)
followed by the biases. Conv weights have shape ``(filters, in_channels,
kh, kw)``; dense weights have shape ``(units, fan_in)``.

Convolutions are unpadded, so each spatial axis shrinks to
``(size - kernel) // stride + 1``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Rectifier:
    pass


Layer = Conv | Dense | Rectifier


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class _Slot:
    kind: str
    in_shape: tuple
    out_shape: tuple
    w_shape: tuple | None = None
    offset: int = 0

    @property
    def n_weights(self) -> int:
        return int(np.prod(self.w_shape)) if self.w_shape else 0

    @property
    def n_bias(self) -> int:
        return self.w_shape[0] if self.w_shape else 0


class NetworkSpec:
    """Validated layer list plus parameter layout.

    The last layer must be ``Dense(num_actions)``; there is no output rectifier.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], num_actions: int):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_actions = int(num_actions)
        if len(self.input_shape) != 3:
            raise ShapeError("input shape must be (channels, height, width)")
        if not self.layers or not isinstance(self.layers[-1], Dense) or self.layers[-1].units != num_actions:
            raise ShapeError(f"final layer must be Dense({num_actions})")
        slots = []
        shape: tuple = self.input_shape
        offset = 0
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ShapeError("Conv must come before any Dense layer")
                c, h, w = shape
                kh, kw = layer.kernel
                if kh > h or kw > w or layer.stride < 1 or layer.filters < 1:
                    raise ShapeError(f"{layer} does not fit input {shape}")
                out = (layer.filters, (h - kh) // layer.stride + 1, (w - kw) // layer.stride + 1)
                slot = _Slot("conv", shape, out, (layer.filters, c, kh, kw), offset)
            elif isinstance(layer, Dense):
                if layer.units < 1:
                    raise ShapeError("Dense needs at least one unit")
                fan_in = int(np.prod(shape))
                out = (layer.units,)
                slot = _Slot("dense", shape, out, (layer.units, fan_in), offset)
            elif isinstance(layer, Rectifier):
                slot = _Slot("relu", shape, shape)
            else:
                raise ShapeError(f"unknown layer {layer!r}")
            offset += slot.n_weights + slot.n_bias
            slots.append(slot)
            shape = slot.out_shape
        self.slots = tuple(slots)
        self.n_params = offset

    def __repr__(self):
        return f"NetworkSpec({list(self.layers)}, input_shape={self.input_shape}, num_actions={self.num_actions})"

    def __eq__(self, other):
        return isinstance(other, NetworkSpec) and self.to_dict() == other.to_dict()

    def output_slice(self) -> slice:
        """Slice of the parameter vector holding the output layer."""
        s = self.slots[-1]
        return slice(s.offset, s.offset + s.n_weights + s.n_bias)

    def views(self, theta: np.ndarray):
        """Per-slot ``(W, b)`` views into ``theta`` (``None`` for rectifiers)."""
        out = []
        for s in self.slots:
            if s.w_shape is None:
                out.append(None)
                continue
            w = theta[s.offset:s.offset + s.n_weights].reshape(s.w_shape)
            b = theta[s.offset + s.n_weights:s.offset + s.n_weights + s.n_bias]
            out.append((w, b))
        return out

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({"conv": [layer.filters, list(layer.kernel), layer.stride]})
            elif isinstance(layer, Dense):
                layers.append({"dense": layer.units})
            else:
                layers.append("relu")
        return {"layers": layers, "input_shape": list(self.input_shape), "num_actions": self.num_actions}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(parse_layers(d["layers"]), d["input_shape"], d["num_actions"])


def parse_layers(items) -> list[Layer]:
    """Parse ``[{"conv": [16, 8, 4]}, "relu", {"dense": 256}, ...]``."""
    layers: list[Layer] = []
    for item in items:
        if item in ("relu", "rectifier"):
            layers.append(Rectifier())
        elif isinstance(item, dict) and "conv" in item:
            filters, kernel, stride = item["conv"]
            layers.append(Conv(int(filters), kernel if isinstance(kernel, int) else tuple(kernel), int(stride)))
        elif isinstance(item, dict) and "dense" in item:
            layers.append(Dense(int(item["dense"])))
        else:
            raise ShapeError(f"cannot parse layer {item!r}")
    return layers


def atari_network(num_actions: int, input_shape=(4, 84, 84)) -> NetworkSpec:
    """Two conv layers (16 8x8/4, 32 4x4/2), a 256-unit dense layer, rectifiers, one output per action."""
    return NetworkSpec(
        [Conv(16, 8, 4), Rectifier(), Conv(32, 4, 2), Rectifier(), Dense(256), Rectifier(), Dense(num_actions)],
        input_shape, num_actions)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """He-normal hidden weights, zero biases, and an all-zero output layer."""
    theta = np.zeros(spec.n_params)
    last = len(spec.slots) - 1
    for i, (s, wb) in enumerate(zip(spec.slots, spec.views(theta))):
        if wb is None or i == last:
            continue
        fan_in = int(np.prod(s.w_shape[1:]))
        wb[0][...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=s.w_shape)
    return theta


@dataclass
class ForwardCache:
    theta: np.ndarray
    inputs: list
    outputs: list


def _patches(x, kernel, stride):
    # (C, H, W) -> (C, oh, ow, kh, kw)
    return sliding_window_view(x, kernel, axis=(1, 2))[:, ::stride, ::stride]


def forward(spec: NetworkSpec, theta: np.ndarray, obs: np.ndarray):
    """Return ``(bonus_per_action, cache)`` for one observation."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != spec.input_shape:
        raise ShapeError(f"observation shape {obs.shape} != network input {spec.input_shape}")
    x = obs
    inputs, outputs = [], []
    for layer, s, wb in zip(spec.layers, spec.slots, spec.views(theta)):
        inputs.append(x)
        if s.kind == "conv":
            w, b = wb
            p = _patches(x, layer.kernel, layer.stride)
            x = np.einsum("chwij,fcij->fhw", p, w) + b[:, None, None]
        elif s.kind == "dense":
            w, b = wb
            x = w @ x.reshape(-1) + b
        else:
            x = np.maximum(x, 0.0)
        outputs.append(x)
    return x, ForwardCache(theta, inputs, outputs)


def backward(spec: NetworkSpec, theta: np.ndarray, cache: ForwardCache, output_grad) -> np.ndarray:
    """Gradient of ``output_grad . forward(theta, obs)`` with respect to ``theta``."""
    if cache.theta is not theta:
        raise StaleCacheError("forward cache was computed with different parameters")
    grad = np.zeros(spec.n_params)
    gviews = spec.views(grad)
    views = spec.views(theta)
    dx = np.asarray(output_grad, dtype=float)
    for i in range(len(spec.layers) - 1, -1, -1):
        s = spec.slots[i]
        x = cache.inputs[i]
        if s.kind == "dense":
            w, _ = views[i]
            gw, gb = gviews[i]
            gw[...] = np.outer(dx, x.reshape(-1))
            gb[...] = dx
            if i:
                dx = (w.T @ dx).reshape(s.in_shape)
        elif s.kind == "conv":
            layer = spec.layers[i]
            w, _ = views[i]
            gw, gb = gviews[i]
            p = _patches(x, layer.kernel, layer.stride)
            gw[...] = np.einsum("fhw,chwij->fcij", dx, p)
            gb[...] = dx.sum(axis=(1, 2))
            if i:
                dx = _conv_input_grad(dx, w, s.in_shape, layer.kernel, layer.stride)
        else:
            dx = dx * (cache.outputs[i] > 0)
    return grad


def _conv_input_grad(dout, w, in_shape, kernel, stride):
    kh, kw = kernel
    _, oh, ow = dout.shape
    dx = np.zeros(in_shape)
    contrib = np.einsum("fhw,fcij->chwij", dout, w)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib[:, :, :, i, j]
    return dx


def save_checkpoint(path, spec: NetworkSpec, theta: np.ndarray, **meta) -> None:
    """Write spec descriptor and parameters to a ``.npz`` file (bit-exact)."""
    header = json.dumps({"format": CHECKPOINT_FORMAT, "spec": spec.to_dict(), "meta": meta})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), theta=np.asarray(theta, dtype=np.float64))


def load_checkpoint(path):
    """Return ``(spec, theta, meta)``."""
    with open(path, "rb") as fh:
        data = np.load(io.BytesIO(fh.read()), allow_pickle=False)
        header = json.loads(str(data["header"]))
        theta = data["theta"].copy()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')}")
    spec = NetworkSpec.from_dict(header["spec"])
    if theta.shape != (spec.n_params,):
        raise ValueError("checkpoint parameter count does not match its spec")
    return spec, theta, header.get("meta", {})
