"""Small sequential classifiers with per-row quantization-aware forward passes.

A filter of a conv layer, an output channel and a row of the flattened
``(out, in*kh*kw)`` weight matrix are the same thing here; assignments are
indexed by that row.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assignment import RowAssignment
from .errors import ContractViolation, StateError
from .quant import fake_quantize_matrix, fixed_qmax, round_half_away

MODES = ("float", "qat")


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    assignment: RowAssignment | None = None
    kind = "dense"

    def __call__(self, x, w, b):
        return ad.dense(x, w, b)

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ContractViolation(f"dense expects ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)


@dataclass
class Conv2d:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    assignment: RowAssignment | None = None
    kind = "conv2d"

    def __call__(self, x, w, b):
        return ad.conv2d(x, w, b, self.stride, self.padding)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        o, wc, kh, kw = self.weight.shape
        if c != wc:
            raise ContractViolation(f"conv2d expects {wc} channels, got {c}")
        return (o, ad.conv_output_size(h, kh, self.stride, self.padding),
                ad.conv_output_size(w, kw, self.stride, self.padding))


@dataclass
class ReLU:
    kind = "relu"

    def __call__(self, x):
        return ad.relu(x)

    def out_shape(self, in_shape):
        return tuple(in_shape)


@dataclass
class MaxPool2d:
    size: int = 2
    kind = "maxpool"

    def __call__(self, x):
        return ad.maxpool2d(x, self.size)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ContractViolation(f"pool size {self.size} must divide {h}x{w}")
        return (c, h // self.size, w // self.size)


@dataclass
class AvgPool2d(MaxPool2d):
    kind = "avgpool"

    def __call__(self, x):
        return ad.avgpool2d(x, self.size)


@dataclass
class Flatten:
    kind = "flatten"

    def __call__(self, x):
        return ad.reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


WEIGHT_KINDS = ("dense", "conv2d")


def quantize_activation(x: np.ndarray, bits: int, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """Clip to ``[-clip, clip]`` and round onto the symmetric ``bits`` grid.

    Returns ``(integer codes as float, step)``; the dequantized value is
    ``codes * step``.
    """
    q = fixed_qmax(bits)
    step = clip / q
    codes = np.clip(round_half_away(x / step), -q, q)
    return codes, step


@dataclass
class Model:
    layers: list
    input_shape: tuple[int, ...]
    act_bits: int = 4
    act_clip: float = 6.0
    _tape: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.shapes()  # validates that layer shapes compose

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer input shapes (sample dims only) followed by the output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.out_shape(out[-1]))
        return out

    def weight_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in WEIGHT_KINDS]

    @property
    def is_quantized(self) -> bool:
        return all(self.layers[i].assignment is not None for i in self.weight_layer_indices())

    @property
    def any_assigned(self) -> bool:
        return any(self.layers[i].assignment is not None for i in self.weight_layer_indices())

    def set_assignments(self, assignments: dict[int, RowAssignment]) -> None:
        for li, a in assignments.items():
            layer = self.layers[li]
            if len(a) != layer.weight.shape[0]:
                raise ContractViolation(f"layer {li}: {len(a)} assignments for {layer.weight.shape[0]} rows")
            layer.assignment = a

    def copy(self) -> "Model":
        m = copy.deepcopy(self)
        m._tape = None
        return m

    def _quantizes(self, mode: str) -> bool:
        if mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "float" or not self.any_assigned:
            return False
        if not self.is_quantized:
            raise StateError("qat forward needs every weight layer assigned")
        return True

    def _act_quant(self, t: ad.Tensor) -> ad.Tensor:
        codes, step = quantize_activation(t.data, self.act_bits, self.act_clip)
        return ad.straight_through(t, codes * step, np.abs(t.data) <= self.act_clip)

    def forward(self, x, mode: str = "float", params: dict | None = None,
                record: bool = False) -> ad.Tensor:
        """Run the network on a batch.

        In ``qat`` mode each weight matrix is replaced row by row with its
        quantize-dequantize image, and activations are fake-quantized at the
        model input and after every op that precedes the last weight layer.
        ``params`` maps layer index -> replacement weight array (not stored).
        With ``record=True`` the graph is kept for :func:`backward_ste`.
        """
        out, leaves = self._forward(x, mode, params)
        if record:
            self._tape = {"out": out, "leaves": leaves}
        return out

    def _forward(self, x, mode, params):
        quant = self._quantizes(mode)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ContractViolation(f"input shape {x.shape[1:]} != model input {self.input_shape}")
        params = params or {}
        weight_idx = self.weight_layer_indices()
        last_w = weight_idx[-1] if weight_idx else -1
        leaves = {}
        t = ad.Tensor(x)
        if quant:
            t = self._act_quant(t)
        for i, layer in enumerate(self.layers):
            if layer.kind in WEIGHT_KINDS:
                w = ad.Tensor(params.get(i, layer.weight), requires_grad=True)
                b = ad.Tensor(layer.bias, requires_grad=True)
                leaves[i] = (w, b)
                if quant:
                    w2 = w.data.reshape(w.shape[0], -1)
                    wq, mask = fake_quantize_matrix(w2, layer.assignment)
                    w = ad.straight_through(w, wq.reshape(w.shape), mask.reshape(w.shape))
                t = layer(t, w, b)
            else:
                t = layer(t)
            if quant and i < last_w:
                t = self._act_quant(t)
        return t, leaves

    def loss_and_grads(self, x, y, mode: str = "float", params: dict | None = None,
                       loss_scale: float = 1.0):
        """Mean cross-entropy (times ``loss_scale``) and ``{layer index: (dW, db)}``."""
        logits, leaves = self._forward(x, mode, params)
        loss = ad.softmax_cross_entropy(logits, np.asarray(y))
        if loss_scale != 1.0:
            loss = ad.scale(loss, loss_scale)
        loss.backward()
        return float(loss.data), _leaf_grads(leaves)

    def predict(self, x, mode: str = "float") -> np.ndarray:
        return self.forward(x, mode).data


def _leaf_grads(leaves: dict) -> dict:
    out = {}
    for i, (w, b) in leaves.items():
        gw = np.zeros_like(w.data) if w.grad is None else w.grad
        gb = np.zeros_like(b.data) if b.grad is None else b.grad
        out[i] = (gw, gb)
    return out


def forward(model: Model, x, mode: str = "float") -> np.ndarray:
    """Logits of ``model`` on ``x``; the graph is kept for :func:`backward_ste`."""
    return model.forward(x, mode, record=True).data


def backward_ste(model: Model, grad_logits) -> dict:
    """Back-propagate ``dL/dlogits`` through the last recorded forward pass.

    Quantizer nodes pass gradients straight through inside their clip range and
    block them outside.  Returns ``{layer index: (dW, db)}``.
    """
    tape = model._tape
    if tape is None:
        raise StateError("backward_ste called before forward")
    model._tape = None
    tape["out"].backward(np.asarray(grad_logits, dtype=np.float64))
    return _leaf_grads(tape["leaves"])


def build_model(layer_specs: list[dict], input_shape, seed: int = 0,
                act_bits: int = 4, act_clip: float = 6.0) -> Model:
    """Build a model from ``[{"kind": "dense", "out": 64}, {"kind": "relu"}, ...]``.

    Weights use He-normal initialization from a seeded generator; biases start at 0.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for spec in layer_specs:
        kind = spec["kind"]
        if kind == "dense":
            fan_in = shape[0]
            w = rng.standard_normal((spec["out"], fan_in)) * np.sqrt(2.0 / fan_in)
            layer = Dense(w, np.zeros(spec["out"]))
        elif kind == "conv2d":
            k = spec.get("kernel", 3)
            fan_in = shape[0] * k * k
            w = rng.standard_normal((spec["out"], shape[0], k, k)) * np.sqrt(2.0 / fan_in)
            layer = Conv2d(w, np.zeros(spec["out"]), spec.get("stride", 1), spec.get("padding", 0))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2d(spec.get("size", 2))
        elif kind == "avgpool":
            layer = AvgPool2d(spec.get("size", 2))
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ContractViolation(f"unknown layer kind {kind!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Model(layers, tuple(input_shape), act_bits, act_clip)
