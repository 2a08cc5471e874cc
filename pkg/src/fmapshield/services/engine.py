"""Minimal CNN engine.

Inference keeps every layer output so any fmap can be read, overridden (tap points)
or differentiated. Conv outputs are the fmaps; ReLU is a separate layer, so a tap
replaces values before the activation function sees them.

Each output filter is evaluated by its own per-sample matmul. A filter's result
therefore never depends on the batch size or on the other filters in its bank.
"""

import logging
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fmapshield.core.errors import InvalidRequestError, NonFiniteInputError, ShapeMismatchError
from fmapshield.schemas.network import FmapId, LayerConfig, LayerKind

if TYPE_CHECKING:
    from fmapshield.services.quantizer import QuantScheme

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]
ConvObserver = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Layer:
    config: LayerConfig
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def kind(self) -> LayerKind:
        return self.config.kind


def infer_shapes(configs: Iterable[LayerConfig], input_shape: Shape) -> list[Shape]:
    """Output shape (without batch axis) of every layer."""
    shapes: list[Shape] = []
    shape = tuple(input_shape)
    for index, cfg in enumerate(configs):
        if cfg.kind in (LayerKind.CONV2D, LayerKind.MAXPOOL2D, LayerKind.AVGPOOL2D):
            if len(shape) != 3:
                raise ShapeMismatchError(index, f"{cfg.kind} expects (C, H, W), got {shape}")
            c, h, w = shape
            kh, kw = cfg.kernel_size
            ho = (h + 2 * cfg.padding - kh) // cfg.stride + 1
            wo = (w + 2 * cfg.padding - kw) // cfg.stride + 1
            if ho < 1 or wo < 1:
                raise ShapeMismatchError(index, f"kernel {kh}x{kw} larger than input {h}x{w}")
            if cfg.kind == LayerKind.CONV2D:
                if c != cfg.in_channels:
                    raise ShapeMismatchError(
                        index, f"expects {cfg.in_channels} input channels, got {c}"
                    )
                c = cfg.out_channels
            shape = (c, ho, wo)
        elif cfg.kind == LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        elif cfg.kind == LayerKind.DENSE:
            if len(shape) != 1 or shape[0] != cfg.in_features:
                raise ShapeMismatchError(index, f"expects {cfg.in_features} features, got {shape}")
            shape = (cfg.out_features,)
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class Network:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    class_count: int
    name: str = "model"
    output_shapes: tuple[Shape, ...] = field(init=False, repr=False)
    fmap_index: tuple[FmapId, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise InvalidRequestError("a classifier needs at least two classes")
        shapes = infer_shapes([layer.config for layer in self.layers], self.input_shape)
        last = self.layers[-1].config
        if last.kind != LayerKind.DENSE or last.out_features != self.class_count:
            raise ShapeMismatchError(
                len(self.layers) - 1, f"final layer must be dense with {self.class_count} outputs"
            )
        for index, layer in enumerate(self.layers):
            cfg = layer.config
            if not cfg.has_weights:
                continue
            if layer.weight is None or layer.bias is None:
                raise ShapeMismatchError(index, "missing weights")
            if layer.weight.shape != cfg.weight_shape or layer.bias.shape != cfg.bias_shape:
                raise ShapeMismatchError(
                    index,
                    f"weights {layer.weight.shape}/{layer.bias.shape} do not match "
                    f"{cfg.weight_shape}/{cfg.bias_shape}",
                )
            for array in (layer.weight, layer.bias):
                array.setflags(write=False)
        object.__setattr__(self, "output_shapes", tuple(shapes))
        object.__setattr__(
            self,
            "fmap_index",
            tuple(
                FmapId(index, channel)
                for index, layer in enumerate(self.layers)
                if layer.kind == LayerKind.CONV2D
                for channel in range(layer.config.out_channels)
            ),
        )

    @property
    def dtype(self) -> np.dtype:
        for layer in self.layers:
            if layer.weight is not None:
                return layer.weight.dtype
        return np.dtype(np.float32)

    @property
    def conv_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == LayerKind.CONV2D]

    def fmap_shape(self, fmap: FmapId) -> tuple[int, int]:
        self.check_fmap(fmap)
        _, h, w = self.output_shapes[fmap.layer]
        return h, w

    def check_fmap(self, fmap: FmapId) -> None:
        if fmap not in set(self.fmap_index):
            raise InvalidRequestError(f"unknown fmap {tuple(fmap)}")

    def with_weights(self, params: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> "Network":
        """Copy of the network with the given layers' (weight, bias) replaced."""
        layers = tuple(
            Layer(layer.config, *params[i]) if i in params else layer
            for i, layer in enumerate(self.layers)
        )
        return Network(layers, self.input_shape, self.class_count, self.name)

    def astype(self, dtype: np.dtype | type) -> "Network":
        return self.with_weights(
            {
                i: (layer.weight.astype(dtype), layer.bias.astype(dtype))
                for i, layer in enumerate(self.layers)
                if layer.weight is not None
            }
        )


def make_network(
    configs: Iterable[LayerConfig],
    params: Mapping[int, tuple[np.ndarray, np.ndarray]],
    input_shape: tuple[int, int, int],
    class_count: int,
    name: str = "model",
    dtype: np.dtype | type = np.float32,
) -> Network:
    layers = []
    for index, cfg in enumerate(configs):
        if cfg.has_weights:
            weight, bias = params[index]
            layers.append(
                Layer(cfg, np.array(weight, dtype=dtype), np.array(bias, dtype=dtype))
            )
        else:
            layers.append(Layer(cfg))
    return Network(tuple(layers), tuple(input_shape), class_count, name)


@dataclass(frozen=True)
class TapPoint:
    """Replace one fmap's plane with `values` right after it is computed."""

    fmap: FmapId
    values: np.ndarray  # (H, W) or (N, H, W)


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray  # (N, M), network dtype
    probabilities: np.ndarray  # (N, M), float64
    predicted: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    losses: np.ndarray  # (N,), float64


@dataclass(frozen=True)
class ActivationTrace(Prediction):
    inputs: np.ndarray = field(default=None, repr=False)
    layer_outputs: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def top1(self) -> int:
        return int(self._single(self.predicted))

    @property
    def loss(self) -> float:
        return float(self._single(self.losses))

    def fmap(self, fmap: FmapId) -> np.ndarray:
        """Activations of one fmap, shape (N, H, W)."""
        return self.layer_outputs[fmap.layer][:, fmap.channel]

    def select(self, rows: np.ndarray) -> "ActivationTrace":
        """Trace restricted to the given samples."""
        return ActivationTrace(
            logits=self.logits[rows],
            probabilities=self.probabilities[rows],
            predicted=self.predicted[rows],
            labels=self.labels[rows],
            losses=self.losses[rows],
            inputs=self.inputs[rows],
            layer_outputs=tuple(output[rows] for output in self.layer_outputs),
        )

    def _single(self, values: np.ndarray):
        if values.shape[0] != 1:
            raise InvalidRequestError("scalar accessors need a single-sample trace")
        return values[0]


@dataclass(frozen=True)
class GradientTrace:
    """d(objective)/d(activation) for every conv output, keyed by conv layer index."""

    by_layer: dict[int, np.ndarray]

    def fmap(self, fmap: FmapId) -> np.ndarray:
        return self.by_layer[fmap.layer][:, fmap.channel]


@dataclass(frozen=True)
class Objective:
    kind: Literal["loss", "logit_diff"]
    class_index: int | None = None

    @classmethod
    def loss(cls) -> "Objective":
        return cls("loss")

    @classmethod
    def logit_diff(cls, class_index: int) -> "Objective":
        """z_i - z_yhat, with yhat the trace's predicted class."""
        return cls("logit_diff", class_index)


@dataclass(frozen=True)
class MacCensus:
    per_fmap: dict[FmapId, int]
    per_layer: dict[int, int]
    dense_macs: int
    total: int

    def fraction(self, fmaps: Iterable[FmapId]) -> float:
        return sum(self.per_fmap[f] for f in fmaps) / self.total


# ---------------------------------------------------------------------------
# Kernels


def _window_slice(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _im2col(x: np.ndarray, cfg: LayerConfig) -> tuple[np.ndarray, int, int]:
    kh, kw = cfg.kernel_size
    if cfg.padding:
        p = cfg.padding
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :: cfg.stride, :: cfg.stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_filters(
    x: np.ndarray, layer: Layer, filters: Iterable[int] | None = None
) -> np.ndarray:
    """Evaluate the listed filters (all by default); output (N, len(filters), Ho, Wo)."""
    cols, ho, wo = _im2col(x, layer.config)
    flat = layer.weight.reshape(layer.weight.shape[0], -1)
    chosen = range(flat.shape[0]) if filters is None else list(filters)
    out = np.empty((x.shape[0], len(chosen), ho * wo), dtype=x.dtype)
    for slot, f in enumerate(chosen):
        out[:, slot] = cols @ flat[f] + layer.bias[f]
    return out.reshape(x.shape[0], len(chosen), ho, wo)


def _pool_windows(x: np.ndarray, cfg: LayerConfig) -> np.ndarray:
    kh, kw = cfg.kernel_size
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :: cfg.stride, :: cfg.stride]


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    cfg = layer.config
    match cfg.kind:
        case LayerKind.CONV2D:
            return conv2d_filters(x, layer)
        case LayerKind.RELU:
            return np.maximum(x, 0).astype(x.dtype, copy=False)
        case LayerKind.MAXPOOL2D:
            return _pool_windows(x, cfg).max(axis=(4, 5))
        case LayerKind.AVGPOOL2D:
            return _pool_windows(x, cfg).mean(axis=(4, 5), dtype=x.dtype)
        case LayerKind.FLATTEN:
            return x.reshape(x.shape[0], -1)
        case LayerKind.DENSE:
            return (x[:, None, :] @ layer.weight.T)[:, 0, :] + layer.bias
    raise InvalidRequestError(f"unsupported layer kind {cfg.kind}")


def layer_backward(layer: Layer, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient with respect to the layer input, given the gradient at its output."""
    cfg = layer.config
    match cfg.kind:
        case LayerKind.CONV2D:
            n, f, ho, wo = grad.shape
            kh, kw = cfg.kernel_size
            c = cfg.in_channels
            flat = layer.weight.reshape(f, -1)
            gcols = grad.reshape(n, f, ho * wo).transpose(0, 2, 1) @ flat
            gcols = gcols.reshape(n, ho, wo, c, kh, kw)
            p = cfg.padding
            dx = np.zeros((n, c, x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=grad.dtype)
            for u in range(kh):
                for v in range(kw):
                    rows, cols = _window_slice(u, cfg.stride, ho), _window_slice(v, cfg.stride, wo)
                    dx[:, :, rows, cols] += gcols[..., u, v].transpose(0, 3, 1, 2)
            return dx[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else dx
        case LayerKind.RELU:
            return grad * (x > 0)
        case LayerKind.MAXPOOL2D | LayerKind.AVGPOOL2D:
            kh, kw = cfg.kernel_size
            ho, wo = grad.shape[2], grad.shape[3]
            dx = np.zeros_like(x, dtype=grad.dtype)
            if cfg.kind == LayerKind.MAXPOOL2D:
                winners = _pool_windows(x, cfg).reshape(*grad.shape, kh * kw).argmax(axis=-1)
            for u in range(kh):
                for v in range(kw):
                    rows, cols = _window_slice(u, cfg.stride, ho), _window_slice(v, cfg.stride, wo)
                    if cfg.kind == LayerKind.MAXPOOL2D:
                        dx[:, :, rows, cols] += grad * (winners == u * kw + v)
                    else:
                        dx[:, :, rows, cols] += grad / (kh * kw)
            return dx
        case LayerKind.FLATTEN:
            return grad.reshape(x.shape)
        case LayerKind.DENSE:
            return (grad[:, None, :] @ layer.weight)[:, 0, :]
    raise InvalidRequestError(f"unsupported layer kind {cfg.kind}")


def weight_gradients(
    layer: Layer, x: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batch-summed (dW, db) of a conv or dense layer."""
    if layer.kind == LayerKind.CONV2D:
        cols, ho, wo = _im2col(x, layer.config)
        g = grad.reshape(grad.shape[0], grad.shape[1], ho * wo)
        dw = np.einsum("nfp,npk->fk", g, cols).reshape(layer.weight.shape)
        return dw.astype(layer.weight.dtype), g.sum(axis=(0, 2)).astype(layer.bias.dtype)
    return (grad.T @ x).astype(layer.weight.dtype), grad.sum(axis=0).astype(layer.bias.dtype)


# ---------------------------------------------------------------------------
# Loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cross_entropy_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    return np.maximum(lse - z[np.arange(z.shape[0]), labels], 0.0)


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log(softmax(logits)[label]) with max-subtraction."""
    z = np.asarray(logits)
    if z.ndim != 1 or z.shape[0] < 2:
        raise InvalidRequestError("cross entropy needs a vector of at least two logits")
    if not 0 <= label < z.shape[0]:
        raise InvalidRequestError(f"label {label} outside [0, {z.shape[0]})")
    return float(_cross_entropy_rows(z[None, :], np.array([label]))[0])


# ---------------------------------------------------------------------------
# Inference


def _as_batch(net: Network, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs)
    if x.shape == net.input_shape:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeMismatchError(None, f"expected (N, {net.input_shape}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("input contains NaN or Inf")
    return np.array(x, dtype=net.dtype, order="C")


def _as_labels(net: Network, labels, count: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (count,):
        raise ShapeMismatchError(None, f"expected {count} labels, got {y.shape}")
    if np.any(y < 0) or np.any(y >= net.class_count):
        raise InvalidRequestError(f"labels must lie in [0, {net.class_count})")
    return y


def _predict(logits: np.ndarray, labels: np.ndarray) -> Prediction:
    # argmax returns the first maximum: ties go to the lowest class index
    return Prediction(
        logits=logits,
        probabilities=softmax(logits),
        predicted=logits.argmax(axis=1),
        labels=labels,
        losses=_cross_entropy_rows(logits, labels),
    )


def _apply_tap(x: np.ndarray, tap: TapPoint, layer_index: int) -> np.ndarray:
    values = np.asarray(tap.values, dtype=x.dtype)
    plane = x.shape[2:]
    if values.shape not in (plane, (x.shape[0], *plane)):
        raise ShapeMismatchError(layer_index, f"tap override {values.shape} vs fmap {plane}")
    x = x.copy()
    x[:, tap.fmap.channel] = values
    return x


def _run(
    net: Network,
    x: np.ndarray,
    start: int,
    tap: TapPoint | None,
    quant: "QuantScheme | None",
    keep: bool,
    observer: "ConvObserver | None" = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    outputs = []
    for index in range(start, len(net.layers)):
        layer = net.layers[index]
        x_in, x = x, layer_forward(layer, x)
        if layer.kind == LayerKind.CONV2D:
            if quant is not None:
                x = quant.fake_quant(index, x)
            if tap is not None and tap.fmap.layer == index:
                x = _apply_tap(x, tap, index)
            if observer is not None:
                x = observer(index, x_in, x)
        if keep:
            x.setflags(write=False)
            outputs.append(x)
    return x, outputs


def forward(
    net: Network,
    inputs: np.ndarray,
    labels,
    tap: TapPoint | None = None,
    quant: "QuantScheme | None" = None,
    observer: "ConvObserver | None" = None,
) -> ActivationTrace:
    """Run inference and keep every layer output.

    With `quant`, each conv output passes through quantize/dequantize before use and a
    tap override is written after that step.
    `observer(layer_index, layer_input, conv_output)` sees every conv output after that
    and returns the array the next layer consumes.
    """
    x = _as_batch(net, inputs)
    y = _as_labels(net, labels, x.shape[0])
    if tap is not None:
        net.check_fmap(tap.fmap)
    logits, outputs = _run(net, x, 0, tap, quant, keep=True, observer=observer)
    x.setflags(write=False)
    prediction = _predict(logits, y)
    return ActivationTrace(
        **prediction.__dict__,
        inputs=x,
        layer_outputs=tuple(outputs),
    )


def forward_from(
    net: Network,
    layer_index: int,
    activations: np.ndarray,
    labels,
    quant: "QuantScheme | None" = None,
) -> Prediction:
    """Finish inference given the output of `layer_index` for a batch."""
    expected = net.output_shapes[layer_index]
    x = np.asarray(activations, dtype=net.dtype)
    if x.shape[1:] != expected:
        raise ShapeMismatchError(layer_index, f"expected (N, {expected}), got {x.shape}")
    y = _as_labels(net, labels, x.shape[0])
    logits, _ = _run(net, x, layer_index + 1, None, quant, keep=False)
    return _predict(logits, y)


def _seed_gradient(net: Network, trace: ActivationTrace, objective: Objective) -> np.ndarray:
    n, m = trace.logits.shape
    if objective.kind == "loss":
        seed = trace.probabilities.copy()
        seed[np.arange(n), trace.labels] -= 1.0
        return seed.astype(net.dtype)
    i = objective.class_index
    if i is None or not 0 <= i < m:
        raise InvalidRequestError(f"logit_diff class {i} outside [0, {m})")
    if np.any(trace.predicted == i):
        raise InvalidRequestError(f"logit_diff({i}) needs i different from the predicted class")
    seed = np.zeros((n, m), dtype=net.dtype)
    seed[:, i] = 1.0
    seed[np.arange(n), trace.predicted] = -1.0
    return seed


def backpropagate(
    net: Network,
    trace: ActivationTrace,
    seed: np.ndarray,
    weight_grads: bool = False,
) -> tuple[dict[int, np.ndarray], dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Push d(objective)/d(logits) back through the network.

    Returns conv-output gradients per conv layer, and per-layer (dW, db) when asked.
    """
    conv_grads: dict[int, np.ndarray] = {}
    params: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    first_conv = net.conv_layers[0] if net.conv_layers else 0
    grad = seed
    for index in reversed(range(len(net.layers))):
        layer = net.layers[index]
        x_in = trace.inputs if index == 0 else trace.layer_outputs[index - 1]
        if layer.kind == LayerKind.CONV2D:
            conv_grads[index] = grad
        if weight_grads and layer.weight is not None:
            params[index] = weight_gradients(layer, x_in, grad)
        if index == 0 or (not weight_grads and index <= first_conv):
            break
        grad = layer_backward(layer, x_in, grad)
    return conv_grads, params


def backward(net: Network, trace: ActivationTrace, objective: Objective) -> GradientTrace:
    """Activation gradients of the objective for every conv fmap; weights untouched."""
    seed = _seed_gradient(net, trace, objective)
    conv_grads, _ = backpropagate(net, trace, seed)
    return GradientTrace(by_layer=conv_grads)


def count_macs(net: Network) -> MacCensus:
    per_fmap: dict[FmapId, int] = {}
    per_layer: dict[int, int] = {}
    dense = 0
    for index, layer in enumerate(net.layers):
        cfg = layer.config
        if cfg.kind == LayerKind.CONV2D:
            _, ho, wo = net.output_shapes[index]
            kh, kw = cfg.kernel_size
            each = ho * wo * cfg.in_channels * kh * kw
            for channel in range(cfg.out_channels):
                per_fmap[FmapId(index, channel)] = each
            per_layer[index] = each * cfg.out_channels
        elif cfg.kind == LayerKind.DENSE:
            per_layer[index] = cfg.in_features * cfg.out_features
            dense += per_layer[index]
    return MacCensus(per_fmap, per_layer, dense, sum(per_layer.values()))


def classify(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    quant: "QuantScheme | None" = None,
    chunk_size: int = 512,
) -> np.ndarray:
    """Top-1 predictions for a whole image set, evaluated in chunks."""
    predicted = []
    for start in range(0, images.shape[0], chunk_size):
        rows = slice(start, start + chunk_size)
        predicted.append(forward(net, images[rows], labels[rows], quant=quant).predicted)
    return np.concatenate(predicted) if predicted else np.zeros(0, dtype=np.int64)
