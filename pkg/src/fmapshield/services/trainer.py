"""Network initialisation and a small minibatch SGD trainer."""

import logging
import math
from collections.abc import Sequence

import numpy as np

from fmapshield.core.errors import InvalidRequestError, TrainingDivergedError
from fmapshield.core.seeding import stage_rng
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import LayerConfig, LayerKind
from fmapshield.services.engine import Network, backpropagate, forward, make_network

logger = logging.getLogger(__name__)

DESKNET_INPUT = (1, 12, 12)
DESKNET_CLASSES = 10
DESKNET_LAYERS = (
    LayerConfig(
        kind=LayerKind.CONV2D, in_channels=1, out_channels=8, kernel_size=(3, 3), padding=1
    ),
    LayerConfig(kind=LayerKind.RELU),
    LayerConfig(kind=LayerKind.MAXPOOL2D, kernel_size=(2, 2), stride=2),
    LayerConfig(
        kind=LayerKind.CONV2D, in_channels=8, out_channels=8, kernel_size=(3, 3), padding=1
    ),
    LayerConfig(kind=LayerKind.RELU),
    LayerConfig(kind=LayerKind.MAXPOOL2D, kernel_size=(2, 2), stride=2),
    LayerConfig(
        kind=LayerKind.CONV2D, in_channels=8, out_channels=8, kernel_size=(3, 3), padding=1
    ),
    LayerConfig(kind=LayerKind.RELU),
    LayerConfig(kind=LayerKind.FLATTEN),
    LayerConfig(kind=LayerKind.DENSE, in_features=72, out_features=DESKNET_CLASSES),
)


def init_network(
    layers: Sequence[LayerConfig],
    input_shape: tuple[int, int, int],
    seed: int,
    name: str = "model",
) -> Network:
    """He-uniform weights, zero biases. Shapes are validated by Network."""
    rng = stage_rng(seed, "init")
    params = {}
    for index, cfg in enumerate(layers):
        if not cfg.has_weights:
            continue
        fan_in = math.prod(cfg.weight_shape[1:])
        bound = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=cfg.weight_shape)
        params[index] = (weight, np.zeros(cfg.bias_shape))
    last = layers[-1]
    class_count = last.out_features if last.kind == LayerKind.DENSE else 0
    return make_network(layers, params, input_shape, class_count, name=name)


def build_desknet(seed: int = 0) -> Network:
    return init_network(DESKNET_LAYERS, DESKNET_INPUT, seed, name="desknet")


def train_sgd(
    net: Network,
    dataset: Dataset,
    epochs: int,
    learning_rate: float,
    seed: int,
    batch_size: int = 32,
) -> Network:
    """Plain minibatch SGD on mean cross-entropy. Deterministic given `seed`."""
    if len(dataset) == 0:
        raise InvalidRequestError("training set is empty")
    if epochs < 0 or batch_size < 1:
        raise InvalidRequestError("epochs must be >= 0 and batch_size >= 1")
    rng = stage_rng(seed, "train")
    params = {
        i: (layer.weight, layer.bias)
        for i, layer in enumerate(net.layers)
        if layer.weight is not None
    }
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                trace = forward(net, dataset.images[rows], dataset.labels[rows])
                if not np.all(np.isfinite(trace.losses)):
                    raise TrainingDivergedError(
                        f"non-finite loss in epoch {epoch} at sample {start}; "
                        f"lower the learning rate (now {learning_rate})"
                    )
                grad = trace.probabilities.copy()
                grad[np.arange(len(rows)), trace.labels] -= 1.0
                grad = (grad / len(rows)).astype(net.dtype)
                _, grads = backpropagate(net, trace, grad, weight_grads=True)
                params = {
                    i: (w - learning_rate * grads[i][0], b - learning_rate * grads[i][1])
                    for i, (w, b) in params.items()
                }
            if not all(np.all(np.isfinite(w)) for w, _ in params.values()):
                raise TrainingDivergedError(f"weights became non-finite in epoch {epoch}")
            net = net.with_weights(params)
            epoch_loss += float(trace.losses.sum())
        logger.info(
            "Epoch finished",
            extra={"epoch": epoch, "mean_loss": round(epoch_loss / n, 6)},
        )
    return net
