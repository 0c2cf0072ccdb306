"""Layer stacks over the numeric primitives: build, train, extract features.

A model is an ordered list of layer specs plus parameter arrays for the
parametric layers (conv, affine). Training is mini-batch SGD with momentum
on an MSE objective against per-sample scalar targets. The affine layer
flagged as the feature layer yields the learned per-frame feature vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ConvSpec, LrnSpec


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class Conv:
    spec: ConvSpec
    kind = "conv"


@dataclass(frozen=True)
class Relu:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: tuple[int, ...]
    stride: tuple[int, ...]
    kind = "maxpool"


@dataclass(frozen=True)
class Lrn:
    spec: LrnSpec
    kind = "lrn"


@dataclass(frozen=True)
class Affine:
    width: int
    bias: bool = True
    kind = "affine"


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind = "dropout"


LayerSpec = Conv | Relu | MaxPool | Lrn | Affine | Dropout


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 5
    dropout_rate: float = 0.5
    seed: int = 0
    lr_decay: float = 0.95

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")


def infer_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (sample shapes, no batch dim); raises with the
    index of the first incompatible layer."""
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            if isinstance(layer, Conv):
                sp = layer.spec
                if len(shape) != len(sp.kernel) + 1:
                    raise ValueError(
                        f"conv rank {len(sp.kernel)} on input shape {shape}"
                    )
                if shape[0] != sp.in_channels:
                    raise ValueError(
                        f"input has {shape[0]} channels, conv expects {sp.in_channels}"
                    )
                out_sp = tuple(
                    ops.conv_out_extent(shape[1 + d], sp.kernel[d], sp.stride[d], sp.padding[d])
                    for d in range(len(sp.kernel))
                )
                shape = (sp.out_channels,) + out_sp
            elif isinstance(layer, MaxPool):
                if len(shape) != len(layer.window) + 1:
                    raise ValueError(f"pool rank {len(layer.window)} on input shape {shape}")
                out_sp = []
                for d, (w, s) in enumerate(zip(layer.window, layer.stride)):
                    if w > shape[1 + d]:
                        raise ValueError(
                            f"pool window {w} exceeds extent {shape[1 + d]} in dim {d}"
                        )
                    out_sp.append((shape[1 + d] - w) // s + 1)
                shape = (shape[0],) + tuple(out_sp)
            elif isinstance(layer, Lrn):
                if len(shape) < 2:
                    raise ValueError("LRN needs a channel axis")
            elif isinstance(layer, Affine):
                shape = (layer.width,)
            elif isinstance(layer, (Relu, Dropout)):
                pass
            else:
                raise ValueError(f"unknown layer spec {layer!r}")
        except ValueError as exc:
            raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        shapes.append(shape)
    return shapes


class NetworkModel:
    """Ordered layer stack with parameters and momentum state.

    Parameters are He-initialized (zero-mean Gaussian, std sqrt(2/fan_in)),
    biases zero. ``feature_layer_index`` addresses the affine layer whose
    output is the learned feature vector.
    """

    def __init__(
        self,
        layers: list[LayerSpec],
        input_shape: tuple[int, ...],
        feature_layer_index: int | None = None,
        init_seed: int = 0,
        dtype=np.float32,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        if feature_layer_index is not None:
            if not isinstance(self.layers[feature_layer_index], Affine):
                raise ValueError(
                    f"feature layer {feature_layer_index} is not an affine layer"
                )
        self.feature_layer_index = feature_layer_index
        self.dtype = np.dtype(dtype)
        self.params: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.velocity: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
        rng = np.random.default_rng(init_seed)
        prev = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                sp = layer.spec
                fan_in = sp.in_channels * int(np.prod(sp.kernel))
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (sp.out_channels, sp.in_channels) + sp.kernel)
                b = np.zeros(sp.out_channels)
                self.params[i] = (w.astype(self.dtype), b.astype(self.dtype))
            elif isinstance(layer, Affine):
                fan_in = int(np.prod(prev))
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, layer.width))
                b = np.zeros(layer.width)
                self.params[i] = (w.astype(self.dtype), b.astype(self.dtype))
            prev = self.shapes[i]

    @property
    def feature_width(self) -> int:
        if self.feature_layer_index is None:
            raise ValueError("model has no feature layer")
        return self.layers[self.feature_layer_index].width

    def _ensure_velocity(self):
        if self.velocity is None:
            self.velocity = {
                i: (np.zeros_like(w), np.zeros_like(b)) for i, (w, b) in self.params.items()
            }


def _check_batch(model: NetworkModel, batch: np.ndarray):
    if batch.shape[1:] != model.input_shape:
        raise ValueError(
            f"batch sample shape {batch.shape[1:]} does not match model input "
            f"{model.input_shape}"
        )


def forward(
    model: NetworkModel,
    batch: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    upto: int | None = None,
):
    """Run the stack; returns (output, cache). The cache holds each layer's
    input plus pool argmaxes and dropout masks for the backward pass.

    With ``upto`` set, stops after that layer and returns its output.
    """
    _check_batch(model, batch)
    x = batch.astype(model.dtype, copy=False)
    cache = []
    last = len(model.layers) - 1 if upto is None else upto
    for i, layer in enumerate(model.layers[: last + 1]):
        try:
            if isinstance(layer, Conv):
                w, b = model.params[i]
                cache.append((x, None))
                x = ops.conv_forward(x, w, b, layer.spec)
            elif isinstance(layer, Relu):
                cache.append((x, None))
                x = ops.relu(x)
            elif isinstance(layer, MaxPool):
                out, argmax = ops.maxpool_forward(x, layer.window, layer.stride)
                cache.append((x, argmax))
                x = out
            elif isinstance(layer, Lrn):
                cache.append((x, None))
                x = ops.lrn_forward(x, layer.spec)
            elif isinstance(layer, Affine):
                w, b = model.params[i]
                flat = x.reshape(x.shape[0], -1)
                cache.append((flat, x.shape))
                x = ops.affine_forward(flat, w, b)
            elif isinstance(layer, Dropout):
                if mode == "train":
                    out, mask = ops.dropout(x, layer.rate, "train", rng)
                else:
                    out, mask = x, None
                cache.append((x, mask))
                x = out
        except ValueError as exc:
            raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
    return x, cache


def backward(model: NetworkModel, cache: list, grad_out: np.ndarray, upto: int | None = None):
    """Backpropagate grad_out through the cached stack.

    Returns (grad_input, {layer index: (grad_w, grad_b)}).
    """
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    g = grad_out
    last = len(model.layers) - 1 if upto is None else upto
    for i in range(last, -1, -1):
        layer = model.layers[i]
        x, aux = cache[i]
        if isinstance(layer, Conv):
            w, _ = model.params[i]
            g, gw, gb = ops.conv_backward(g, x, w, layer.spec)
            grads[i] = (gw, gb)
        elif isinstance(layer, Relu):
            g = ops.relu_backward(g, x)
        elif isinstance(layer, MaxPool):
            g = ops.maxpool_backward(g, aux, x.shape)
        elif isinstance(layer, Lrn):
            g = ops.lrn_backward(g, x, layer.spec)
        elif isinstance(layer, Affine):
            w, _ = model.params[i]
            g, gw, gb = ops.affine_backward(g, x, w)
            if not layer.bias:
                gb = np.zeros_like(gb)
            grads[i] = (gw, gb)
            g = g.reshape(aux)
        elif isinstance(layer, Dropout):
            if aux is not None:
                g = g * aux
    return g, grads


def predict(model: NetworkModel, batch: np.ndarray, mode: str = "infer", rng=None):
    """Scalar-head prediction, one value per sample."""
    out, cache = forward(model, batch, mode=mode, rng=rng)
    if out.ndim != 2 or out.shape[1] != 1:
        raise ValueError(f"model head emits shape {out.shape[1:]}, expected scalar")
    return out[:, 0], cache


def gradients(model: NetworkModel, batch: np.ndarray, targets: np.ndarray, mode="infer", rng=None):
    """Loss and parameter gradients of the MSE objective on one batch."""
    targets = np.asarray(targets)
    if targets.shape != (batch.shape[0],):
        raise ValueError(
            f"targets length {targets.shape} does not match batch size {batch.shape[0]}"
        )
    pred, cache = predict(model, batch, mode=mode, rng=rng)
    loss, grad_pred = ops.mse_loss(pred, targets.astype(pred.dtype, copy=False))
    _, grads = backward(model, cache, grad_pred[:, None])
    return loss, grads


def train_step(
    model: NetworkModel,
    batch: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    learning_rate: float | None = None,
) -> float:
    """One momentum-SGD step; returns the pre-update loss.

    velocity <- momentum * velocity - lr * grad; params <- params + velocity.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    loss, grads = gradients(model, batch, targets, mode="train", rng=rng)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss!r}; lower the learning rate")
    model._ensure_velocity()
    for i, (gw, gb) in grads.items():
        w, b = model.params[i]
        vw, vb = model.velocity[i]
        vw *= cfg.momentum
        vw -= (lr * gw).astype(w.dtype)
        vb *= cfg.momentum
        vb -= (lr * gb).astype(b.dtype)
        w += vw
        b += vb
    return loss


def fit(
    model: NetworkModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
) -> list[float]:
    """Epoch loop: shuffled mini-batches, per-epoch learning-rate decay.

    Returns the per-epoch mean loss (weighted by batch size).
    """
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if len(inputs) != len(targets):
        raise ValueError(f"{len(inputs)} inputs vs {len(targets)} targets")
    rng = np.random.default_rng(cfg.seed)
    log: list[float] = []
    lr = cfg.learning_rate
    n = len(inputs)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = train_step(model, inputs[idx], targets[idx], cfg, rng, learning_rate=lr)
            total += loss * len(idx)
        log.append(total / n)
        lr *= cfg.lr_decay
    return log


def extract_features(model: NetworkModel, batch: np.ndarray) -> np.ndarray:
    """Feature-layer activations in inference mode (dropout disabled)."""
    out, _ = forward(model, batch, mode="infer", upto=model.feature_layer_index)
    return out


MAGIC = b"AVN1"


def _layer_to_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, Conv):
        sp = layer.spec
        return {
            "kind": "conv",
            "in_channels": sp.in_channels,
            "out_channels": sp.out_channels,
            "kernel": list(sp.kernel),
            "stride": list(sp.stride),
            "padding": list(sp.padding),
        }
    if isinstance(layer, Relu):
        return {"kind": "relu"}
    if isinstance(layer, MaxPool):
        return {"kind": "maxpool", "window": list(layer.window), "stride": list(layer.stride)}
    if isinstance(layer, Lrn):
        sp = layer.spec
        return {"kind": "lrn", "size": sp.size, "k": sp.k, "alpha": sp.alpha, "beta": sp.beta}
    if isinstance(layer, Affine):
        return {"kind": "affine", "width": layer.width, "bias": layer.bias}
    if isinstance(layer, Dropout):
        return {"kind": "dropout", "rate": layer.rate}
    raise ValueError(f"unknown layer {layer!r}")


def _layer_from_dict(d: dict) -> LayerSpec:
    kind = d["kind"]
    if kind == "conv":
        return Conv(
            ConvSpec(
                in_channels=d["in_channels"],
                out_channels=d["out_channels"],
                kernel=tuple(d["kernel"]),
                stride=tuple(d["stride"]),
                padding=tuple(d["padding"]),
            )
        )
    if kind == "relu":
        return Relu()
    if kind == "maxpool":
        return MaxPool(window=tuple(d["window"]), stride=tuple(d["stride"]))
    if kind == "lrn":
        return Lrn(LrnSpec(size=d["size"], k=d["k"], alpha=d["alpha"], beta=d["beta"]))
    if kind == "affine":
        return Affine(width=d["width"], bias=d.get("bias", True))
    if kind == "dropout":
        return Dropout(rate=d["rate"])
    raise ValueError(f"unknown layer kind {kind!r}")


def save_model(model: NetworkModel, path) -> None:
    """Versioned binary: magic 'AVN1', u32 LE header length, JSON header
    (layer table, input shape, feature index, dtype), then raw little-endian
    parameter blobs (weights then bias per parametric layer, layer order).
    """
    header = {
        "input_shape": list(model.input_shape),
        "feature_layer_index": model.feature_layer_index,
        "dtype": model.dtype.name,
        "layers": [_layer_to_dict(l) for l in model.layers],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for i in sorted(model.params):
            w, b = model.params[i]
            fh.write(np.ascontiguousarray(w, dtype="<" + model.dtype.str[1:]).tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<" + model.dtype.str[1:]).tobytes())


def load_model(path) -> NetworkModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad model magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        layers = [_layer_from_dict(d) for d in header["layers"]]
        model = NetworkModel(
            layers,
            input_shape=tuple(header["input_shape"]),
            feature_layer_index=header["feature_layer_index"],
            dtype=np.dtype(header["dtype"]),
        )
        dt = np.dtype("<" + model.dtype.str[1:])
        for i in sorted(model.params):
            w, b = model.params[i]
            wbuf = fh.read(w.size * dt.itemsize)
            bbuf = fh.read(b.size * dt.itemsize)
            if len(wbuf) != w.size * dt.itemsize or len(bbuf) != b.size * dt.itemsize:
                raise ValueError("model file truncated")
            model.params[i] = (
                np.frombuffer(wbuf, dtype=dt).reshape(w.shape).astype(model.dtype),
                np.frombuffer(bbuf, dtype=dt).reshape(b.shape).astype(model.dtype),
            )
        if fh.read(1):
            raise ValueError("trailing bytes after parameter blobs")
    return model
