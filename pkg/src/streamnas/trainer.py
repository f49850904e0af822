"""Numpy training and inference for the searchable layer set.

Depthwise kernels have no bias; pointwise kernels and the dense layer do.
ReLU follows every pointwise conv. The final dense layer emits raw logits
and the loss is mean softmax cross-entropy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError, TrainingDiverged
from .topology import DSConv1D, Dense, GlobalAvgPool, MaxPool1D, Topology, infer_shapes

LayerParams = dict[str, np.ndarray]


@dataclass
class ModelParams:
    layers: list[LayerParams]

    def copy(self) -> "ModelParams":
        return ModelParams([{k: v.copy() for k, v in p.items()} for p in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for p in self.layers for _, v in sorted(p.items())])

    def count(self) -> int:
        return sum(v.size for p in self.layers for v in p.values())


@dataclass(frozen=True)
class Metrics:
    detection_rate: float
    false_alarm_rate: float
    accuracy: float
    loss: float

    def to_dict(self) -> dict:
        return {
            "detection_rate": self.detection_rate,
            "false_alarm_rate": self.false_alarm_rate,
            "accuracy": self.accuracy,
            "loss": self.loss,
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float | None = 5.0


def init_params(topology: Topology, rng: np.random.Generator) -> ModelParams:
    layers: list[LayerParams] = []
    for layer, shape in zip(topology.layers, infer_shapes(topology)):
        c = shape.input_channels
        if isinstance(layer, DSConv1D):
            k, f = layer.kernel_size, layer.filters
            layers.append({
                "dw": rng.normal(0.0, np.sqrt(1.0 / k), (c, k)),
                "pw": rng.normal(0.0, np.sqrt(2.0 / c), (c, f)),
                "pb": np.zeros(f),
            })
        elif isinstance(layer, Dense):
            n_in = shape.input_width * c
            layers.append({
                "w": rng.normal(0.0, np.sqrt(1.0 / n_in), (n_in, layer.units)),
                "b": np.zeros(layer.units),
            })
        else:
            layers.append({})
    return ModelParams(layers)


def _dw_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    k = w.shape[1]
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride]
    return np.einsum("bcok,ck->bco", win, w), win


def _dw_backward(win: np.ndarray, w: np.ndarray, gy: np.ndarray, in_width: int,
                 stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    gw = np.einsum("bcok,bco->ck", win, gy)
    b, c, o = gy.shape
    gx = np.zeros((b, c, in_width + 2 * pad), dtype=gy.dtype)
    span = stride * (o - 1) + 1
    for j in range(w.shape[1]):
        gx[:, :, j:j + span:stride] += gy * w[None, :, j, None]
    if pad:
        gx = gx[:, :, pad:-pad]
    return gw, gx


def forward(params: ModelParams, topology: Topology, x: np.ndarray,
            cache: list | None = None, hook=None) -> np.ndarray:
    """Logits of shape (batch, classes).

    ``cache`` collects what :func:`backward` needs. ``hook(layer_index, role,
    array)`` may replace intermediate values; the fixed-point simulator and the
    range profiler use it to observe and requantize accumulator sites.
    """
    if x.ndim != 3 or x.shape[1:] != (topology.input_channels, topology.input_length):
        raise ShapeError(
            f"input shape {x.shape[1:]} != ({topology.input_channels}, {topology.input_length})"
        )
    h = x if hook is None else hook(-1, "activation", x)
    for i, (layer, p) in enumerate(zip(topology.layers, params.layers)):
        if isinstance(layer, DSConv1D):
            y, win = _dw_forward(h, p["dw"], layer.stride, layer.padding)
            if hook is not None:
                y = hook(i, "dw-acc", y)
            z = np.matmul(y.transpose(0, 2, 1), p["pw"]).transpose(0, 2, 1) + p["pb"][None, :, None]
            if hook is not None:
                z = hook(i, "pw-acc", z)
            out = np.maximum(z, 0.0)
            if cache is not None:
                cache.append((win, h.shape[2], y, z))
        elif isinstance(layer, MaxPool1D):
            s = layer.stride
            wo = h.shape[2] // s
            hr = h[:, :, : wo * s].reshape(h.shape[0], h.shape[1], wo, s)
            idx = hr.argmax(-1)
            out = np.take_along_axis(hr, idx[..., None], -1)[..., 0]
            if cache is not None:
                cache.append((idx, h.shape[2]))
        elif isinstance(layer, GlobalAvgPool):
            out = h.mean(axis=2, keepdims=True)
            if cache is not None:
                cache.append((h.shape[2],))
        elif isinstance(layer, Dense):
            flat = h.reshape(h.shape[0], -1)
            out = flat @ p["w"] + p["b"]
            if hook is not None:
                out = hook(i, "dense-acc", out)
            if cache is not None:
                cache.append((flat, h.shape))
            if i < len(topology.layers) - 1:
                out = np.maximum(out, 0.0)[:, :, None]
        else:
            raise TypeError(f"unknown layer {layer!r}")
        if hook is not None:
            out = hook(i, "activation", out)
        h = out
    return h


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def backward(params: ModelParams, topology: Topology, cache: list, grad_logits: np.ndarray) -> ModelParams:
    grads: list[LayerParams] = [{} for _ in topology.layers]
    g = grad_logits
    for i in range(len(topology.layers) - 1, -1, -1):
        layer, p, c = topology.layers[i], params.layers[i], cache[i]
        if isinstance(layer, DSConv1D):
            win, in_w, y, z = c
            gz = g * (z > 0)
            grads[i]["pb"] = gz.sum(axis=(0, 2))
            grads[i]["pw"] = np.einsum("bco,bfo->cf", y, gz)
            gy = np.matmul(p["pw"], gz)
            grads[i]["dw"], g = _dw_backward(win, p["dw"], gy, in_w, layer.stride, layer.padding)
        elif isinstance(layer, MaxPool1D):
            idx, in_w = c
            b, ch, wo = g.shape
            gr = np.zeros((b, ch, wo, layer.stride), dtype=g.dtype)
            np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
            gx = np.zeros((b, ch, in_w), dtype=g.dtype)
            gx[:, :, : wo * layer.stride] = gr.reshape(b, ch, -1)
            g = gx
        elif isinstance(layer, GlobalAvgPool):
            (in_w,) = c
            g = np.repeat(g / in_w, in_w, axis=2)
        elif isinstance(layer, Dense):
            flat, in_shape = c
            if g.ndim == 3:
                # hidden dense: undo the ReLU applied after it
                pre = flat @ p["w"] + p["b"]
                g = g[:, :, 0] * (pre > 0)
            grads[i]["w"] = flat.T @ g
            grads[i]["b"] = g.sum(axis=0)
            g = (g @ p["w"].T).reshape(in_shape)
    return ModelParams(grads)


def loss_and_grads(params: ModelParams, topology: Topology, x: np.ndarray,
                   labels: np.ndarray) -> tuple[float, ModelParams]:
    cache: list = []
    logits = forward(params, topology, x, cache)
    loss, g = softmax_xent(logits, labels)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, backward(params, topology, cache, g)


def metrics_from_predictions(pred: np.ndarray, labels: np.ndarray, loss: float = 0.0) -> Metrics:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    pos, neg = labels == 1, labels == 0
    tp = int(np.sum(pred[pos] == 1))
    fp = int(np.sum(pred[neg] == 1))
    det = tp / pos.sum() if pos.any() else 0.0
    fa = fp / neg.sum() if neg.any() else 0.0
    acc = float(np.mean(pred == labels)) if len(labels) else 0.0
    return Metrics(float(det), float(fa), acc, float(loss))


def predict_logits(params: ModelParams, topology: Topology, x: np.ndarray,
                   chunk: int = 256, hook=None) -> np.ndarray:
    return np.concatenate(
        [forward(params, topology, x[i:i + chunk], hook=hook) for i in range(0, len(x), chunk)]
    )


def evaluate(params: ModelParams, topology: Topology, x: np.ndarray, labels: np.ndarray) -> Metrics:
    logits = predict_logits(params, topology, x)
    loss, _ = softmax_xent(logits, labels)
    return metrics_from_predictions(logits.argmax(axis=1), labels, loss)


def _step(params: ModelParams, grads: ModelParams, velocity: ModelParams, cfg: TrainConfig) -> None:
    scale = 1.0
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for gl in grads.layers for g in gl.values()))
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
    for p, g, v in zip(params.layers, grads.layers, velocity.layers):
        for k in p:
            v[k] *= cfg.momentum
            v[k] -= cfg.lr * scale * g[k]
            p[k] += v[k]


def train(topology: Topology, dataset, config: TrainConfig = TrainConfig(),
          params: ModelParams | None = None) -> tuple[ModelParams, Metrics]:
    """SGD with momentum; returns the parameters with the best validation loss.

    The untrained initialization counts as a candidate, so ``lr=0`` returns
    the initial parameters and their validation metrics.
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(topology, rng)
    x_tr, y_tr = dataset.subset("train")
    x_va, y_va = dataset.subset("val")
    velocity = ModelParams([{k: np.zeros_like(v) for k, v in p.items()} for p in params.layers])
    best = params.copy()
    best_metrics = evaluate(params, topology, x_va, y_va)
    for _ in range(config.epochs):
        order = rng.permutation(len(y_tr))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grads = loss_and_grads(params, topology, x_tr[idx], y_tr[idx])
            except NumericalError as exc:
                raise TrainingDiverged(str(exc)) from exc
            _step(params, grads, velocity, config)
        m = evaluate(params, topology, x_va, y_va)
        if not np.isfinite(m.loss):
            raise TrainingDiverged("validation loss is not finite")
        if m.loss < best_metrics.loss:
            best, best_metrics = params.copy(), m
    return best, best_metrics


_MAGIC = b"SNP1"


def save_params(params: ModelParams, topology: Topology, path: str | Path) -> None:
    """Flat little-endian float64 blob behind a JSON header.

    Layout: 4-byte magic, uint32 header length, UTF-8 JSON header, data.
    """
    tensors, blobs, offset = [], [], 0
    for i, p in enumerate(params.layers):
        for name in sorted(p):
            arr = np.ascontiguousarray(p[name], dtype="<f8")
            tensors.append({"layer": i, "name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"endianness": "little", "dtype": "<f8", "topology": topology.to_dict(),
                         "tensors": tensors}, sort_keys=True).encode()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs))


def load_params(path: str | Path) -> tuple[ModelParams, Topology]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    data = raw[8 + hlen:]
    topology = Topology.from_dict(header["topology"])
    layers: list[LayerParams] = [{} for _ in topology.layers]
    for t in header["tensors"]:
        buf = data[t["offset"]:t["offset"] + t["nbytes"]]
        layers[t["layer"]][t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(t["shape"]).copy()
    return ModelParams(layers), topology
