"""A small float64 CNN trainer: standard SGD training, teacher-student
pre-training of pruned blocks, and fine-tuning of block-assembled networks.

Networks are instantiated from a :class:`ModelSpec`. Pruning is expressed
with masks, so every network keeps the full layer shapes; masked positions
are zero and never receive gradient.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model_ir import ModelSpec
from .pruner import design_pattern_library, filter_l1_prune, prune_layer


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class MissingBlock(KeyError):
    pass


# ---------------------------------------------------------------------------
# layer kernels

def _conv_cols(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, (oh, ow)


def conv_forward(x, w, b, stride=1, pad=0):
    f, c, kh, kw = w.shape
    cols, (oh, ow) = _conv_cols(x, kh, kw, stride, pad)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2), cols


def conv_backward(dout, x_shape, cols, w, stride=1, pad=0):
    f, c, kh, kw = w.shape
    n, _, oh, ow = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    h, wd = x_shape[2] + 2 * pad, x_shape[3] + 2 * pad
    dxp = np.zeros((n, c, h, wd))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:h - pad, pad:wd - pad] if pad else dxp
    return dx, dw, db


def pool_forward(x, size, stride):
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (size * size,))
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(dout, x_shape, idx, size, stride):
    dx = np.zeros(x_shape)
    oh, ow = dout.shape[2:]
    for i in range(size):
        for j in range(size):
            hit = idx == i * size + j
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dout * hit
    return dx


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def mse(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# network

@dataclass
class Trace:
    """Everything a backward pass needs from one forward pass."""

    start: int
    stop: int
    inputs: list  # per layer in [start, stop]: (input, aux)
    output: np.ndarray
    activations: dict  # layer index -> output
    loss: Optional[float] = None
    dloss: Optional[np.ndarray] = None


class ToyNet:
    """Parameters and masks for every weighted layer of a model."""

    def __init__(self, spec: ModelSpec, params: dict, masks: Optional[dict] = None):
        self.spec = spec
        self.params = params
        self.masks = masks if masks is not None else {
            name: {k: np.ones(v.shape, dtype=bool) for k, v in p.items()} for name, p in params.items()}

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "ToyNet":
        """He-normal weights and zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for layer in spec.layers:
            if layer.kind == "convolution":
                shape = (layer.num_output, layer.channels, layer.kernel_h, layer.kernel_w)
            elif layer.kind == "fully_connected":
                shape = (layer.num_output, layer.channels)
            else:
                continue
            fan_in = int(np.prod(shape[1:]))
            params[layer.name] = {"w": rng.normal(0.0, np.sqrt(2.0 / fan_in), shape),
                                  "b": np.zeros(shape[0])}
        return cls(spec, params)

    def copy(self) -> "ToyNet":
        params = {n: {k: v.copy() for k, v in p.items()} for n, p in self.params.items()}
        masks = {n: {k: v.copy() for k, v in p.items()} for n, p in self.masks.items()}
        return ToyNet(self.spec, params, masks)

    @property
    def first(self) -> int:
        return 1 if self.spec.layers[0].kind == "input" else 0

    @property
    def last(self) -> int:
        return len(self.spec.layers) - 1

    def param_count(self) -> int:
        """Unmasked weights and biases."""
        return int(sum(m.sum() for p in self.masks.values() for m in p.values()))

    def apply_masks(self) -> None:
        for name, p in self.params.items():
            for k in p:
                p[k] = np.where(self.masks[name][k], p[k], 0.0)

    def state(self) -> dict:
        """Flat ``name -> array`` view for weight files (biases as ``name.bias``)."""
        out = {}
        for name, p in self.params.items():
            out[name] = p["w"]
            out[name + ".bias"] = p["b"]
        return out

    def load_state(self, store: Mapping) -> None:
        for name, p in self.params.items():
            for key, suffix in (("w", ""), ("b", ".bias")):
                if name + suffix not in store:
                    raise KeyError(f"weight file has no tensor {name + suffix!r}")
                arr = np.asarray(store[name + suffix], dtype=np.float64)
                if arr.shape != p[key].shape:
                    raise ShapeError(f"{name + suffix}: expected {p[key].shape}, got {arr.shape}")
                p[key] = arr.copy()
        self.apply_masks()

    def _check_input(self, x: np.ndarray, start: int) -> None:
        want = self.spec.layers[start].in_shape
        if x.ndim != 4 or any(w is not None and w != g for w, g in zip(want, x.shape[1:])):
            raise ShapeError(f"layer {self.spec.layers[start].name!r} expects (N, {want}), got {x.shape}")

    def run(self, x: np.ndarray, start: Optional[int] = None, stop: Optional[int] = None) -> Trace:
        """Forward through layers ``start..stop`` (inclusive); ``x`` feeds ``start``."""
        start = self.first if start is None else start
        stop = self.last if stop is None else stop
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x, start)
        inputs, acts = [], {}
        for i in range(start, stop + 1):
            layer = self.spec.layers[i]
            aux = None
            if layer.kind == "convolution":
                p = self.params[layer.name]
                out, aux = conv_forward(x, p["w"], p["b"], layer.stride, layer.pad)
            elif layer.kind == "relu":
                out = np.maximum(x, 0.0)
            elif layer.kind == "pool":
                out, aux = pool_forward(x, layer.pool_size, layer.stride)
            elif layer.kind == "fully_connected":
                p = self.params[layer.name]
                out = x.reshape(x.shape[0], -1) @ p["w"].T + p["b"]
            else:
                raise ShapeError(f"layer {layer.name!r} of kind {layer.kind!r} cannot run")
            inputs.append((x, aux))
            acts[i] = out
            x = out
        return Trace(start, stop, inputs, x, acts)

    def backward(self, trace: Trace, dout: np.ndarray) -> dict:
        """Masked parameter gradients given the gradient at the trace output."""
        grads = {}
        for i in range(trace.stop, trace.start - 1, -1):
            layer = self.spec.layers[i]
            x, aux = trace.inputs[i - trace.start]
            if layer.kind == "convolution":
                p = self.params[layer.name]
                dout, dw, db = conv_backward(dout, x.shape, aux, p["w"], layer.stride, layer.pad)
                grads[layer.name] = {"w": dw, "b": db}
            elif layer.kind == "relu":
                dout = dout * (x > 0)
            elif layer.kind == "pool":
                dout = pool_backward(dout, x.shape, aux, layer.pool_size, layer.stride)
            elif layer.kind == "fully_connected":
                p = self.params[layer.name]
                flat = x.reshape(x.shape[0], -1)
                grads[layer.name] = {"w": dout.T @ flat, "b": dout.sum(axis=0)}
                dout = (dout @ p["w"]).reshape(x.shape)
        for name, g in grads.items():
            for k in g:
                g[k] = g[k] * self.masks[name][k]
        return grads

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.run(x).output.argmax(axis=1)


def forward(net: ToyNet, x: np.ndarray, labels: Optional[np.ndarray] = None,
            target: Optional[np.ndarray] = None, start: Optional[int] = None,
            stop: Optional[int] = None) -> Trace:
    """Run the net; with ``labels`` the loss is cross-entropy, with ``target`` MSE."""
    trace = net.run(x, start, stop)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (trace.output.shape[0],):
            raise ShapeError(f"expected {trace.output.shape[0]} labels, got {labels.shape}")
        trace.loss, trace.dloss = softmax_cross_entropy(trace.output.reshape(len(labels), -1), labels)
        trace.dloss = trace.dloss.reshape(trace.output.shape)
    elif target is not None:
        if np.shape(target) != trace.output.shape:
            raise ShapeError(f"target shape {np.shape(target)} != output {trace.output.shape}")
        trace.loss, trace.dloss = mse(trace.output, np.asarray(target, dtype=np.float64))
    return trace


def gradients(net: ToyNet, x: np.ndarray, labels: Optional[np.ndarray] = None,
              target: Optional[np.ndarray] = None, loss_scale: float = 1.0,
              start: Optional[int] = None, stop: Optional[int] = None):
    """``(loss, grads)`` of ``loss_scale * loss``."""
    trace = forward(net, x, labels, target, start, stop)
    if trace.loss is None:
        raise ValueError("gradients need labels or a target")
    return loss_scale * trace.loss, net.backward(trace, loss_scale * trace.dloss)


def sgd_step(net: ToyNet, grads: dict, lr: float) -> None:
    for name, g in grads.items():
        p, m = net.params[name], net.masks[name]
        for k in g:
            p[k] = np.where(m[k], p[k] - lr * g[k], 0.0)


# ---------------------------------------------------------------------------
# data

@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def blob_dataset(n_train: int = 512, n_test: int = 256, classes: int = 4, size: int = 8,
                 seed: int = 1234, jitter: float = 0.5, noise: float = 0.25) -> Dataset:
    """Single-channel images holding one Gaussian blob; the class sets the blob centre.

    Centres sit on a ring around the image centre; the actual blob position
    is jittered and every pixel gets independent noise.
    """
    rng = np.random.default_rng(seed)
    angle = 2 * np.pi * np.arange(classes) / classes + np.pi / 4
    radius = size / 4.0
    centres = (size - 1) / 2.0 + radius * np.stack([np.sin(angle), np.cos(angle)], axis=1)
    yy, xx = np.mgrid[0:size, 0:size]

    def make(n):
        labels = rng.integers(0, classes, size=n)
        pos = centres[labels] + rng.normal(0.0, jitter, size=(n, 2))
        d2 = (yy[None] - pos[:, 0, None, None]) ** 2 + (xx[None] - pos[:, 1, None, None]) ** 2
        img = np.exp(-d2 / (2 * 1.2 ** 2)) + rng.normal(0.0, noise, size=(n, size, size))
        return img[:, None].astype(np.float64), labels

    xtr, ytr = make(n_train)
    xte, yte = make(n_test)
    return Dataset(xtr, ytr, xte, yte)


def evaluate(model, x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of ``labels`` matched by ``model.predict(x)``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(np.asarray(model.predict(x)) == labels))


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float  # mean training loss of the parameters at the end of the epoch
    accuracy: float  # test accuracy at the end of the epoch


@dataclass
class TrainReport:
    epochs: list
    threshold: Optional[float] = None
    epochs_to_threshold: Optional[int] = None  # None when never reached
    wall_time: float = field(default=0.0, compare=False)

    @property
    def initial_loss(self) -> float:
        return self.epochs[0].loss

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "accuracy"])
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.loss), repr(r.accuracy)])
        return buf.getvalue()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _record(net: ToyNet, data: Dataset, epoch: int, chunk: int = 256) -> EpochRecord:
    total = 0.0
    for i in range(0, len(data.y_train), chunk):
        sl = slice(i, i + chunk)
        total += forward(net, data.x_train[sl], data.y_train[sl]).loss * len(data.y_train[sl])
    loss = total / len(data.y_train)
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at epoch {epoch}")
    return EpochRecord(epoch, loss, evaluate(net, data.x_test, data.y_test))


def train(net: ToyNet, data: Dataset, epochs: int, lr: float, seed: int = 0,
          batch_size: int = 32, threshold: Optional[float] = None) -> TrainReport:
    """Plain minibatch SGD, in place. Epoch 0 records the starting point.

    The shuffle order comes from ``seed`` alone, so equal inputs give
    bit-identical reports.
    """
    if len(data.y_train) == 0:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    records = [_record(net, data, 0)]
    for epoch in range(1, epochs + 1):
        for idx in _batches(len(data.y_train), batch_size, rng):
            loss, grads = gradients(net, data.x_train[idx], data.y_train[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}")
            sgd_step(net, grads, lr)
        records.append(_record(net, data, epoch))
    reached = None
    if threshold is not None:
        reached = next((r.epoch for r in records if r.accuracy >= threshold), None)
    return TrainReport(records, threshold, reached, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# pruning

def module_layer_range(spec: ModelSpec, first: int, last: int) -> tuple:
    """Inclusive layer-index range spanned by modules ``first..last``."""
    return spec.modules[first].start, spec.modules[last].stop


def prune_network(net: ToyNet, rates: Sequence[float]) -> ToyNet:
    """Copy of ``net`` with module-level filter pruning applied as masks.

    In every module all convolutions but the last drop their
    ``floor(rate * F)`` smallest-L1 filters; the matching input channels of
    the next convolution are masked as well.
    """
    spec = net.spec
    if len(rates) != len(spec.modules):
        raise ValueError(f"expected {len(spec.modules)} rates, got {len(rates)}")
    out = net.copy()
    for m, module in enumerate(spec.modules):
        convs = spec.module_convs(module)
        for layer, nxt in zip(convs, convs[1:]):
            gone = filter_l1_prune(out.params[layer.name]["w"], rates[m])
            out.masks[layer.name]["w"][gone] = False
            out.masks[layer.name]["b"][gone] = False
            out.masks[nxt.name]["w"][:, gone] = False
    out.apply_masks()
    return out


def pattern_prune(net: ToyNet, layers: Optional[Sequence[str]] = None, k: int = 4,
                  size: int = 8) -> ToyNet:
    """Copy of ``net`` whose 3x3 convolutions keep only a k-entry pattern per kernel."""
    out = net.copy()
    for layer in net.spec.conv_layers:
        if (layers is not None and layer.name not in layers) or (layer.kernel_h, layer.kernel_w) != (3, 3):
            continue
        w = out.params[layer.name]["w"] * out.masks[layer.name]["w"]
        lib = design_pattern_library(w, k, size)
        out.masks[layer.name]["w"] &= prune_layer(w, lib).mask()
    out.apply_masks()
    return out


# ---------------------------------------------------------------------------
# teacher-student pre-training

@dataclass
class Student:
    block_id: int
    start: int  # first layer index, inclusive
    stop: int  # last layer index, inclusive
    net: ToyNet  # only layers start..stop are used and trained


class TeacherStudentGraph:
    """A frozen teacher plus pruned students, each standing in for one block."""

    def __init__(self, teacher: ToyNet, students: Sequence[Student]):
        for s in students:
            if s.net.spec != teacher.spec:
                raise ShapeError(f"student r{s.block_id} is built from a different model")
            if not teacher.first <= s.start <= s.stop <= teacher.last:
                raise ShapeError(f"student r{s.block_id} spans layers outside the model")
        self.teacher = teacher
        self.students = list(students)
        self.teacher_forwards = 0

    @classmethod
    def from_blocks(cls, teacher: ToyNet, blocks: Sequence) -> "TeacherStudentGraph":
        """One student per tuning block, pruned at the block's rates."""
        students = []
        n_modules = len(teacher.spec.modules)
        for block in blocks:
            rates = [0.0] * n_modules
            for sym in block.symbols:
                rates[sym.module] = sym.rate
            first, last = block.symbols[0].module, block.symbols[-1].module
            start, stop = module_layer_range(teacher.spec, first, last)
            students.append(Student(block.id, start, stop, prune_network(teacher, rates)))
        return cls(teacher, students)

    def teacher_activations(self, x: np.ndarray, count: bool = True) -> dict:
        """All teacher activations; index ``first - 1`` holds the input itself."""
        self.teacher_forwards += int(count)
        trace = self.teacher.run(x)
        acts = dict(trace.activations)
        acts[self.teacher.first - 1] = np.asarray(x, dtype=np.float64)
        return acts

    def reconstruction_loss(self, student: Student, acts: dict) -> float:
        return forward(student.net, acts[student.start - 1], target=acts[student.stop],
                       start=student.start, stop=student.stop).loss


@dataclass
class PretrainReport:
    weights: dict  # block id -> {layer name: {"w", "b"}}
    losses: dict  # block id -> per-epoch mean reconstruction loss (epoch 0 first)
    teacher_forwards: int
    batches: int


def pretrain_blocks(graph: TeacherStudentGraph, x: np.ndarray, epochs: int, lr: float,
                    seed: int = 0, batch_size: int = 32) -> PretrainReport:
    """Fit every student to its teacher block by minimising output MSE.

    One teacher forward per batch feeds all students; the teacher itself is
    never updated.
    """
    rng = np.random.default_rng(seed)
    losses = {s.block_id: [] for s in graph.students}

    def epoch_loss():
        acts = graph.teacher_activations(x, count=False)
        for s in graph.students:
            losses[s.block_id].append(graph.reconstruction_loss(s, acts))

    before = graph.teacher_forwards
    epoch_loss()
    batches = 0
    for _ in range(epochs):
        for idx in _batches(len(x), batch_size, rng):
            acts = graph.teacher_activations(x[idx])
            batches += 1
            for s in graph.students:
                loss, grads = gradients(s.net, acts[s.start - 1], target=acts[s.stop],
                                        start=s.start, stop=s.stop)
                if not np.isfinite(loss):
                    raise DivergenceError(f"block r{s.block_id} diverged")
                sgd_step(s.net, grads, lr)
        epoch_loss()
    weights = {}
    for s in graph.students:
        names = [l.name for l in s.net.spec.layers[s.start:s.stop + 1] if l.has_weights]
        weights[s.block_id] = {n: {k: v.copy() for k, v in s.net.params[n].items()} for n in names}
    return PretrainReport(weights, losses, graph.teacher_forwards - before, batches)


def block_weights_to_store(weights: Mapping) -> dict:
    """Flatten block weights for a ``.cpie`` file: ``r<id>/<layer>[.bias]``."""
    store = {}
    for bid, layers in sorted(weights.items()):
        for name, p in layers.items():
            store[f"r{bid}/{name}"] = p["w"]
            store[f"r{bid}/{name}.bias"] = p["b"]
    return store


def block_weights_from_store(store: Mapping) -> dict:
    weights = {}
    for key, arr in store.items():
        head, _, name = key.partition("/")
        if not head.startswith("r") or not name:
            raise ValueError(f"unexpected tensor name {key!r} in block file")
        bid = int(head[1:])
        kind = "b" if name.endswith(".bias") else "w"
        name = name[:-5] if kind == "b" else name
        weights.setdefault(bid, {}).setdefault(name, {})[kind] = np.asarray(arr, dtype=np.float64)
    return weights


def assemble(teacher: ToyNet, rates: Sequence[float], tiles: Sequence[tuple],
             blocks: Mapping, block_weights: Mapping) -> ToyNet:
    """Pruned network initialised from pre-trained blocks where tiled.

    ``tiles`` holds ``(position, block id)`` pairs, ``blocks`` maps block ids
    to tuning blocks. Untiled layers inherit the pruned teacher weights.
    """
    net = prune_network(teacher, rates)
    for _, bid in tiles:
        if bid not in block_weights:
            raise MissingBlock(bid)
        block = blocks[bid]
        start, stop = module_layer_range(net.spec, block.symbols[0].module, block.symbols[-1].module)
        for layer in net.spec.layers[start:stop + 1]:
            if not layer.has_weights:
                continue
            src = block_weights[bid].get(layer.name)
            if src is None:
                raise MissingBlock(bid)
            for k in ("w", "b"):
                if src[k].shape != net.params[layer.name][k].shape:
                    raise ShapeError(f"block r{bid} layer {layer.name}: shape {src[k].shape}")
                net.params[layer.name][k] = np.asarray(src[k], dtype=np.float64).copy()
    net.apply_masks()
    return net


def assemble_and_finetune(teacher: ToyNet, rates: Sequence[float], tiles: Sequence[tuple],
                          blocks: Mapping, block_weights: Mapping, data: Dataset, epochs: int,
                          lr: float, seed: int = 0, threshold: Optional[float] = None,
                          batch_size: int = 32):
    """Assemble, then train every parameter; returns ``(net, report)``."""
    net = assemble(teacher, rates, tiles, blocks, block_weights)
    report = train(net, data, epochs, lr, seed, batch_size, threshold)
    return net, report


TOY_PROTOTXT = """name: "toy"
layer { name: "data" type: "Input" top: "data" input_param { shape { dim: 1 dim: 1 dim: 8 dim: 8 } } }
layer { name: "conv1a" type: "Convolution" bottom: "data" top: "conv1a"
        convolution_param { num_output: 8 kernel_size: 3 pad: 1 } }
layer { name: "relu1a" type: "ReLU" bottom: "conv1a" top: "relu1a" }
layer { name: "conv1b" type: "Convolution" bottom: "relu1a" top: "conv1b"
        convolution_param { num_output: 8 kernel_size: 3 pad: 1 } }
layer { name: "relu1b" type: "ReLU" bottom: "conv1b" top: "relu1b" }
layer { name: "pool1" type: "Pooling" bottom: "relu1b" top: "pool1"
        pooling_param { pool: MAX kernel_size: 2 stride: 2 } }
layer { name: "conv2a" type: "Convolution" bottom: "pool1" top: "conv2a"
        convolution_param { num_output: 16 kernel_size: 3 pad: 1 } }
layer { name: "relu2a" type: "ReLU" bottom: "conv2a" top: "relu2a" }
layer { name: "conv2b" type: "Convolution" bottom: "relu2a" top: "conv2b"
        convolution_param { num_output: 16 kernel_size: 3 pad: 1 } }
layer { name: "relu2b" type: "ReLU" bottom: "conv2b" top: "relu2b" }
layer { name: "pool2" type: "Pooling" bottom: "relu2b" top: "pool2"
        pooling_param { pool: MAX kernel_size: 2 stride: 2 } }
layer { name: "conv3a" type: "Convolution" bottom: "pool2" top: "conv3a"
        convolution_param { num_output: 16 kernel_size: 3 pad: 1 } }
layer { name: "relu3a" type: "ReLU" bottom: "conv3a" top: "relu3a" }
layer { name: "conv3b" type: "Convolution" bottom: "relu3a" top: "conv3b"
        convolution_param { num_output: 16 kernel_size: 3 pad: 1 } }
layer { name: "relu3b" type: "ReLU" bottom: "conv3b" top: "relu3b" }
layer { name: "fc" type: "InnerProduct" bottom: "relu3b" top: "fc" inner_product_param { num_output: 4 } }
module { name: "m0" from: "conv1a" to: "relu1b" }
module { name: "m1" from: "conv2a" to: "relu2b" }
module { name: "m2" from: "conv3a" to: "relu3b" }
"""
