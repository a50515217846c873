"""Model description, weight files and the layerwise representation.

The text format is a small subset of Caffe prototxt::

    name: "toy"
    layer { name: "data" type: "Input" top: "data"
            input_param { shape { dim: 1 dim: 1 dim: 8 dim: 8 } } }
    layer { name: "conv1" type: "Convolution" bottom: "data" top: "conv1"
            convolution_param { num_output: 8 kernel_size: 3 pad: 1 } }
    module { name: "m0" from: "conv1" to: "conv1" }

``module`` blocks mark the boundaries of convolution modules by naming the
first and last layer they contain.
"""
from __future__ import annotations

import io
import re
import struct
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, BinaryIO, Optional, Union

import numpy as np

if TYPE_CHECKING:
    from .engine import TuneConfig
    from .pruner import PatternAssignment

__all__ = [
    "ModelSpec",
    "LayerSpec",
    "ModuleSpec",
    "LayerwiseRepresentation",
    "Violation",
    "ProtoSyntaxError",
    "SemanticError",
    "FormatError",
    "parse_prototxt",
    "format_prototxt",
    "save_weights",
    "load_weights",
    "weights_to_bytes",
    "validate_model",
    "expected_weight_shape",
]

KINDS = ("input", "convolution", "relu", "pool", "fully_connected")

_TYPE_NAMES = {
    "Input": "input",
    "Convolution": "convolution",
    "ReLU": "relu",
    "Pooling": "pool",
    "InnerProduct": "fully_connected",
}
_KIND_TO_TYPE = {v: k for k, v in _TYPE_NAMES.items()}


class ProtoSyntaxError(ValueError):
    """Malformed prototxt text. Carries a 1-based line and column."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class SemanticError(ValueError):
    """Well-formed text describing an inconsistent model."""


class FormatError(ValueError):
    """Corrupt binary payload. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    top: str
    bottom: Optional[str] = None
    num_output: Optional[int] = None
    channels: Optional[int] = None
    kernel_h: Optional[int] = None
    kernel_w: Optional[int] = None
    stride: int = 1
    pad: int = 0
    # pooling window (square), only for kind == "pool"
    pool_size: Optional[int] = None
    # (channels, height, width) flowing in / out; height/width may be unknown
    in_shape: Optional[tuple] = None
    out_shape: Optional[tuple] = None

    @property
    def is_conv(self) -> bool:
        return self.kind == "convolution"

    @property
    def has_weights(self) -> bool:
        return self.kind in ("convolution", "fully_connected")

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        if self.kind == "convolution":
            oh = (height + 2 * self.pad - self.kernel_h) // self.stride + 1
            ow = (width + 2 * self.pad - self.kernel_w) // self.stride + 1
            return oh, ow
        if self.kind == "pool":
            return ((height - self.pool_size) // self.stride + 1,
                    (width - self.pool_size) // self.stride + 1)
        return height, width


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    start: int
    stop: int  # inclusive

    def indices(self) -> range:
        return range(self.start, self.stop + 1)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    modules: tuple = ()

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def conv_layers(self) -> list:
        return [layer for layer in self.layers if layer.is_conv]

    def module_convs(self, module: ModuleSpec) -> list:
        return [self.layers[i] for i in module.indices() if self.layers[i].is_conv]

    def module_of(self, layer_index: int) -> Optional[int]:
        for m, module in enumerate(self.modules):
            if module.start <= layer_index <= module.stop:
                return m
        return None


@dataclass(frozen=True)
class Violation:
    layer: str
    kind: str  # "missing-weights" | "dim-mismatch" | "non-finite" | "invariant"
    message: str


@dataclass
class LayerwiseRepresentation:
    """Per-layer record the compiler passes around: pattern and tuning data."""

    layer: LayerSpec
    patterns: Optional["PatternAssignment"] = None
    mask: Optional[np.ndarray] = None
    tune: Optional["TuneConfig"] = None

    def __post_init__(self):
        if self.patterns is not None and not self.layer.is_conv:
            raise ValueError(f"pattern metadata on non-convolution layer {self.layer.name!r}")
        if self.mask is not None:
            expected = (self.layer.num_output, self.layer.channels)
            if tuple(self.mask.shape) != expected:
                raise ValueError(f"mask shape {self.mask.shape} != {expected}")


# ---------------------------------------------------------------------------
# prototxt tokenizer / parser

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"[^"\n]*"|'[^'\n]*')
  | (?P<number>-?\d+(?:\.\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}:])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ProtoSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            value = m.group()
            if kind == "string":
                value = value[1:-1]
            toks.append(_Tok(kind, value, line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None) -> _Tok:
        tok = self.next()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind
            raise ProtoSyntaxError(f"expected {want!r}, got {tok.value or tok.kind!r}", tok.line, tok.col)
        return tok

    def block(self) -> list:
        """Parse ``{ key: value ... }`` into an ordered list of (key, value, token)."""
        self.expect("punct", "{")
        items = []
        while True:
            tok = self.peek()
            if tok.kind == "punct" and tok.value == "}":
                self.next()
                return items
            if tok.kind == "eof":
                raise ProtoSyntaxError("unterminated block", tok.line, tok.col)
            items.append(self.entry())

    def entry(self):
        key = self.expect("ident")
        tok = self.peek()
        if tok.kind == "punct" and tok.value == "{":
            return key.value, self.block(), key
        self.expect("punct", ":")
        val = self.next()
        if val.kind not in ("string", "number", "ident"):
            raise ProtoSyntaxError(f"expected a value, got {val.value or val.kind!r}", val.line, val.col)
        return key.value, val, key

    def document(self) -> list:
        items = []
        while self.peek().kind != "eof":
            items.append(self.entry())
        return items


def _scalar(val, key: _Tok, kind: str):
    if isinstance(val, list):
        raise ProtoSyntaxError(f"field {key.value!r} expects a scalar", key.line, key.col)
    if kind == "int":
        if val.kind != "number" or "." in val.value:
            raise ProtoSyntaxError(f"field {key.value!r} expects an integer", val.line, val.col)
        return int(val.value)
    if kind == "str" and val.kind != "string":
        raise ProtoSyntaxError(f"field {key.value!r} expects a quoted string", val.line, val.col)
    return val.value


def _fields(items, allowed: dict, where: str) -> dict:
    out = {}
    for key, val, tok in items:
        if key not in allowed:
            raise ProtoSyntaxError(f"unknown field {key!r} in {where}", tok.line, tok.col)
        spec = allowed[key]
        if spec == "block":
            if not isinstance(val, list):
                raise ProtoSyntaxError(f"field {key!r} expects a block", tok.line, tok.col)
            out[key] = (val, tok)
            continue
        if key in out:
            raise ProtoSyntaxError(f"repeated field {key!r}", tok.line, tok.col)
        out[key] = _scalar(val, tok, spec)
    return out


def _raw_layer(items, tok: _Tok) -> dict:
    f = _fields(items, {
        "name": "str", "type": "str", "bottom": "str", "top": "str",
        "convolution_param": "block", "pooling_param": "block",
        "inner_product_param": "block", "input_param": "block",
    }, "layer")
    for required in ("name", "type", "top"):
        if required not in f:
            raise ProtoSyntaxError(f"layer missing {required!r}", tok.line, tok.col)
    if f["type"] not in _TYPE_NAMES:
        raise ProtoSyntaxError(f"unsupported layer type {f['type']!r}", tok.line, tok.col)
    kind = _TYPE_NAMES[f["type"]]
    raw = {"name": f["name"], "kind": kind, "top": f["top"], "bottom": f.get("bottom")}
    param_key = {"convolution": "convolution_param", "pool": "pooling_param",
                 "fully_connected": "inner_product_param", "input": "input_param"}.get(kind)
    for key in ("convolution_param", "pooling_param", "inner_product_param", "input_param"):
        if key in f and key != param_key:
            _, ktok = f[key]
            raise ProtoSyntaxError(f"{key!r} not allowed on {f['type']} layer", ktok.line, ktok.col)
    if kind == "convolution":
        if "convolution_param" not in f:
            raise ProtoSyntaxError("Convolution layer needs convolution_param", tok.line, tok.col)
        items, ptok = f["convolution_param"]
        p = _fields(items, {"num_output": "int", "kernel_size": "int", "kernel_h": "int",
                            "kernel_w": "int", "stride": "int", "pad": "int"}, "convolution_param")
        if "num_output" not in p:
            raise ProtoSyntaxError("convolution_param needs num_output", ptok.line, ptok.col)
        kh = p.get("kernel_h", p.get("kernel_size"))
        kw = p.get("kernel_w", p.get("kernel_size"))
        if kh is None or kw is None:
            raise ProtoSyntaxError("convolution_param needs kernel_size", ptok.line, ptok.col)
        raw.update(num_output=p["num_output"], kernel_h=kh, kernel_w=kw,
                   stride=p.get("stride", 1), pad=p.get("pad", 0))
    elif kind == "pool":
        if "pooling_param" not in f:
            raise ProtoSyntaxError("Pooling layer needs pooling_param", tok.line, tok.col)
        items, ptok = f["pooling_param"]
        p = _fields(items, {"pool": "ident", "kernel_size": "int", "stride": "int"}, "pooling_param")
        if p.get("pool", "MAX") != "MAX":
            raise ProtoSyntaxError("only MAX pooling is supported", ptok.line, ptok.col)
        if "kernel_size" not in p:
            raise ProtoSyntaxError("pooling_param needs kernel_size", ptok.line, ptok.col)
        raw.update(pool_size=p["kernel_size"], stride=p.get("stride", p["kernel_size"]))
    elif kind == "fully_connected":
        if "inner_product_param" not in f:
            raise ProtoSyntaxError("InnerProduct layer needs inner_product_param", tok.line, tok.col)
        items, ptok = f["inner_product_param"]
        p = _fields(items, {"num_output": "int"}, "inner_product_param")
        if "num_output" not in p:
            raise ProtoSyntaxError("inner_product_param needs num_output", ptok.line, ptok.col)
        raw["num_output"] = p["num_output"]
    elif kind == "input" and "input_param" in f:
        items, _ = f["input_param"]
        shape_items = _fields(items, {"shape": "block"}, "input_param")
        if "shape" in shape_items:
            sitems, stok = shape_items["shape"]
            dims = []
            for key, val, ktok in sitems:
                if key != "dim":
                    raise ProtoSyntaxError(f"unknown field {key!r} in shape", ktok.line, ktok.col)
                dims.append(_scalar(val, ktok, "int"))
            if len(dims) == 3:
                dims = [1] + dims
            if len(dims) != 4:
                raise ProtoSyntaxError("input shape needs 3 or 4 dims", stok.line, stok.col)
            raw["in_shape"] = tuple(dims[1:])
    return raw


def _build_model(name: str, raw_layers: list, raw_modules: list) -> ModelSpec:
    layers = []
    shapes: dict = {}
    seen = set()
    for raw in raw_layers:
        lname, kind = raw["name"], raw["kind"]
        if lname in seen:
            raise SemanticError(f"duplicate layer name {lname!r}")
        seen.add(lname)
        if kind == "input":
            if raw["bottom"] is not None:
                raise SemanticError(f"input layer {lname!r} cannot have a bottom")
            shape = raw.get("in_shape") or (1, None, None)
            if min(d for d in shape if d is not None) < 1:
                raise SemanticError(f"input layer {lname!r} has a non-positive dim")
            shapes[raw["top"]] = shape
            layers.append(LayerSpec(name=lname, kind=kind, top=raw["top"], channels=shape[0],
                                    in_shape=shape, out_shape=shape))
            continue
        bottom = raw["bottom"]
        if bottom is None:
            raise SemanticError(f"layer {lname!r} has no bottom")
        if bottom not in shapes:
            raise SemanticError(f"layer {lname!r} references undeclared bottom {bottom!r}")
        c, h, w = shapes[bottom]
        kw = {}
        if kind == "convolution":
            if raw["num_output"] < 1 or raw["kernel_h"] < 1 or raw["kernel_w"] < 1:
                raise SemanticError(f"layer {lname!r}: num_output and kernel dims must be >= 1")
            if raw["stride"] < 1 or raw["pad"] < 0:
                raise SemanticError(f"layer {lname!r}: stride must be >= 1 and pad >= 0")
            kw = dict(num_output=raw["num_output"], channels=c, kernel_h=raw["kernel_h"],
                      kernel_w=raw["kernel_w"], stride=raw["stride"], pad=raw["pad"])
        elif kind == "pool":
            if raw["pool_size"] < 1 or raw["stride"] < 1:
                raise SemanticError(f"layer {lname!r}: pool kernel and stride must be >= 1")
            kw = dict(pool_size=raw["pool_size"], stride=raw["stride"], channels=c)
        elif kind == "fully_connected":
            if raw["num_output"] < 1:
                raise SemanticError(f"layer {lname!r}: num_output must be >= 1")
            if h is None:
                raise SemanticError(f"layer {lname!r}: input spatial size unknown")
            kw = dict(num_output=raw["num_output"], channels=c * h * w)
        else:
            kw = dict(channels=c)
        layer = LayerSpec(name=lname, kind=kind, top=raw["top"], bottom=bottom,
                          in_shape=(c, h, w), **kw)
        if kind == "fully_connected":
            out = (layer.num_output, 1, 1)
        elif h is None:
            out = (layer.num_output or c, None, None)
        else:
            oh, ow = layer.output_hw(h, w)
            if oh < 1 or ow < 1:
                raise SemanticError(f"layer {lname!r} produces an empty output ({oh}x{ow})")
            out = (layer.num_output or c, oh, ow)
        layer = replace(layer, out_shape=out)
        shapes[raw["top"]] = out
        layers.append(layer)

    index = {layer.name: i for i, layer in enumerate(layers)}
    modules = []
    names = set()
    for mname, start_name, stop_name in raw_modules:
        if mname in names:
            raise SemanticError(f"duplicate module name {mname!r}")
        names.add(mname)
        for ref in (start_name, stop_name):
            if ref not in index:
                raise SemanticError(f"module {mname!r} references unknown layer {ref!r}")
        start, stop = index[start_name], index[stop_name]
        if start > stop:
            raise SemanticError(f"module {mname!r}: {start_name!r} comes after {stop_name!r}")
        for other in modules:
            if start <= other.stop and other.start <= stop:
                raise SemanticError(f"module {mname!r} overlaps module {other.name!r}")
        modules.append(ModuleSpec(mname, start, stop))
    modules.sort(key=lambda m: m.start)
    return ModelSpec(name=name, layers=tuple(layers), modules=tuple(modules))


def parse_prototxt(text: str) -> ModelSpec:
    """Parse the prototxt subset into a validated :class:`ModelSpec`."""
    items = _Parser(text).document()
    name = ""
    raw_layers, raw_modules = [], []
    for key, val, tok in items:
        if key == "name":
            name = _scalar(val, tok, "str")
        elif key == "layer":
            if not isinstance(val, list):
                raise ProtoSyntaxError("'layer' expects a block", tok.line, tok.col)
            raw_layers.append(_raw_layer(val, tok))
        elif key == "module":
            if not isinstance(val, list):
                raise ProtoSyntaxError("'module' expects a block", tok.line, tok.col)
            f = _fields(val, {"name": "str", "from": "str", "to": "str"}, "module")
            for required in ("name", "from", "to"):
                if required not in f:
                    raise ProtoSyntaxError(f"module missing {required!r}", tok.line, tok.col)
            raw_modules.append((f["name"], f["from"], f["to"]))
        else:
            raise ProtoSyntaxError(f"unknown top-level field {key!r}", tok.line, tok.col)
    return _build_model(name, raw_layers, raw_modules)


def format_prototxt(spec: ModelSpec) -> str:
    """Pretty-print a model; ``parse_prototxt`` of the result reproduces ``spec``."""
    out = [f'name: "{spec.name}"']
    for layer in spec.layers:
        out.append("layer {")
        out.append(f'  name: "{layer.name}"')
        out.append(f'  type: "{_KIND_TO_TYPE[layer.kind]}"')
        if layer.bottom is not None:
            out.append(f'  bottom: "{layer.bottom}"')
        out.append(f'  top: "{layer.top}"')
        if layer.kind == "input" and layer.in_shape[1] is not None:
            dims = " ".join(f"dim: {d}" for d in (1,) + tuple(layer.in_shape))
            out.append(f"  input_param {{ shape {{ {dims} }} }}")
        elif layer.kind == "input" and layer.in_shape[0] != 1:
            raise ValueError("input with unknown spatial size must have one channel to print")
        elif layer.kind == "convolution":
            out.append(
                f"  convolution_param {{ num_output: {layer.num_output} kernel_h: {layer.kernel_h}"
                f" kernel_w: {layer.kernel_w} stride: {layer.stride} pad: {layer.pad} }}")
        elif layer.kind == "pool":
            out.append(f"  pooling_param {{ pool: MAX kernel_size: {layer.pool_size} stride: {layer.stride} }}")
        elif layer.kind == "fully_connected":
            out.append(f"  inner_product_param {{ num_output: {layer.num_output} }}")
        out.append("}")
    for module in spec.modules:
        first = spec.layers[module.start].name
        last = spec.layers[module.stop].name
        out.append(f'module {{ name: "{module.name}" from: "{first}" to: "{last}" }}')
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# weight files

MAGIC = b"CPIE"
VERSION = 1


def weights_to_bytes(store: Mapping) -> bytes:
    buf = io.BytesIO()
    save_weights(store, buf)
    return buf.getvalue()


def save_weights(store: Mapping, sink: BinaryIO) -> int:
    """Write ``store`` (name -> array) to ``sink``; returns the byte count.

    Layout: ``CPIE``, u32 version, u32 tensor count, then per tensor
    u16 name length, name, u8 rank, u32 dims, f32 payload (all little-endian).
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arr in store.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite values")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = b"".join(parts)
    try:
        sink.write(data)
    except (OSError, ValueError) as exc:
        raise OSError(f"failed to write weights: {exc}") from exc
    return len(data)


def load_weights(source: Union[BinaryIO, bytes, bytearray]) -> dict:
    """Inverse of :func:`save_weights`. Arrays come back as read-only float32."""
    data = bytes(source) if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated {what}: need {n} bytes, have {len(data) - pos}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    store = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        at = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", at) from exc
        if name in store:
            raise FormatError(f"duplicate tensor {name!r}", at)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        at = pos
        arr = np.frombuffer(take(4 * n, f"payload of {name!r}"), dtype="<f4").reshape(dims)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} has non-finite values", at)
        store[name] = arr
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", pos)
    return store


def expected_weight_shape(layer: LayerSpec) -> Optional[tuple]:
    if layer.kind == "convolution":
        return (layer.num_output, layer.channels, layer.kernel_h, layer.kernel_w)
    if layer.kind == "fully_connected":
        return (layer.num_output, layer.channels)
    return None


def validate_model(spec: ModelSpec, store: Mapping) -> list:
    """List every inconsistency between ``spec`` and ``store``; empty when they agree."""
    violations = []
    seen_names, tops = set(), set()
    for i, layer in enumerate(spec.layers):
        if layer.name in seen_names:
            violations.append(Violation(layer.name, "invariant", "duplicate layer name"))
        seen_names.add(layer.name)
        if layer.bottom is not None and layer.bottom not in tops:
            violations.append(Violation(layer.name, "invariant", f"dangling bottom {layer.bottom!r}"))
        tops.add(layer.top)
    ordered = sorted(spec.modules, key=lambda m: m.start)
    for a, b in zip(ordered, ordered[1:]):
        if b.start <= a.stop:
            violations.append(Violation(b.name, "invariant", f"module overlaps {a.name!r}"))
    for m in ordered:
        if not (0 <= m.start <= m.stop < len(spec.layers)):
            violations.append(Violation(m.name, "invariant", "module range outside the model"))

    for layer in spec.layers:
        shape = expected_weight_shape(layer)
        if shape is None:
            continue
        if layer.name not in store:
            violations.append(Violation(layer.name, "missing-weights", f"no tensor for {layer.name!r}"))
            continue
        arr = np.asarray(store[layer.name])
        if tuple(arr.shape) != shape:
            violations.append(Violation(layer.name, "dim-mismatch",
                                        f"expected {list(shape)}, got {list(arr.shape)}"))
        elif not np.all(np.isfinite(arr)):
            violations.append(Violation(layer.name, "non-finite", "tensor has non-finite values"))
    return violations
