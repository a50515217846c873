import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunekit.model_ir import (
    FormatError,
    LayerwiseRepresentation,
    ProtoSyntaxError,
    SemanticError,
    format_prototxt,
    load_weights,
    parse_prototxt,
    save_weights,
    validate_model,
    weights_to_bytes,
)
from prunekit.trainer import TOY_PROTOTXT

MINIMAL = """
name: "tiny"
layer { name: "data" type: "Input" top: "data" input_param { shape { dim: 1 dim: 3 dim: 8 dim: 8 } } }
layer { name: "conv1" type: "Convolution" bottom: "data" top: "conv1"
        convolution_param { num_output: 2 kernel_size: 3 } }
"""


def test_minimal_model_has_two_layers_and_no_modules():
    spec = parse_prototxt(MINIMAL)
    assert spec.name == "tiny"
    assert [l.kind for l in spec.layers] == ["input", "convolution"]
    assert spec.modules == ()
    conv = spec.layers[1]
    assert (conv.num_output, conv.channels, conv.kernel_h, conv.kernel_w) == (2, 3, 3, 3)
    assert conv.out_shape == (2, 6, 6)


def test_module_block_covers_named_layer():
    spec = parse_prototxt(MINIMAL + 'module { name: "m0" from: "conv1" to: "conv1" }')
    assert len(spec.modules) == 1
    assert list(spec.modules[0].indices()) == [1]
    assert spec.module_of(1) == 0 and spec.module_of(0) is None


def test_dangling_bottom_names_the_reference():
    text = MINIMAL.replace('bottom: "data"', 'bottom: "missing"')
    with pytest.raises(SemanticError, match="missing"):
        parse_prototxt(text)


@pytest.mark.parametrize("bad, err", [
    ('layer { name: "x" type: "Softmax" bottom: "data" top: "x" }', ProtoSyntaxError),
    ('layer { name: "conv1" type: "ReLU" bottom: "data" top: "r" }', SemanticError),
    ('module { name: "m" from: "nope" to: "conv1" }', SemanticError),
    ('layer { name: "x" type: "ReLU" bottom: "data" top: "x" ', ProtoSyntaxError),
    ('layer { name: "x" @ }', ProtoSyntaxError),
])
def test_rejects_malformed_or_inconsistent_text(bad, err):
    with pytest.raises(err):
        parse_prototxt(MINIMAL + bad)


def test_syntax_error_reports_position():
    with pytest.raises(ProtoSyntaxError) as info:
        parse_prototxt('name: "a"\nlayer { name: ? }')
    assert info.value.line == 2


def test_overlapping_modules_rejected():
    text = TOY_PROTOTXT + 'module { name: "m9" from: "relu1b" to: "conv2a" }'
    with pytest.raises(SemanticError, match="overlap"):
        parse_prototxt(text)


def test_parse_format_round_trip():
    for text in (MINIMAL, TOY_PROTOTXT):
        spec = parse_prototxt(text)
        again = parse_prototxt(format_prototxt(spec))
        assert again == spec
        assert format_prototxt(again) == format_prototxt(spec)


def test_module_layers_partition_the_conv_sequence():
    spec = parse_prototxt(TOY_PROTOTXT)
    in_modules = [l.name for m in spec.modules for l in spec.module_convs(m)]
    outside = [l.name for i, l in enumerate(spec.layers) if l.is_conv and spec.module_of(i) is None]
    assert sorted(in_modules + outside) == sorted(l.name for l in spec.conv_layers)
    assert in_modules == ["conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b"]


def test_empty_store_is_twelve_bytes():
    buf = io.BytesIO()
    assert save_weights({}, buf) == 12
    assert buf.getvalue() == b"CPIE" + struct.pack("<II", 1, 0)
    assert load_weights(buf.getvalue()) == {}


def test_single_zero_tensor_layout():
    data = weights_to_bytes({"w": np.zeros((1, 1, 1, 1), dtype=np.float32)})
    expected = b"CPIE" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" \
        + struct.pack("<B4I", 4, 1, 1, 1, 1) + struct.pack("<f", 0.0)
    assert data == expected
    back = load_weights(data)
    assert back["w"].shape == (1, 1, 1, 1) and back["w"].tobytes() == np.zeros(1, np.float32).tobytes()


def test_save_returns_bytes_written_and_reports_sink_failure():
    class Broken(io.RawIOBase):
        def write(self, b):
            raise OSError("disk full")

    with pytest.raises(OSError):
        save_weights({"a": np.ones(2)}, Broken())


def _random_store(rng, n):
    store = {}
    for i in range(n):
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rng.integers(0, 5)))
        store[f"t{i}"] = rng.standard_normal(shape).astype(np.float32)
    return store


def test_save_load_save_is_byte_identical():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        store = _random_store(rng, int(rng.integers(0, 6)))
        data = weights_to_bytes(store)
        back = load_weights(data)
        assert list(back) == list(store)
        for k in store:
            assert back[k].tobytes() == store[k].tobytes()
        assert weights_to_bytes(back) == data


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_round_trip_preserves_every_float_bit(values):
    arr = np.array(values, dtype=np.float32)
    back = load_weights(weights_to_bytes({"v": arr}))["v"]
    assert back.tobytes() == arr.tobytes()


def test_truncation_reports_offset():
    data = weights_to_bytes({"w": np.ones((2, 3), dtype=np.float32)})
    for cut in (2, 10, 14, len(data) - 1):
        with pytest.raises(FormatError) as info:
            load_weights(data[:cut])
        assert 0 <= info.value.offset <= cut


def test_bad_magic_version_and_trailing_bytes():
    data = weights_to_bytes({"w": np.ones(1, dtype=np.float32)})
    with pytest.raises(FormatError, match="magic"):
        load_weights(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        load_weights(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatError, match="trailing"):
        load_weights(data + b"\0")


def test_non_finite_values_rejected_on_both_sides():
    with pytest.raises(ValueError):
        weights_to_bytes({"w": np.array([np.nan], dtype=np.float32)})
    good = weights_to_bytes({"w": np.array([1.0], dtype=np.float32)})
    bad = good[:-4] + struct.pack("<f", float("inf"))
    with pytest.raises(FormatError):
        load_weights(bad)


def _toy_store(spec):
    store = {}
    for layer in spec.layers:
        if layer.kind == "convolution":
            store[layer.name] = np.zeros((layer.num_output, layer.channels, layer.kernel_h, layer.kernel_w))
        elif layer.kind == "fully_connected":
            store[layer.name] = np.zeros((layer.num_output, layer.channels))
    return store


def test_validate_consistent_pair_is_clean():
    spec = parse_prototxt(TOY_PROTOTXT)
    assert validate_model(spec, _toy_store(spec)) == []


def test_validate_dim_mismatch_and_missing():
    spec = parse_prototxt(MINIMAL + """
layer { name: "conv2" type: "Convolution" bottom: "conv1" top: "conv2"
        convolution_param { num_output: 2 kernel_size: 3 } }""")
    store = {"conv1": np.zeros((2, 3, 3, 2))}
    found = validate_model(spec, store)
    assert [(v.layer, v.kind) for v in found] == [("conv1", "dim-mismatch"), ("conv2", "missing-weights")]


def test_layerwise_representation_checks_mask_shape():
    spec = parse_prototxt(MINIMAL)
    conv = spec.layers[1]
    LayerwiseRepresentation(conv, mask=np.ones((2, 3), dtype=bool))
    with pytest.raises(ValueError):
        LayerwiseRepresentation(conv, mask=np.ones((3, 2), dtype=bool))
    with pytest.raises(ValueError):
        LayerwiseRepresentation(spec.layers[0], mask=np.ones((1, 1), dtype=bool))
