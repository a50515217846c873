import math

import numpy as np
import pytest

from oracles import cross_entropy, naive_cnn_forward
from prunekit.model_ir import load_weights, parse_prototxt, weights_to_bytes
from prunekit.planner import ConfigSymbol, TuningBlock, estimate_size
from prunekit.trainer import (
    TOY_PROTOTXT,
    Dataset,
    MissingBlock,
    ShapeError,
    Student,
    TeacherStudentGraph,
    ToyNet,
    assemble,
    assemble_and_finetune,
    blob_dataset,
    block_weights_from_store,
    block_weights_to_store,
    evaluate,
    forward,
    gradients,
    pattern_prune,
    pretrain_blocks,
    prune_network,
    train,
)

TOY = parse_prototxt(TOY_PROTOTXT)
TOY_CHAIN = [("conv", 1, 1), ("relu",), ("conv", 1, 1), ("relu",), ("pool", 2, 2),
             ("conv", 1, 1), ("relu",), ("conv", 1, 1), ("relu",), ("pool", 2, 2),
             ("conv", 1, 1), ("relu",), ("conv", 1, 1), ("relu",), ("fc",)]

IDENTITY_PROTOTXT = """name: "id"
layer { name: "data" type: "Input" top: "data" input_param { shape { dim: 1 dim: 3 dim: 4 dim: 4 } } }
layer { name: "conv" type: "Convolution" bottom: "data" top: "conv"
        convolution_param { num_output: 3 kernel_size: 1 } }
"""


def toy_net(seed=0):
    return ToyNet.init(TOY, seed)


def oracle_params(net):
    out = {}
    for i, layer in enumerate(TOY.layers[1:]):
        if layer.has_weights:
            out[i] = (net.params[layer.name]["w"], net.params[layer.name]["b"])
    return out


def test_zero_weights_give_uniform_cross_entropy():
    net = toy_net()
    for p in net.params.values():
        p["w"][:] = 0
    x = np.random.default_rng(0).standard_normal((5, 1, 8, 8))
    assert forward(net, x, np.array([0, 1, 2, 3, 0])).loss == pytest.approx(math.log(4), abs=1e-12)


def test_identity_one_by_one_conv_passes_through():
    net = ToyNet.init(parse_prototxt(IDENTITY_PROTOTXT))
    net.params["conv"]["w"] = np.eye(3).reshape(3, 3, 1, 1)
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
    assert np.array_equal(net.run(x).output, x)


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(2)
    for seed in range(3):
        net = toy_net(seed)
        for p in net.params.values():
            p["b"][:] = rng.standard_normal(p["b"].shape)
        x = rng.standard_normal((3, 1, 8, 8))
        got = net.run(x).output
        want = naive_cnn_forward(TOY_CHAIN, oracle_params(net), x)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
        labels = rng.integers(0, 4, size=3)
        assert forward(net, x, labels).loss == pytest.approx(cross_entropy(want, labels), abs=1e-12)


def numeric_grad(loss_fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = loss_fn()
        arr[i] = old - h
        down = loss_fn()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30)


def check_all_gradients(net, x, labels=None, target=None, start=None, stop=None):
    _, grads = gradients(net, x, labels, target, start=start, stop=stop)
    loss_fn = lambda: forward(net, x, labels, target, start, stop).loss
    worst = 0.0
    for name, g in grads.items():
        for k in ("w", "b"):
            num = numeric_grad(loss_fn, net.params[name][k])
            worst = max(worst, rel_error(num, g[k]))
    return worst, sorted(grads)


def test_gradients_cross_entropy_full_network():
    rng = np.random.default_rng(3)
    net = toy_net(3)
    for p in net.params.values():
        p["b"][:] = 0.1 * rng.standard_normal(p["b"].shape)
    x = rng.standard_normal((3, 1, 8, 8))
    worst, names = check_all_gradients(net, x, labels=np.array([0, 2, 3]))
    assert names == ["conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "fc"]
    assert worst < 1e-6


def test_gradients_mse_on_a_block():
    rng = np.random.default_rng(4)
    net = toy_net(4)
    start, stop = TOY.modules[1].start, TOY.modules[1].stop
    x = rng.standard_normal((2, 8, 4, 4))
    target = rng.standard_normal((2, 16, 4, 4))
    worst, names = check_all_gradients(net, x, target=target, start=start, stop=stop)
    assert names == ["conv2a", "conv2b"] and worst < 1e-6


def test_zero_input_gives_zero_first_layer_weight_gradient():
    net = toy_net(5)
    _, grads = gradients(net, np.zeros((2, 1, 8, 8)), np.array([1, 2]))
    assert not grads["conv1a"]["w"].any()
    assert grads["fc"]["b"].any()


def test_loss_scale_is_linear():
    rng = np.random.default_rng(6)
    net = toy_net(6)
    x, y = rng.standard_normal((4, 1, 8, 8)), rng.integers(0, 4, 4)
    l1, g1 = gradients(net, x, y)
    l3, g3 = gradients(net, x, y, loss_scale=3.0)
    assert l3 == pytest.approx(3 * l1)
    for name in g1:
        np.testing.assert_allclose(g3[name]["w"], 3 * g1[name]["w"], rtol=1e-12, atol=1e-15)


def test_zero_learning_rate_keeps_parameters():
    net = toy_net(7)
    before = {n: p["w"].copy() for n, p in net.params.items()}
    data = blob_dataset(64, 32)
    train(net, data, epochs=1, lr=0.0)
    for n, p in net.params.items():
        assert np.array_equal(p["w"], before[n])


def test_shape_errors():
    net = toy_net()
    with pytest.raises(ShapeError):
        net.run(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 1, 8, 8)), np.array([0]))


def test_two_class_blobs_are_learnable():
    data = blob_dataset(256, 128, classes=2, seed=8)
    net = toy_net(8)
    report = train(net, data, epochs=20, lr=0.05, seed=8)
    assert report.final_accuracy >= 0.95
    assert report.epochs[-1].loss < report.initial_loss
    assert [r.epoch for r in report.epochs] == list(range(21))


def test_training_is_deterministic():
    data = blob_dataset(96, 32, seed=9)
    a, b = toy_net(9), toy_net(9)
    ra = train(a, data, epochs=2, lr=0.05, seed=1, threshold=0.5)
    rb = train(b, data, epochs=2, lr=0.05, seed=1, threshold=0.5)
    assert ra == rb and ra.to_csv() == rb.to_csv()
    assert all(np.array_equal(a.params[n]["w"], b.params[n]["w"]) for n in a.params)


def test_evaluate_extremes():
    class Fixed:
        def __init__(self, out):
            self.out = out

        def predict(self, x):
            return self.out

    labels = np.random.default_rng(10).integers(0, 4, size=2000)
    assert evaluate(Fixed(labels), None, labels) == 1.0
    assert evaluate(Fixed((labels + 1) % 4), None, labels) == 0.0
    guess = np.random.default_rng(11).integers(0, 4, size=2000)
    sigma = math.sqrt(0.25 * 0.75 / 2000)
    assert abs(evaluate(Fixed(guess), None, labels) - 0.25) < 3 * sigma
    with pytest.raises(ValueError):
        evaluate(Fixed(labels[:0]), None, labels[:0])


def test_prune_network_matches_size_estimate():
    net = toy_net(12)
    for rates in ([0.0, 0.0, 0.0], [0.3, 0.5, 0.7], [0.7, 0.7, 0.3], [0.5, 0.0, 0.5]):
        pruned = prune_network(net, rates)
        assert pruned.param_count() == estimate_size(TOY, rates)
    assert net.param_count() == estimate_size(TOY, [0, 0, 0])


def test_masks_survive_training():
    data = blob_dataset(64, 32, seed=13)
    net = pattern_prune(prune_network(toy_net(13), [0.5, 0.3, 0.3]))
    count = net.param_count()
    train(net, data, epochs=1, lr=0.05)
    assert net.param_count() == count
    for name, p in net.params.items():
        assert not p["w"][~net.masks[name]["w"]].any()
    assert (np.count_nonzero(net.masks["conv1b"]["w"], axis=(2, 3)) <= 4).all()


def _block(bid, rates):
    return TuningBlock(bid, tuple(ConfigSymbol(m, r) for m, r in rates), 2, 2)


def _teacher():
    data = blob_dataset(128, 64, seed=14)
    teacher = toy_net(14)
    train(teacher, data, epochs=2, lr=0.05)
    return teacher, data


def test_identity_student_has_zero_loss():
    teacher, data = _teacher()
    graph = TeacherStudentGraph.from_blocks(teacher, [_block(1, [(0, 0.0)])])
    acts = graph.teacher_activations(data.x_train[:16])
    assert graph.reconstruction_loss(graph.students[0], acts) == 0.0


def test_pretraining_lowers_loss_and_shares_teacher_forwards():
    teacher, data = _teacher()
    frozen = teacher.copy()
    blocks = [_block(1, [(0, 0.5)]), _block(2, [(1, 0.7)]), _block(3, [(0, 0.3), (1, 0.3)])]
    rep = None
    for n in (1, 3):
        graph = TeacherStudentGraph.from_blocks(teacher, blocks[:n])
        rep = pretrain_blocks(graph, data.x_train, epochs=3, lr=0.02, seed=0, batch_size=32)
        assert rep.batches == 3 * 4
        assert rep.teacher_forwards == rep.batches
    for bid, losses in rep.losses.items():
        assert len(losses) == 4 and losses[-1] < losses[0]
    for name in teacher.params:
        assert np.array_equal(teacher.params[name]["w"], frozen.params[name]["w"])
    assert sorted(rep.weights[3]) == ["conv1a", "conv1b", "conv2a", "conv2b"]


def test_student_must_lie_inside_the_model():
    teacher = toy_net()
    with pytest.raises(ShapeError):
        TeacherStudentGraph(teacher, [Student(1, 0, 3, teacher.copy())])


def test_block_weight_round_trip(tmp_path):
    teacher, data = _teacher()
    graph = TeacherStudentGraph.from_blocks(teacher, [_block(4, [(1, 0.5)])])
    rep = pretrain_blocks(graph, data.x_train[:64], epochs=1, lr=0.02)
    path = tmp_path / "blocks.cpie"
    path.write_bytes(weights_to_bytes(block_weights_to_store(rep.weights)))
    back = block_weights_from_store(load_weights(path.read_bytes()))
    assert sorted(back) == [4] and sorted(back[4]) == ["conv2a", "conv2b"]
    for name, p in rep.weights[4].items():
        for k in ("w", "b"):
            # weight files hold float32
            assert np.array_equal(back[4][name][k], p[k].astype(np.float32))


def test_assembly_uses_block_weights_and_masks():
    teacher, data = _teacher()
    block = _block(2, [(1, 0.5)])
    graph = TeacherStudentGraph.from_blocks(teacher, [block])
    rep = pretrain_blocks(graph, data.x_train, epochs=1, lr=0.02)
    net = assemble(teacher, [0.3, 0.5, 0.0], [(1, 2)], {2: block}, rep.weights)
    assert np.array_equal(net.params["conv2a"]["w"], rep.weights[2]["conv2a"]["w"])
    base = prune_network(teacher, [0.3, 0.5, 0.0])
    assert np.array_equal(net.params["conv1a"]["w"], base.params["conv1a"]["w"])
    assert net.param_count() == estimate_size(TOY, [0.3, 0.5, 0.0])
    with pytest.raises(MissingBlock):
        assemble(teacher, [0.3, 0.5, 0.0], [(1, 9)], {2: block}, rep.weights)


def test_zero_tiles_equal_plain_finetuning():
    teacher, data = _teacher()
    _, rep = assemble_and_finetune(teacher, [0.5, 0.5, 0.5], [], {}, {}, data, epochs=2, lr=0.05, seed=3)
    plain = prune_network(teacher, [0.5, 0.5, 0.5])
    assert train(plain, data, epochs=2, lr=0.05, seed=3) == rep


def test_dataset_shapes():
    data = blob_dataset(10, 6, classes=3, size=8, seed=0)
    assert isinstance(data, Dataset)
    assert data.x_train.shape == (10, 1, 8, 8) and data.y_test.shape == (6,)
    assert set(np.unique(data.y_train)) <= {0, 1, 2}
