import csv
import io
import json

import numpy as np
import pytest

from prunekit.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from prunekit.model_ir import load_weights
from prunekit.trainer import TOY_PROTOTXT

# columns holding wall-clock measurements; excluded from byte comparisons
TIMING = {"wall_time_s", "median_ms", "time_ms_median", "cumulative_time"}


@pytest.fixture
def model(tmp_path):
    path = tmp_path / "toy.prototxt"
    path.write_text(TOY_PROTOTXT)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def pruned_dir(tmp_path, model, name="a", seed=42):
    out = tmp_path / name
    out.mkdir()
    assert run("init", "--model", model, "--out", out, "--seed", seed) == EXIT_OK
    assert run("prune", "--model", model, "--weights", out / "weights.cpie", "--k", 4, "--p", 8,
               "--rate", 0.5, "--out", out, "--seed", seed) == EXIT_OK
    return out


def strip_timing(text):
    rows = list(csv.reader(io.StringIO(text)))
    keep = [i for i, h in enumerate(rows[0]) if h not in TIMING]
    return [[r[i] for i in keep] for r in rows]


def test_prune_smoke(tmp_path, model):
    out = pruned_dir(tmp_path, model)
    assert (out / "pruned.cpie").exists() and (out / "prune_report.txt").exists()
    store = load_weights((out / "pruned.cpie").read_bytes())
    ids = store["conv1b.pattern_ids"]
    assert ids.shape == (8, 8)
    # rate 0.5 removes half the kernels; the rest keep exactly 4 weights
    w = store["conv1b"]
    assert (np.count_nonzero(w, axis=(2, 3)) <= 4).all()
    assert int((ids < 0).sum()) == 32
    assert "library k=4 P=8" in (out / "prune_report.txt").read_text()


def test_compress_run_tune_bench(tmp_path, model):
    out = pruned_dir(tmp_path, model)
    args = ("--model", model, "--pruned", out / "pruned.cpie", "--out", out)
    assert run("compress", *args, "--reorder") == EXIT_OK
    sizes = strip_timing((out / "sizes.csv").read_text())
    assert sizes[0] == ["layer", "fkw_bytes", "csr_bytes", "ratio"] and len(sizes) == 7
    for name in ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b"):
        assert (out / f"{name}.fkw").exists()
    assert run("run", *args, "--layer", "conv2a", "--tile-h", 2, "--tile-w", 4, "--unroll", 2) == EXIT_OK
    assert load_weights((out / "output.cpie").read_bytes())["output"].shape == (16, 4, 4)
    assert run("tune", *args, "--layer", "conv2a", "--budget", 4, "--repeats", 1) == EXIT_OK
    best = json.loads((out / "best_config.json").read_text())
    assert set(best) == {"tile_h", "tile_w", "loop_order", "unroll"}
    assert len(strip_timing((out / "tune_trace.csv").read_text())) == 5
    assert run("bench", *args, "--layer", "conv2a", "--repeats", 1) == EXIT_OK
    bench = strip_timing((out / "bench.csv").read_text())
    assert [r[0] for r in bench[1:]] == ["pattern", "csr", "dense"]


def test_run_rejects_unknown_layer(tmp_path, model, capsys):
    out = pruned_dir(tmp_path, model)
    code = run("run", "--model", model, "--pruned", out / "pruned.cpie", "--layer", "nope", "--out", out)
    assert code == EXIT_DATA
    assert "ERROR:" in capsys.readouterr().err


def write_subspace(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("# gamma: 0.3,0.5,0.7\n0:0.3,1:0.5,2:0.5\n0:0.3,1:0.5,2:0.7\n0:0.7,1:0.7,2:0.7\n")
    return path


def test_explore_mock_matches_planner_example(tmp_path, capsys):
    sub = write_subspace(tmp_path)
    acc = tmp_path / "acc.csv"
    acc.write_text("config,accuracy,size\nfull,0.94,\n0,0.97,7\n1,0.95,6\n2,0.90,5\n")
    code = run("explore", "--subspace", sub, "--alpha", 0.0, "--evaluator", f"mock:{acc}",
               "--out", tmp_path)
    assert code == EXIT_OK
    winner = (tmp_path / "winner.txt").read_text().splitlines()
    assert winner[:2] == ["config 1", "size 6"] and "evaluated 2" in winner
    log = strip_timing((tmp_path / "exploration.csv").read_text())
    assert log == [["config_id", "size", "accuracy"], ["2", "5", "0.900000"], ["1", "6", "0.950000"]]


def test_plan_outputs(tmp_path, model):
    sub = write_subspace(tmp_path)
    assert run("plan", "--subspace", sub, "--model", model, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "grammar.txt").read_text().startswith("r0 ->")
    composite = (tmp_path / "composite.csv").read_text().splitlines()
    assert composite[0] == "network,position,block_id" and len(composite) == 3
    assert "profitable" in (tmp_path / "savings.txt").read_text()


def test_pretrain_then_explore_with_trainer(tmp_path, model):
    sub = write_subspace(tmp_path)
    common = ("--subspace", sub, "--model", model, "--teacher-epochs", 1, "--epochs", 1, "--out", tmp_path)
    assert run("pretrain", *common) == EXIT_OK
    blocks = load_weights((tmp_path / "blocks.cpie").read_bytes())
    assert any(k.startswith("r") and k.endswith("conv1a") for k in blocks)
    losses = (tmp_path / "pretrain_losses.csv").read_text().splitlines()
    assert losses[0] == "block_id,epoch,mse" and len(losses) > 1
    code = run("explore", *common, "--weights", tmp_path / "teacher.cpie", "--evaluator", "trainer",
               "--blocks", tmp_path / "blocks.cpie", "--alpha", 0.08)
    assert code == EXIT_OK
    assert (tmp_path / "winner.txt").exists()


def test_missing_file_is_a_data_error(tmp_path, capsys):
    missing = tmp_path / "nowhere.prototxt"
    assert run("init", "--model", missing, "--out", tmp_path) == EXIT_DATA
    err = capsys.readouterr().err
    assert any(line.startswith("ERROR:") and str(missing) in line for line in err.splitlines())


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["prune", "--model", "m.prototxt"],
    ["prune", "--model", "m", "--weights", "w", "--k", "four"],
    ["explore", "--subspace", "s.txt", "--evaluator", "mock:x", "--workers", "0"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "ERROR:" in capsys.readouterr().err


def test_unknown_evaluator_is_usage_error(tmp_path):
    sub = write_subspace(tmp_path)
    assert run("explore", "--subspace", sub, "--evaluator", "oracle", "--out", tmp_path) == EXIT_USAGE


def test_config_file_overrides_defaults(tmp_path, model):
    out = tmp_path / "c"
    out.mkdir()
    assert run("init", "--model", model, "--out", out) == EXIT_OK
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rate": 0.25, "p": 4}))
    assert run("prune", "--model", model, "--weights", out / "weights.cpie", "--out", out,
               "--config", cfg) == EXIT_OK
    ids = load_weights((out / "pruned.cpie").read_bytes())["conv1b.pattern_ids"]
    assert int((ids < 0).sum()) == 16 and ids.max() < 4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("prune", "--model", model, "--weights", out / "weights.cpie", "--config", cfg) == EXIT_USAGE


def test_outputs_are_reproducible(tmp_path, model):
    sub = write_subspace(tmp_path)
    acc = tmp_path / "acc.csv"
    acc.write_text("config,accuracy\nfull,0.9\n0,0.91\n1,0.80\n2,0.70\n")
    dirs = []
    for name in ("a", "b"):
        out = pruned_dir(tmp_path, model, name, seed=7)
        args = ("--model", model, "--pruned", out / "pruned.cpie", "--out", out, "--seed", 7)
        assert run("compress", *args) == EXIT_OK
        assert run("run", *args, "--layer", "conv1b") == EXIT_OK
        assert run("tune", *args, "--layer", "conv1b", "--budget", 3, "--repeats", 1) == EXIT_OK
        assert run("bench", *args, "--layer", "conv1b", "--repeats", 1) == EXIT_OK
        assert run("plan", "--subspace", sub, "--model", model, "--out", out) == EXIT_OK
        assert run("pretrain", "--subspace", sub, "--model", model, "--teacher-epochs", 1,
                   "--epochs", 1, "--out", out, "--seed", 7) == EXIT_OK
        assert run("explore", "--subspace", sub, "--evaluator", f"mock:{acc}", "--out", out) == EXIT_OK
        dirs.append(out)
    a, b = dirs
    # best_config.json is picked by measured time, so it is a timing output
    names = sorted(p.name for p in a.iterdir() if p.name != "best_config.json")
    assert names == sorted(p.name for p in b.iterdir() if p.name != "best_config.json")
    for name in names:
        da, db = (a / name).read_bytes(), (b / name).read_bytes()
        if name.endswith(".csv"):
            assert strip_timing(da.decode()) == strip_timing(db.decode()), name
        else:
            assert da == db, name
