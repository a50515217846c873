"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error. Errors go to stderr on a
line starting with ``ERROR:``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import engine, fkw, model_ir, planner, pruner, trainer

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# file helpers

def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"file not found: {path}")
    return p.read_text()


def _read_bytes(path: str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"file not found: {path}")
    return p.read_bytes()


def _load_model(path: str) -> model_ir.ModelSpec:
    return model_ir.parse_prototxt(_read_text(path))


def _load_store(path: str) -> dict:
    return model_ir.load_weights(_read_bytes(path))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _conv(spec: model_ir.ModelSpec, name: str) -> model_ir.LayerSpec:
    try:
        layer = spec.layer(name)
    except KeyError:
        raise DataError(f"model has no layer {name!r}") from None
    if not layer.is_conv:
        raise DataError(f"layer {name!r} is not a convolution")
    return layer


def _assignment(store: dict, layer: model_ir.LayerSpec) -> pruner.PatternAssignment:
    """Pattern metadata saved next to a pruned layer by ``prune``."""
    try:
        ids = np.asarray(store[layer.name + ".pattern_ids"]).astype(np.int16)
        offsets = np.asarray(store[layer.name + ".patterns"]).astype(np.int64)
    except KeyError:
        raise DataError(f"no pattern metadata for layer {layer.name!r}; run prune first") from None
    lib = pruner.PatternLibrary(tuple(pruner.Pattern.from_offsets(row, layer.kernel_w) for row in offsets),
                                layer.kernel_h, layer.kernel_w)
    return pruner.PatternAssignment(ids, lib)


def _layer_input(args, layer: model_ir.LayerSpec) -> np.ndarray:
    if args.input:
        store = _load_store(args.input)
        if "input" not in store:
            raise DataError(f"{args.input} has no tensor named 'input'")
        return np.asarray(store["input"], dtype=np.float32)
    if layer.in_shape is None or layer.in_shape[1] is None:
        raise DataError(f"input size of layer {layer.name!r} is unknown; pass --input")
    rng = np.random.default_rng(args.seed)
    return rng.standard_normal(layer.in_shape).astype(np.float32)


def _tune_from_args(args) -> engine.TuneConfig:
    order = tuple(args.loop_order.split("-")) if args.loop_order else engine.LOOP_ORDERS[0]
    return engine.TuneConfig(args.tile_h, args.tile_w, order, args.unroll)


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_init(args) -> None:
    spec = _load_model(args.model)
    net = trainer.ToyNet.init(spec, args.seed)
    out = _out_dir(args) / "weights.cpie"
    with open(out, "wb") as fh:
        model_ir.save_weights({k: v for k, v in net.state().items() if not k.endswith(".bias")}, fh)
    print(f"wrote {out}")


def cmd_prune(args) -> None:
    spec = _load_model(args.model)
    store = _load_store(args.weights)
    conv_names = {layer.name for layer in spec.conv_layers}
    violations = [v for v in model_ir.validate_model(spec, store) if v.layer in conv_names]
    if violations:
        raise DataError(f"{violations[0].layer}: {violations[0].message}")
    out_store = dict(store)
    summaries = []
    lines = []
    for layer in spec.conv_layers:
        w = np.asarray(store[layer.name], dtype=np.float32)
        lib = pruner.design_pattern_library(w, args.k, args.p)
        assignment = pruner.prune_layer(w, lib, args.rate)
        pruned, summary = pruner.apply_pruning(w, assignment, layer.name)
        out_store[layer.name] = pruned
        out_store[layer.name + ".pattern_ids"] = assignment.ids.astype(np.float32)
        out_store[layer.name + ".patterns"] = np.array([p.offsets(layer.kernel_w) for p in lib.patterns],
                                                       dtype=np.float32)
        summaries.append(summary)
        lines.append(pruner.format_report([summary], lib))
    out = _out_dir(args)
    with open(out / "pruned.cpie", "wb") as fh:
        model_ir.save_weights(out_store, fh)
    print(f"wrote {out / 'pruned.cpie'}")
    _write(out / "prune_report.txt", "".join(lines))


def cmd_compress(args) -> None:
    spec = _load_model(args.model)
    store = _load_store(args.pruned)
    out = _out_dir(args)
    rows = []
    for layer in spec.conv_layers:
        assignment = _assignment(store, layer)
        w = np.asarray(store[layer.name], dtype=np.float32)
        perm = engine.filter_kernel_reorder(assignment).permutation if args.reorder else None
        blob = fkw.compress_fkw(w, assignment, perm)
        (out / f"{layer.name}.fkw").write_bytes(blob.to_bytes())
        rows.append((layer.name, fkw.compare_sizes(w, assignment, perm)))
    _write(out / "sizes.csv", fkw.size_rows_csv(rows))


def cmd_run(args) -> None:
    spec = _load_model(args.model)
    store = _load_store(args.pruned)
    layer = _conv(spec, args.layer)
    assignment = _assignment(store, layer)
    x = _layer_input(args, layer)
    reorder = engine.filter_kernel_reorder(assignment)
    plan = engine.build_execution_plan(layer, assignment, reorder, _tune_from_args(args), tuple(x.shape[1:]))
    y, stats = engine.execute_plan(plan, np.asarray(store[layer.name], dtype=np.float32), x)
    out = _out_dir(args)
    with open(out / "output.cpie", "wb") as fh:
        model_ir.save_weights({"output": y}, fh)
    print(f"wrote {out / 'output.cpie'}")
    _write(out / "plan.txt", engine.dump_plan(plan))
    _write(out / "stats.csv", "loads,macs,group_switches,wall_time_s\n"
           f"{stats.loads},{stats.macs},{stats.group_switches},{stats.wall_time_s:.6f}\n")


def cmd_tune(args) -> None:
    spec = _load_model(args.model)
    store = _load_store(args.pruned)
    layer = _conv(spec, args.layer)
    assignment = _assignment(store, layer)
    result = engine.auto_tune(layer, assignment, budget=args.budget, repeats=args.repeats,
                              weights=np.asarray(store[layer.name], dtype=np.float32), seed=args.seed)
    best = result.best
    out = _out_dir(args)
    _write(out / "best_config.json", json.dumps({
        "tile_h": best.tile_h, "tile_w": best.tile_w,
        "loop_order": "-".join(best.loop_order), "unroll": best.unroll}, indent=2) + "\n")
    _write(out / "tune_trace.csv", result.to_csv())


def _configs(args):
    gamma, rate_lists = planner.parse_subspace(_read_text(args.subspace))
    spec = _load_model(args.model) if getattr(args, "model", None) else None
    if spec is not None and rate_lists and len(rate_lists[0]) != len(spec.modules):
        raise DataError(f"subspace has {len(rate_lists[0])} modules, model has {len(spec.modules)}")
    return spec, planner.make_configs(rate_lists, spec)


def _blocks(configs):
    grammar = planner.build_grammar(configs)
    selection = planner.identify_tuning_blocks(grammar, configs)
    return grammar, selection


def cmd_plan(args) -> None:
    _, configs = _configs(args)
    if not configs:
        raise DataError(f"{args.subspace} lists no networks")
    grammar, selection = _blocks(configs)
    vectors = planner.composite_vectors(configs, selection.blocks)
    out = _out_dir(args)
    _write(out / "grammar.txt", grammar.format())
    _write(out / "blocks.txt", selection.dag_report())
    lines = ["network,position,block_id"]
    for v in vectors:
        lines.extend(f"{v.network},{pos},{bid}" for pos, bid in v.tiles)
    _write(out / "composite.csv", "\n".join(lines) + "\n")
    candidates = list(selection.rules.values())
    report = planner.savings_report(configs, selection.blocks, planner.CostModel(beta=args.beta),
                                    candidates=candidates)
    _write(out / "savings.txt", report.format())


def _teacher(args, spec, data):
    net = trainer.ToyNet.init(spec, args.seed)
    if args.weights:
        net.load_state(_load_store(args.weights))
    else:
        trainer.train(net, data, args.teacher_epochs, args.lr, args.seed)
    return net


def _check_trainable(spec):
    first = spec.layers[0]
    if first.kind != "input" or first.in_shape[0] != 1 or first.in_shape[1:] != (8, 8):
        raise DataError("the trainer path needs a model with a 1x8x8 input")
    if spec.layers[-1].kind != "fully_connected" or spec.layers[-1].num_output != 4:
        raise DataError("the trainer path needs a final 4-way fully connected layer")


def cmd_pretrain(args) -> None:
    if not args.model:
        raise UsageError("pretrain needs --model")
    spec, configs = _configs(args)
    _check_trainable(spec)
    data = trainer.blob_dataset()
    teacher = _teacher(args, spec, data)
    _, selection = _blocks(configs)
    graph = trainer.TeacherStudentGraph.from_blocks(teacher, selection.blocks)
    report = trainer.pretrain_blocks(graph, data.x_train, args.epochs, args.lr, args.seed)
    out = _out_dir(args)
    with open(out / "blocks.cpie", "wb") as fh:
        model_ir.save_weights(trainer.block_weights_to_store(report.weights), fh)
    print(f"wrote {out / 'blocks.cpie'}")
    if not args.weights:
        with open(out / "teacher.cpie", "wb") as fh:
            model_ir.save_weights(teacher.state(), fh)
        print(f"wrote {out / 'teacher.cpie'}")
    lines = ["block_id,epoch,mse"]
    for bid, losses in sorted(report.losses.items()):
        lines.extend(f"{bid},{e},{loss!r}" for e, loss in enumerate(losses))
    _write(out / "pretrain_losses.csv", "\n".join(lines) + "\n")


def _mock_evaluator(path: str, configs, full_accuracy: Optional[float]):
    text = _read_text(path)
    table, sizes = {}, {}
    reader = csv.DictReader(text.splitlines())
    if not reader.fieldnames or not {"config", "accuracy"} <= set(reader.fieldnames):
        raise DataError(f"{path} needs a header with config and accuracy columns")
    for row in reader:
        key = row["config"].strip()
        acc = float(row["accuracy"])
        if key == "full":
            full_accuracy = acc if full_accuracy is None else full_accuracy
            continue
        table[int(key)] = acc
        if row.get("size"):
            sizes[int(key)] = float(row["size"])
    if full_accuracy is None:
        raise DataError(f"{path} has no 'full' row; pass --full-accuracy")
    configs = [planner.NetworkConfig(c.symbols, sizes.get(i, c.size)) for i, c in enumerate(configs)]
    index = {id(c): i for i, c in enumerate(configs)}

    def evaluate(config):
        return table[index[id(config)]]

    return configs, evaluate, full_accuracy


def cmd_explore(args) -> None:
    spec, configs = _configs(args)
    if not configs:
        raise DataError(f"{args.subspace} lists no networks")
    kind, _, arg = args.evaluator.partition(":")
    if kind == "mock":
        if not arg:
            raise UsageError("mock evaluator needs a table: --evaluator mock:FILE")
        configs, evaluate, full = _mock_evaluator(arg, configs, args.full_accuracy)
    elif kind == "trainer":
        if spec is None:
            raise UsageError("the trainer evaluator needs --model")
        _check_trainable(spec)
        data = trainer.blob_dataset()
        teacher = _teacher(args, spec, data)
        blocks, weights, vectors = {}, {}, {}
        if args.blocks:
            _, selection = _blocks(configs)
            blocks = {b.id: b for b in selection.blocks}
            weights = trainer.block_weights_from_store(_load_store(args.blocks))
            vectors = {id(c): v.tiles for c, v in
                       zip(configs, planner.composite_vectors(configs, selection.blocks))}
        full = args.full_accuracy if args.full_accuracy is not None else \
            trainer.evaluate(teacher, data.x_test, data.y_test)

        def evaluate(config):
            _, report = trainer.assemble_and_finetune(
                teacher, config.rates, vectors.get(id(config), ()), blocks, weights, data,
                args.epochs, args.lr, args.seed)
            return report.final_accuracy
    else:
        raise UsageError(f"unknown evaluator {args.evaluator!r}; use mock:FILE or trainer")

    objective = planner.ExplorationObjective(full, args.alpha)
    result = planner.plan_exploration(configs, objective, evaluate, workers=args.workers)
    out = _out_dir(args)
    _write(out / "exploration.csv", result.to_csv())
    if result.found:
        text = (f"config {result.best_id}\nsize {result.best.size:g}\nrates {result.best}\n"
                f"evaluated {result.evaluated}\nthreshold {result.threshold:.6f}\n")
    else:
        text = f"none\nevaluated {result.evaluated}\nthreshold {result.threshold:.6f}\n"
    _write(out / "winner.txt", text)
    print(text, end="")


def cmd_bench(args) -> None:
    spec = _load_model(args.model)
    store = _load_store(args.pruned)
    layer = _conv(spec, args.layer)
    assignment = _assignment(store, layer)
    x = _layer_input(args, layer)
    rows = engine.bench_compare(layer, np.asarray(store[layer.name], dtype=np.float32), assignment, x,
                                _tune_from_args(args), args.repeats)
    _write(_out_dir(args) / "bench.csv", engine.bench_csv(rows))


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--workers", type=int, default=1, help="parallel evaluator tasks (default 1)")
    common.add_argument("--config", help="JSON file whose keys override flag defaults")

    tiling = _Parser(add_help=False)
    tiling.add_argument("--tile-h", type=int, default=8)
    tiling.add_argument("--tile-w", type=int, default=8)
    tiling.add_argument("--loop-order", help="e.g. channel-row-col (default)")
    tiling.add_argument("--unroll", type=int, default=1, choices=engine.UNROLLS)

    layer_in = _Parser(add_help=False)
    layer_in.add_argument("--model", required=True, help=".prototxt model")
    layer_in.add_argument("--pruned", required=True, help="pruned .cpie from the prune command")
    layer_in.add_argument("--layer", required=True, help="convolution layer name")

    parser = _Parser(prog="prunekit", description="Pattern pruning, compiled execution and "
                     "composability-based pruning exploration.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("init", parents=[common], help="write random weights for a model")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("prune", parents=[common], help="pattern + connectivity pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--k", type=int, default=4, help="entries per pattern (default 4)")
    p.add_argument("--p", type=int, default=8, help="pattern library size (default 8)")
    p.add_argument("--rate", type=float, default=0.0, help="connectivity pruning rate in [0, 1)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compress", parents=[common], help="write FKW files and a size CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--reorder", action="store_true", help="store filters in reorder order")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("run", parents=[common, layer_in, tiling], help="execute one layer's plan")
    p.add_argument("--input", help=".cpie with a (C, H, W) tensor named 'input' (default: random)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("tune", parents=[common, layer_in], help="auto-tune a layer's plan")
    p.add_argument("--budget", type=int, help="configs to measure (default: whole grid)")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", parents=[common, layer_in, tiling], help="pattern vs CSR vs dense")
    p.add_argument("--input")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", parents=[common], help="grammar, tuning blocks and composite vectors")
    p.add_argument("--subspace", required=True)
    p.add_argument("--model", help="model for parameter-count sizes")
    p.add_argument("--beta", type=float, default=0.5, help="fine-tune discount for covered modules")
    p.set_defaults(func=cmd_plan)

    train_opts = _Parser(add_help=False)
    train_opts.add_argument("--weights", help="trained teacher .cpie (default: train one)")
    train_opts.add_argument("--teacher-epochs", type=int, default=10)
    train_opts.add_argument("--epochs", type=int, default=5)
    train_opts.add_argument("--lr", type=float, default=0.05)

    p = sub.add_parser("pretrain", parents=[common, train_opts], help="teacher-student block training")
    p.add_argument("--subspace", required=True)
    p.add_argument("--model")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("explore", parents=[common, train_opts], help="smallest-first exploration")
    p.add_argument("--subspace", required=True)
    p.add_argument("--model")
    p.add_argument("--alpha", type=float, default=0.0, help="allowed accuracy drop")
    p.add_argument("--evaluator", required=True, help="mock:FILE or trainer")
    p.add_argument("--full-accuracy", type=float)
    p.add_argument("--blocks", help="pre-trained blocks .cpie (trainer evaluator)")
    p.set_defaults(func=cmd_explore)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` when it is given."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(_read_text(args.config))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise DataError(f"{args.config} must hold a JSON object")
        known = vars(args)
        for key in overrides:
            if key.replace("-", "_") not in known:
                raise UsageError(f"unknown key {key!r} in {args.config}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        args.func(args)
    except UsageError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_USAGE
    except planner.EvaluatorFailure as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ERROR: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
