"""Execution plans for pattern-pruned convolution layers.

A plan is what a code generator would emit for one layer, kept in
interpretable form: a filter order that groups filters with equal workload
and pattern signature, an output tiling, a loop order, per-group microkernels
and a register-level load schedule. :func:`execute_plan` interprets it.

Load counting follows two coalescing rules. Within one output-row sweep of
width ``W`` a kernel row touching columns ``S`` loads ``|{o + stride*x}|``
distinct inputs instead of ``W * |S|``; and kernels of one group that read the
same input row of the same channel share those loads.
"""
from __future__ import annotations

import csv
import io
import itertools
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fkw import CsrLayer, encode_csr
from .model_ir import LayerSpec
from .pruner import REMOVED, PatternAssignment

LOOP_ORDERS = (
    ("channel", "row", "col"),
    ("channel", "col", "row"),
    ("row", "col", "channel"),
    ("col", "row", "channel"),
)
TILE_SIZES = (1, 2, 4, 8)
UNROLLS = (1, 2, 4)


class ShapeError(ValueError):
    pass


class DimMismatch(ValueError):
    pass


def conv_layer(name: str, filters: int, channels: int, kernel: int = 3, stride: int = 1,
               pad: int = 0, height: Optional[int] = None, width: Optional[int] = None,
               kernel_w: Optional[int] = None) -> LayerSpec:
    """Build a standalone convolution :class:`LayerSpec`."""
    kw = kernel if kernel_w is None else kernel_w
    in_shape = (channels, height, width if width is not None else height)
    return LayerSpec(name=name, kind="convolution", top=name, bottom="data",
                     num_output=filters, channels=channels, kernel_h=kernel, kernel_w=kw,
                     stride=stride, pad=pad, in_shape=in_shape)


# ---------------------------------------------------------------------------
# filter kernel reorder

def _filter_keys(assignment: PatternAssignment) -> list:
    keys = []
    for row in assignment.ids:
        kept = sorted(int(i) for i in row if i != REMOVED)
        keys.append((len(kept), tuple(kept)))
    return keys


@dataclass(frozen=True)
class ReorderPlan:
    permutation: tuple  # position -> original filter
    groups: tuple  # ((start, stop), ...) half-open runs over positions
    keys: tuple  # (kept count, sorted pattern ids) per group

    @property
    def inverse(self) -> tuple:
        inv = [0] * len(self.permutation)
        for pos, f in enumerate(self.permutation):
            inv[f] = pos
        return tuple(inv)

    def group_filters(self, g: int) -> tuple:
        start, stop = self.groups[g]
        return self.permutation[start:stop]


def _runs(perm: Sequence[int], keys: list) -> ReorderPlan:
    groups, gkeys = [], []
    start = 0
    for pos in range(1, len(perm) + 1):
        if pos == len(perm) or keys[perm[pos]] != keys[perm[start]]:
            groups.append((start, pos))
            gkeys.append(keys[perm[start]])
            start = pos
    return ReorderPlan(tuple(int(p) for p in perm), tuple(groups), tuple(gkeys))


def filter_kernel_reorder(assignment: PatternAssignment) -> ReorderPlan:
    """Stable sort of filters by (more kept kernels first, pattern multiset)."""
    keys = _filter_keys(assignment)
    perm = sorted(range(len(keys)), key=lambda f: (-keys[f][0], keys[f][1]))
    return _runs(perm, keys)


def identity_reorder(assignment: PatternAssignment) -> ReorderPlan:
    """Original filter order; groups are the equal-key runs that happen to exist."""
    keys = _filter_keys(assignment)
    return _runs(list(range(len(keys))), keys)


# ---------------------------------------------------------------------------
# plans

@dataclass(frozen=True, order=True)
class TuneConfig:
    tile_h: int = 8
    tile_w: int = 8
    loop_order: tuple = LOOP_ORDERS[0]
    unroll: int = 1

    def __post_init__(self):
        if self.tile_h < 1 or self.tile_w < 1:
            raise ValueError("tile dims must be >= 1")
        if tuple(self.loop_order) not in LOOP_ORDERS:
            raise ValueError(f"unsupported loop order {self.loop_order}")
        if self.unroll not in UNROLLS:
            raise ValueError(f"unroll must be one of {UNROLLS}")
        object.__setattr__(self, "loop_order", tuple(self.loop_order))

    def label(self) -> str:
        return f"{self.tile_h}x{self.tile_w}/{'-'.join(self.loop_order)}/u{self.unroll}"


def search_space() -> list:
    """The tuning grid in its fixed enumeration order."""
    return [TuneConfig(th, tw, order, u)
            for th, tw, order, u in itertools.product(TILE_SIZES, TILE_SIZES, LOOP_ORDERS, UNROLLS)]


@dataclass(frozen=True)
class Window:
    """One input window (channel, kernel row, kernel col) read by a group."""

    channel: int
    row: int
    col: int
    filters: np.ndarray  # original filter ids using this window


@dataclass(frozen=True)
class GroupKernel:
    filters: tuple  # original filter ids, in plan order
    kernels: tuple  # per filter: ((channel, pattern id), ...)
    windows: tuple  # Window, sorted by (channel, row, col)


@dataclass(frozen=True)
class PlanStats:
    loads: int
    macs: int
    group_switches: int
    wall_time_s: float = 0.0


@dataclass(frozen=True, eq=False)
class ExecutionPlan:
    layer: LayerSpec
    assignment: PatternAssignment
    reorder: ReorderPlan
    tune: TuneConfig
    in_hw: tuple
    out_hw: tuple
    groups: tuple  # GroupKernel
    load_schedule: dict  # (group, channel, kernel row) -> column offsets
    tiles: tuple  # (y0, y1, x0, x1)
    lre_enabled: bool = True

    @property
    def macs(self) -> int:
        nonzeros = int(self.assignment.present.sum()) * self.assignment.library.k
        return nonzeros * self.out_hw[0] * self.out_hw[1]


def build_execution_plan(layer: LayerSpec, assignment: PatternAssignment,
                         reorder: Optional[ReorderPlan] = None, tune: Optional[TuneConfig] = None,
                         input_hw: Optional[tuple] = None, lre_enabled: bool = True) -> ExecutionPlan:
    if layer.kind != "convolution":
        raise ShapeError(f"layer {layer.name!r} is not a convolution")
    if layer.stride < 1 or layer.pad < 0:
        raise ShapeError(f"invalid stride {layer.stride} / pad {layer.pad}")
    lib = assignment.library
    if assignment.shape != (layer.num_output, layer.channels) or \
            (lib.kh, lib.kw) != (layer.kernel_h, layer.kernel_w):
        raise ShapeError(f"assignment {assignment.shape} with {lib.kh}x{lib.kw} kernels does not fit "
                         f"layer {layer.name!r}")
    if input_hw is None:
        if layer.in_shape is None or layer.in_shape[1] is None:
            raise ShapeError(f"input size of layer {layer.name!r} is unknown")
        input_hw = tuple(layer.in_shape[1:])
    oh, ow = layer.output_hw(*input_hw)
    if oh < 1 or ow < 1:
        raise ShapeError(f"layer {layer.name!r} yields an empty {oh}x{ow} output")
    reorder = reorder or filter_kernel_reorder(assignment)
    if sorted(reorder.permutation) != list(range(layer.num_output)):
        raise ShapeError("reorder permutation does not cover the layer's filters")
    tune = tune or TuneConfig()

    groups, schedule = [], {}
    for g in range(len(reorder.groups)):
        filters = reorder.group_filters(g)
        kernels, terms = [], {}
        for f in filters:
            row = assignment.ids[f]
            kernels.append(tuple((c, int(pid)) for c, pid in enumerate(row) if pid != REMOVED))
            for c, pid in kernels[-1]:
                for r, s in lib[pid].entries:
                    terms.setdefault((c, r, s), []).append(f)
        windows = tuple(Window(c, r, s, np.array(fs, dtype=np.intp))
                        for (c, r, s), fs in sorted(terms.items()))
        groups.append(GroupKernel(tuple(filters), tuple(kernels), windows))
        for w in windows:
            cols = schedule.setdefault((g, w.channel, w.row), [])
            cols.extend([w.col] * (1 if lre_enabled else len(w.filters)))
    schedule = {key: tuple(sorted(cols)) for key, cols in schedule.items()}
    tiles = tuple((y, min(y + tune.tile_h, oh), x, min(x + tune.tile_w, ow))
                  for y in range(0, oh, tune.tile_h) for x in range(0, ow, tune.tile_w))
    return ExecutionPlan(layer, assignment, reorder, tune, tuple(input_hw), (oh, ow),
                         tuple(groups), schedule, tiles, lre_enabled)


def _sweep_loads(cols: tuple, width: int, stride: int, lre: bool) -> int:
    if not lre:
        return len(cols) * width
    touched = set()
    for o in cols:
        touched.update(range(o, o + stride * width, stride))
    return len(touched)


def count_loads(plan: ExecutionPlan) -> PlanStats:
    """Static load / MAC / branch-proxy counts from the plan alone."""
    stride = plan.layer.stride
    per_width = {}
    rows_by_width = {}
    for y0, y1, x0, x1 in plan.tiles:
        rows_by_width[x1 - x0] = rows_by_width.get(x1 - x0, 0) + (y1 - y0)
    loads = 0
    for width, rows in rows_by_width.items():
        if width not in per_width:
            per_width[width] = sum(_sweep_loads(cols, width, stride, plan.lre_enabled)
                                   for cols in plan.load_schedule.values())
        loads += rows * per_width[width]
    return PlanStats(loads=loads, macs=plan.macs,
                     group_switches=len(plan.groups) * len(plan.tiles))


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def execute_plan(plan: ExecutionPlan, weights: np.ndarray, x: np.ndarray):
    """Run ``plan`` on a (C, H, W) input; returns (output (F, OH, OW), stats)."""
    layer = plan.layer
    w = np.asarray(weights)
    x = np.asarray(x)
    expect_w = (layer.num_output, layer.channels, layer.kernel_h, layer.kernel_w)
    if w.shape != expect_w:
        raise DimMismatch(f"weights {w.shape} != {expect_w}")
    if x.shape != (layer.channels,) + tuple(plan.in_hw):
        raise DimMismatch(f"input {x.shape} != {(layer.channels,) + tuple(plan.in_hw)}")
    dtype = np.result_type(w, x)
    xp = _padded(x.astype(dtype, copy=False), layer.pad)
    oh, ow = plan.out_hw
    out = np.zeros((layer.num_output, oh, ow), dtype=dtype)
    st = layer.stride
    unroll = plan.tune.unroll
    macs = 0
    start = time.perf_counter()

    def body(windows, wvals, y0, y1, x0, x1):
        nonlocal macs
        for i in range(0, len(windows), unroll):
            for win, wv in zip(windows[i:i + unroll], wvals[i:i + unroll]):
                src = xp[win.channel,
                         y0 * st + win.row:(y1 - 1) * st + win.row + 1:st,
                         x0 * st + win.col:(x1 - 1) * st + win.col + 1:st]
                out[win.filters, y0:y1, x0:x1] += wv[:, None, None] * src
                macs += len(win.filters) * src.size

    for group in plan.groups:
        if not group.windows:
            continue
        wvals = [w[win.filters, win.channel, win.row, win.col].astype(dtype) for win in group.windows]
        by_channel = {}
        for idx, win in enumerate(group.windows):
            by_channel.setdefault(win.channel, []).append(idx)
        if plan.tune.loop_order[0] == "channel":
            tile_order = plan.tiles if plan.tune.loop_order[1] == "row" else \
                tuple(sorted(plan.tiles, key=lambda t: (t[2], t[0])))
            for c, idxs in by_channel.items():
                wins = [group.windows[i] for i in idxs]
                vals = [wvals[i] for i in idxs]
                for y0, y1, x0, x1 in tile_order:
                    body(wins, vals, y0, y1, x0, x1)
        else:
            tile_order = plan.tiles if plan.tune.loop_order[0] == "row" else \
                tuple(sorted(plan.tiles, key=lambda t: (t[2], t[0])))
            for y0, y1, x0, x1 in tile_order:
                body(group.windows, wvals, y0, y1, x0, x1)
    elapsed = time.perf_counter() - start
    static = count_loads(plan)
    return out, PlanStats(static.loads, macs, static.group_switches, elapsed)


def dump_plan(plan: ExecutionPlan) -> str:
    """Deterministic text rendering of a plan, for golden comparisons."""
    layer = plan.layer
    lines = [
        f"layer {layer.name} F={layer.num_output} C={layer.channels} "
        f"kernel={layer.kernel_h}x{layer.kernel_w} stride={layer.stride} pad={layer.pad}",
        f"input {plan.in_hw[0]}x{plan.in_hw[1]} output {plan.out_hw[0]}x{plan.out_hw[1]}",
        f"tune {plan.tune.label()} lre={'on' if plan.lre_enabled else 'off'} tiles={len(plan.tiles)}",
        "permutation " + " ".join(map(str, plan.reorder.permutation)),
    ]
    for g, group in enumerate(plan.groups):
        kept, sig = plan.reorder.keys[g]
        lines.append(f"group {g} filters={list(group.filters)} kept={kept} "
                     f"signature={list(sig)} windows={len(group.windows)}")
        for (gg, c, r), cols in sorted(plan.load_schedule.items()):
            if gg == g:
                lines.append(f"  load c={c} row={r} cols={list(cols)}")
    stats = count_loads(plan)
    lines.append(f"stats loads={stats.loads} macs={stats.macs} group_switches={stats.group_switches}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reference paths

def dense_conv2d(weights: np.ndarray, x: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct convolution over every kernel cell, (C, H, W) -> (F, OH, OW)."""
    w = np.asarray(weights)
    f, c, kh, kw = w.shape
    dtype = np.result_type(w, x)
    xp = _padded(np.asarray(x, dtype=dtype), pad)
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((f, oh, ow), dtype=dtype)
    for r in range(kh):
        for s in range(kw):
            patch = xp[:, r:r + stride * (oh - 1) + 1:stride, s:s + stride * (ow - 1) + 1:stride]
            out += np.einsum("fc,chw->fhw", w[:, :, r, s].astype(dtype), patch)
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = _padded(x, pad)
    c = xp.shape[0]
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    cols = np.empty((c, kh, kw, oh, ow), dtype=xp.dtype)
    for r in range(kh):
        for s in range(kw):
            cols[:, r, s] = xp[:, r:r + stride * (oh - 1) + 1:stride, s:s + stride * (ow - 1) + 1:stride]
    return cols.reshape(c * kh * kw, oh * ow), (oh, ow)


def csr_conv2d(csr: CsrLayer, x: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Row-by-row sparse product against im2col columns."""
    f, c, kh, kw = csr.shape
    dtype = np.result_type(csr.values, x)
    cols, (oh, ow) = _im2col(np.asarray(x, dtype=dtype), kh, kw, stride, pad)
    out = np.zeros((f, oh * ow), dtype=dtype)
    for row in range(f):
        lo, hi = int(csr.row_ptr[row]), int(csr.row_ptr[row + 1])
        if hi > lo:
            out[row] = csr.values[lo:hi].astype(dtype) @ cols[csr.col_idx[lo:hi]]
    return out.reshape(f, oh, ow)


# ---------------------------------------------------------------------------
# tuning and benchmarking

@dataclass(frozen=True)
class TraceEntry:
    config: TuneConfig
    median_s: float
    loads: int
    macs: int


@dataclass
class TuneResult:
    best: TuneConfig
    trace: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["config", "tile_h", "tile_w", "loop_order", "unroll", "median_ms", "loads", "macs"])
        for e in self.trace:
            c = e.config
            writer.writerow([c.label(), c.tile_h, c.tile_w, "-".join(c.loop_order), c.unroll,
                             f"{e.median_s * 1e3:.6f}", e.loads, e.macs])
        return buf.getvalue()


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def auto_tune(layer: LayerSpec, assignment: PatternAssignment, input_hw: Optional[tuple] = None,
              budget: Optional[int] = None, repeats: int = 5, weights: Optional[np.ndarray] = None,
              seed: int = 0, lre_enabled: bool = True) -> TuneResult:
    """Measure the first ``budget`` grid configs; keep the fastest median.

    Measurements run one after another. Equal medians resolve to the config
    that comes first in the grid.
    """
    grid = search_space()
    budget = len(grid) if budget is None else budget
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if input_hw is None:
        input_hw = tuple(layer.in_shape[1:])
    rng = np.random.default_rng(seed)
    if weights is None:
        shape = (layer.num_output, layer.channels, layer.kernel_h, layer.kernel_w)
        weights = np.where(assignment.mask(), rng.standard_normal(shape), 0.0).astype(np.float32)
    x = rng.standard_normal((layer.channels,) + tuple(input_hw)).astype(np.float32)
    reorder = filter_kernel_reorder(assignment)
    trace = []
    for config in grid[:budget]:
        plan = build_execution_plan(layer, assignment, reorder, config, input_hw, lre_enabled)
        median = _median_time(lambda: execute_plan(plan, weights, x), repeats)
        stats = count_loads(plan)
        trace.append(TraceEntry(config, median, stats.loads, stats.macs))
    best = min(range(len(trace)), key=lambda i: (trace[i].median_s, i))
    return TuneResult(trace[best].config, trace)


@dataclass(frozen=True)
class BenchRow:
    plan: str
    time_ms_median: float
    loads: int
    macs: int
    group_switches: int


BENCH_COLUMNS = ("plan", "time_ms_median", "loads", "macs", "group_switches")


def bench_compare(layer: LayerSpec, weights: np.ndarray, assignment: PatternAssignment,
                  x: np.ndarray, tune: Optional[TuneConfig] = None, repeats: int = 5,
                  atol: float = 1e-5) -> list:
    """Time the pattern plan against CSR and dense execution of the same layer.

    Loads for CSR and dense count one input load per MAC. Their branch proxy
    is the number of CSR rows and a single uniform loop nest respectively.
    Raises ``ValueError`` when the three outputs disagree beyond ``atol``.
    """
    input_hw = tuple(np.shape(x)[1:])
    plan = build_execution_plan(layer, assignment, filter_kernel_reorder(assignment), tune, input_hw)
    pattern_out, stats = execute_plan(plan, weights, x)
    csr = encode_csr(weights)
    csr_out = csr_conv2d(csr, x, layer.stride, layer.pad)
    dense_out = dense_conv2d(weights, x, layer.stride, layer.pad)
    for name, out in (("csr", csr_out), ("dense", dense_out)):
        err = float(np.max(np.abs(out - pattern_out))) if out.size else 0.0
        if err > atol:
            raise ValueError(f"{name} plan output differs from the pattern plan by {err:g}")
    area = plan.out_hw[0] * plan.out_hw[1]
    dense_macs = int(np.prod(np.shape(weights))) * area
    rows = [
        BenchRow("pattern", _median_time(lambda: execute_plan(plan, weights, x), repeats) * 1e3,
                 stats.loads, stats.macs, stats.group_switches),
        BenchRow("csr", _median_time(lambda: csr_conv2d(csr, x, layer.stride, layer.pad), repeats) * 1e3,
                 csr.nnz * area, csr.nnz * area, layer.num_output),
        BenchRow("dense", _median_time(lambda: dense_conv2d(weights, x, layer.stride, layer.pad),
                                       repeats) * 1e3, dense_macs, dense_macs, 1),
    ]
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for r in rows:
        writer.writerow([r.plan, f"{r.time_ms_median:.6f}", r.loads, r.macs, r.group_switches])
    return buf.getvalue()
