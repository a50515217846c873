"""Composability planning: which pruned blocks to pre-train, and in what order
to explore the candidate networks.

Each candidate network is a sequence of :class:`ConfigSymbol` (one per
convolution module). The sequences of all candidates are concatenated, with a
unique :class:`Sentinel` after each network, and compressed with Sequitur.
Frequent rules of the resulting grammar become tuning blocks.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model_ir import ModelSpec
from .pruner import DEFAULT_GAMMA
from .sequitur import Grammar, RuleRef, sequitur_build

DEFAULT_ALPHAS = (-0.02, -0.01, 0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08)


class DomainError(ValueError):
    pass


class EvaluatorFailure(RuntimeError):
    def __init__(self, config_id: int, cause: BaseException):
        super().__init__(f"evaluator failed on config {config_id}: {cause}")
        self.config_id = config_id
        self.cause = cause


@dataclass(frozen=True, order=True)
class ConfigSymbol:
    module: int
    rate: float

    def __str__(self) -> str:
        return f"{self.module}:{self.rate:g}"


@dataclass(frozen=True, order=True)
class Sentinel:
    network: int

    def __str__(self) -> str:
        return f"#{self.network}"


@dataclass(frozen=True)
class NetworkConfig:
    symbols: tuple
    size: float = 0.0

    @property
    def rates(self) -> tuple:
        return tuple(s.rate for s in self.symbols)

    def __str__(self) -> str:
        return ",".join(str(s) for s in self.symbols)


def module_symbols(rates: Sequence[float]) -> tuple:
    return tuple(ConfigSymbol(m, float(r)) for m, r in enumerate(rates))


def estimate_size(spec: ModelSpec, rates: Sequence[float]) -> int:
    """Parameter count (weights and biases) after module-level filter pruning.

    Every convolution of a module except its last one keeps
    ``F - floor(rate * F)`` filters; the last one stays whole so the module's
    output width is unchanged. Layers outside modules are never pruned.
    """
    if len(rates) != len(spec.modules):
        raise ValueError(f"expected {len(spec.modules)} rates, got {len(rates)}")
    channels = {}
    total = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind == "input":
            channels[layer.top] = layer.channels
            continue
        c_in = channels[layer.bottom]
        if layer.kind == "convolution":
            m = spec.module_of(i)
            filters = layer.num_output
            if m is not None and layer is not spec.module_convs(spec.modules[m])[-1]:
                filters -= math.floor(rates[m] * filters + 1e-9)
            total += filters * c_in * layer.kernel_h * layer.kernel_w + filters
            channels[layer.top] = filters
        elif layer.kind == "fully_connected":
            spatial = layer.in_shape[1] * layer.in_shape[2]
            total += layer.num_output * c_in * spatial + layer.num_output
            channels[layer.top] = layer.num_output
        else:
            channels[layer.top] = c_in
    return total


def make_configs(rate_lists: Sequence[Sequence[float]], spec: Optional[ModelSpec] = None) -> list:
    """Wrap rate vectors as configs; size is the parameter count when a model
    is given, otherwise the number of kept module units ``sum(1 - rate)``."""
    configs = []
    for rates in rate_lists:
        size = estimate_size(spec, rates) if spec is not None else float(sum(1.0 - r for r in rates))
        configs.append(NetworkConfig(module_symbols(rates), size))
    return configs


# ---------------------------------------------------------------------------
# subspace files

def parse_subspace(text: str) -> tuple:
    """Read ``(gamma, rate vectors)`` from the subspace text format.

    ``# gamma: 0.3,0.5,0.7`` declares the rate set; every other non-empty line
    is one network written as ``module:rate`` pairs separated by commas.
    """
    gamma = DEFAULT_GAMMA
    networks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("gamma:"):
                gamma = tuple(float(v) for v in body.split(":", 1)[1].split(",") if v.strip())
            continue
        pairs = {}
        for item in line.split(","):
            try:
                module, rate = item.split(":")
                module, rate = int(module), float(rate)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad pair {item.strip()!r}") from exc
            if module in pairs:
                raise ValueError(f"line {lineno}: module {module} listed twice")
            pairs[module] = rate
        if sorted(pairs) != list(range(len(pairs))):
            raise ValueError(f"line {lineno}: modules must be 0..{len(pairs) - 1}")
        networks.append([pairs[m] for m in range(len(pairs))])
    allowed = set(gamma) | {0.0}
    for n, rates in enumerate(networks):
        if len(rates) != len(networks[0]):
            raise ValueError(f"network {n} has {len(rates)} modules, expected {len(networks[0])}")
        for r in rates:
            if r not in allowed:
                raise ValueError(f"network {n}: rate {r} not in gamma {sorted(allowed)}")
    return gamma, networks


def format_subspace(gamma: Sequence[float], networks: Sequence[Sequence[float]]) -> str:
    lines = ["# gamma: " + ",".join(f"{g:g}" for g in gamma)]
    for rates in networks:
        lines.append(",".join(f"{m}:{r:g}" for m, r in enumerate(rates)))
    return "\n".join(lines) + "\n"


def sample_subspace(n_modules: int, n_configs: int, gamma: Sequence[float] = DEFAULT_GAMMA,
                    seed: int = 0, size_fn: Optional[Callable] = None, bins: int = 8) -> list:
    """Distinct random rate vectors with roughly uniform sizes.

    Rates are drawn uniformly from ``gamma``; a draw is rejected while its
    size bin is already full, which flattens the size histogram.
    """
    rng = np.random.default_rng(seed)
    size_fn = size_fn or (lambda rates: sum(1.0 - r for r in rates))
    lo = size_fn([max(gamma)] * n_modules)
    hi = size_fn([min(gamma)] * n_modules)
    quota = math.ceil(n_configs / bins)
    counts = [0] * bins
    chosen, seen = [], set()
    capacity = len(gamma) ** n_modules
    if n_configs > capacity:
        raise ValueError(f"only {capacity} distinct configs exist")
    tries = 0
    while len(chosen) < n_configs:
        rates = tuple(float(r) for r in rng.choice(gamma, size=n_modules))
        tries += 1
        if rates in seen:
            continue
        b = 0 if hi == lo else min(bins - 1, int((size_fn(rates) - lo) / (hi - lo) * bins))
        if counts[b] >= quota and tries < 200 * n_configs:
            continue
        counts[b] += 1
        seen.add(rates)
        chosen.append(list(rates))
    return chosen


# ---------------------------------------------------------------------------
# grammar and tuning blocks

def concatenated_sequence(configs: Sequence[NetworkConfig]) -> list:
    seq = []
    for n, config in enumerate(configs):
        seq.extend(config.symbols)
        seq.append(Sentinel(n))
    return seq


def build_grammar(configs: Sequence[NetworkConfig]) -> Grammar:
    return sequitur_build(concatenated_sequence(configs))


@dataclass(frozen=True)
class TuningBlock:
    id: int  # grammar rule id
    symbols: tuple
    occurrences: int  # total, across the whole concatenation
    network_frequency: int  # distinct networks containing it
    per_network: tuple = ()  # ((network, count), ...)

    def __len__(self) -> int:
        return len(self.symbols)

    def __str__(self) -> str:
        return f"r{self.id}[" + " ".join(str(s) for s in self.symbols) + "]"


def rule_statistics(grammar: Grammar, n_networks: int) -> dict:
    """TuningBlock record for every non-start rule."""
    start_body = grammar.rules[grammar.start]
    per_net = {rid: [0] * n_networks for rid in grammar.rules}
    net = 0
    for item in start_body:
        if isinstance(item, Sentinel):
            net += 1
        elif isinstance(item, RuleRef):
            per_net[item.id][net] += 1
    for rid in grammar._topological():
        if rid == grammar.start:
            continue
        for item in grammar.rules[rid]:
            if isinstance(item, Sentinel):
                raise ValueError(f"rule r{rid} spans a network boundary")
            if isinstance(item, RuleRef):
                for n in range(n_networks):
                    per_net[item.id][n] += per_net[rid][n]
    stats = {}
    for rid in grammar.rules:
        if rid == grammar.start:
            continue
        counts = per_net[rid]
        stats[rid] = TuningBlock(
            id=rid,
            symbols=tuple(grammar.expand(rid)),
            occurrences=sum(counts),
            network_frequency=sum(1 for c in counts if c),
            per_network=tuple((n, c) for n, c in enumerate(counts) if c),
        )
    return stats


def descendants(grammar: Grammar, rule_id: int) -> set:
    out, stack = set(), list(grammar.children(rule_id))
    while stack:
        rid = stack.pop()
        if rid not in out:
            out.add(rid)
            stack.extend(grammar.children(rid))
    return out


@dataclass
class BlockSelection:
    blocks: list
    rules: dict  # every rule's TuningBlock record
    edges: list  # (parent, child) rule ids

    def dag_report(self) -> str:
        lines = ["rules:"]
        chosen = {b.id for b in self.blocks}
        for rid, b in sorted(self.rules.items()):
            mark = " *" if rid in chosen else ""
            lines.append(f"  r{rid} len={len(b)} occ={b.occurrences} nets={b.network_frequency} "
                         f"[{' '.join(str(s) for s in b.symbols)}]{mark}")
        lines.append("edges:")
        for parent, child in self.edges:
            lines.append(f"  r{parent} -> r{child}")
        return "\n".join(lines) + "\n"


def identify_tuning_blocks(grammar: Grammar, configs: Sequence[NetworkConfig]) -> BlockSelection:
    """Select grammar rules worth pre-training.

    Starting from the rules used directly by the start rule, a rule is taken
    when it appears in at least two networks and occurs as often as its most
    frequent descendant. Otherwise its children are considered in turn.
    Occurrence counts are totals over the whole concatenation.
    """
    stats = rule_statistics(grammar, len(configs))
    selected, visited = [], set()

    def consider(rid: int) -> None:
        if rid in visited:
            return
        visited.add(rid)
        desc = descendants(grammar, rid)
        top = max((stats[d].occurrences for d in desc), default=stats[rid].occurrences)
        if stats[rid].network_frequency >= 2 and stats[rid].occurrences >= top:
            selected.append(stats[rid])
            return
        for child in grammar.children(rid):
            consider(child)

    for rid in grammar.children(grammar.start):
        consider(rid)
    selected.sort(key=lambda b: b.id)
    return BlockSelection(selected, stats, grammar.edges())


@dataclass(frozen=True)
class CompositeVector:
    network: int
    tiles: tuple  # ((position, block id), ...)
    length: int
    covered: int

    @property
    def covered_fraction(self) -> float:
        return self.covered / self.length if self.length else 0.0


def composite_vectors(configs: Sequence[NetworkConfig], blocks: Sequence[TuningBlock]) -> list:
    """Tile each network left to right with the longest matching block."""
    ordered = sorted(blocks, key=lambda b: (-len(b), b.id))
    vectors = []
    for n, config in enumerate(configs):
        syms = config.symbols
        tiles, covered, i = [], 0, 0
        while i < len(syms):
            for block in ordered:
                if syms[i:i + len(block)] == block.symbols:
                    tiles.append((i, block.id))
                    covered += len(block)
                    i += len(block)
                    break
            else:
                i += 1
        vectors.append(CompositeVector(n, tuple(tiles), len(syms), covered))
    return vectors


# ---------------------------------------------------------------------------
# exploration

@dataclass(frozen=True)
class ExplorationObjective:
    full_accuracy: float
    alpha: float = 0.0

    def __post_init__(self):
        if not -0.02 - 1e-12 <= self.alpha <= 0.08 + 1e-12:
            raise ValueError(f"alpha {self.alpha} outside [-0.02, 0.08]")

    @property
    def threshold(self) -> float:
        return self.full_accuracy - self.alpha


@dataclass(frozen=True)
class ExplorationEntry:
    config_id: int
    size: float
    accuracy: float
    cumulative_time: float


@dataclass
class ExplorationResult:
    best: Optional[NetworkConfig]
    best_id: Optional[int]
    threshold: float
    log: list = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.best is not None

    @property
    def evaluated(self) -> int:
        return len(self.log)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["config_id", "size", "accuracy", "cumulative_time"])
        for e in self.log:
            writer.writerow([e.config_id, f"{e.size:g}", f"{e.accuracy:.6f}", f"{e.cumulative_time:.6f}"])
        return buf.getvalue()


def plan_exploration(configs: Sequence[NetworkConfig], objective: ExplorationObjective,
                     evaluator: Callable, workers: int = 1,
                     cost_fn: Optional[Callable] = None) -> ExplorationResult:
    """Evaluate configs smallest first; stop at the first that meets the threshold.

    With ``workers > 1`` configs are dispatched in size-ordered batches of
    ``workers``; a batch finishes before any of its results can end the
    search, so the evaluated count rounds up to a multiple of ``workers``.
    ``evaluator(config)`` returns an accuracy; ``cost_fn(config)`` (default:
    measured wall time) feeds the cumulative-time column.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    order = sorted(range(len(configs)), key=lambda i: (configs[i].size, i))
    thr = objective.threshold
    result = ExplorationResult(None, None, thr)
    clock = 0.0

    def run(i):
        t0 = time.perf_counter()
        try:
            acc = float(evaluator(configs[i]))
        except Exception as exc:
            raise EvaluatorFailure(i, exc) from exc
        spent = cost_fn(configs[i]) if cost_fn is not None else time.perf_counter() - t0
        return acc, spent

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for b in range(0, len(order), workers):
            batch = order[b:b + workers]
            outcomes = list(pool.map(run, batch)) if pool else [run(i) for i in batch]
            for i, (acc, spent) in zip(batch, outcomes):
                clock += spent
                result.log.append(ExplorationEntry(i, configs[i].size, acc, clock))
                if result.best is None and acc >= thr:
                    result.best, result.best_id = configs[i], i
            if result.found:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return result


@dataclass(frozen=True)
class Speedup:
    speedup: float
    overhead_fraction: float


def compute_speedup(base_time: float, comp_time: float, block_time: float = 0.0) -> Speedup:
    """Baseline time over composability time (which already includes pre-training)."""
    if base_time <= 0 or comp_time <= 0:
        raise DomainError("times must be positive")
    if block_time < 0 or block_time > comp_time:
        raise DomainError("block time must lie in [0, comp_time]")
    return Speedup(base_time / comp_time, block_time / comp_time)


# ---------------------------------------------------------------------------
# savings model

@dataclass(frozen=True)
class CostModel:
    unit_cost: float = 1.0  # training cost of one module in one network
    beta: float = 0.5  # fine-tune discount on covered modules
    pretrain_factor: float = 1.0  # pre-training cost per block module, in units

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass
class SavingsReport:
    base: float
    projected: float
    optimal_projected: Optional[float]
    optimal_blocks: Optional[tuple]
    candidates: int

    @property
    def saved(self) -> float:
        return self.base - self.projected

    @property
    def profitable(self) -> bool:
        return self.saved > 0

    @property
    def gap(self) -> Optional[float]:
        return None if self.optimal_projected is None else self.projected - self.optimal_projected

    def format(self) -> str:
        lines = [f"base {self.base:.6g}", f"projected {self.projected:.6g}",
                 f"saved {self.saved:.6g}", f"profitable {'yes' if self.profitable else 'no'}"]
        if self.optimal_projected is None:
            lines.append(f"optimal skipped ({self.candidates} candidate rules)")
        else:
            ids = " ".join(f"r{i}" for i in self.optimal_blocks) or "-"
            lines.append(f"optimal {self.optimal_projected:.6g} blocks {ids}")
            lines.append(f"gap {self.gap:.6g}")
        return "\n".join(lines) + "\n"


def projected_cost(configs: Sequence[NetworkConfig], blocks: Sequence[TuningBlock],
                   cost: CostModel) -> float:
    pretrain = sum(cost.pretrain_factor * len(b) * cost.unit_cost for b in blocks)
    total = pretrain
    for config, vec in zip(configs, composite_vectors(configs, blocks)):
        total += len(config.symbols) * cost.unit_cost * (1.0 - cost.beta * vec.covered_fraction)
    return total


def savings_report(configs: Sequence[NetworkConfig], blocks: Sequence[TuningBlock],
                   cost: CostModel = CostModel(), candidates: Optional[Sequence[TuningBlock]] = None,
                   max_exhaustive: int = 12) -> SavingsReport:
    """Projected exploration cost with ``blocks`` pre-trained, next to the best
    subset of ``candidates`` found by exhaustive search (when small enough)."""
    base = sum(len(c.symbols) * cost.unit_cost for c in configs)
    projected = projected_cost(configs, blocks, cost)
    candidates = list(blocks if candidates is None else candidates)
    best, best_ids = None, None
    if len(candidates) <= max_exhaustive:
        for r in range(len(candidates) + 1):
            for subset in itertools.combinations(candidates, r):
                value = projected_cost(configs, subset, cost)
                if best is None or value < best - 1e-12:
                    best, best_ids = value, tuple(b.id for b in subset)
    return SavingsReport(base, projected, best, best_ids, len(candidates))
