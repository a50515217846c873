"""Kernel pattern pruning and connectivity pruning for convolution weights.

A pattern is a fixed-size set of (row, col) cells kept inside a kernel. Every
kernel of a layer picks one pattern from a small library; connectivity pruning
removes whole kernels (input-channel -> filter connections) on top of that.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

REMOVED = -1

DEFAULT_GAMMA = (0.3, 0.5, 0.7)


class ArityError(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Pattern:
    entries: tuple  # sorted ((row, col), ...)

    def __post_init__(self):
        entries = tuple(sorted(tuple(e) for e in self.entries))
        if not entries:
            raise ValueError("a pattern needs at least one entry")
        if len(set(entries)) != len(entries):
            raise ValueError(f"duplicate entries in pattern {entries}")
        object.__setattr__(self, "entries", entries)

    @property
    def k(self) -> int:
        return len(self.entries)

    def offsets(self, kw: int) -> tuple:
        """Row-major flat offsets, in entry order."""
        return tuple(r * kw + c for r, c in self.entries)

    def mask(self, kh: int, kw: int) -> np.ndarray:
        m = np.zeros((kh, kw), dtype=bool)
        for r, c in self.entries:
            m[r, c] = True
        return m

    @classmethod
    def from_offsets(cls, offsets: Iterable[int], kw: int) -> "Pattern":
        return cls(tuple(divmod(int(o), kw) for o in offsets))


@dataclass(frozen=True)
class PatternLibrary:
    patterns: tuple
    kh: int
    kw: int

    def __post_init__(self):
        if not self.patterns:
            raise ValueError("pattern library is empty")
        k = self.patterns[0].k
        for p in self.patterns:
            if p.k != k:
                raise ValueError("all patterns in a library must share one arity")
            for r, c in p.entries:
                if not (0 <= r < self.kh and 0 <= c < self.kw):
                    raise ValueError(f"entry {(r, c)} outside a {self.kh}x{self.kw} kernel")
        if len(set(self.patterns)) != len(self.patterns):
            raise ValueError("duplicate patterns in library")

    @property
    def k(self) -> int:
        return self.patterns[0].k

    def __len__(self) -> int:
        return len(self.patterns)

    def __getitem__(self, i: int) -> Pattern:
        return self.patterns[i]

    def masks(self) -> np.ndarray:
        """(P, kh*kw) boolean matrix, one row per pattern."""
        return np.stack([p.mask(self.kh, self.kw).ravel() for p in self.patterns])


@dataclass(frozen=True, eq=False)
class PatternAssignment:
    """Pattern index per (filter, channel); ``REMOVED`` marks pruned kernels."""

    ids: np.ndarray  # int16, shape (F, C)
    library: PatternLibrary

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int16)
        if ids.ndim != 2:
            raise ValueError("assignment ids must be 2-D (filters x channels)")
        if ids.size and (ids.min() < REMOVED or ids.max() >= len(self.library)):
            raise ValueError("pattern index out of range")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __eq__(self, other):
        if not isinstance(other, PatternAssignment):
            return NotImplemented
        return self.library == other.library and np.array_equal(self.ids, other.ids)

    __hash__ = None

    @property
    def shape(self) -> tuple:
        return self.ids.shape

    @property
    def present(self) -> np.ndarray:
        return self.ids != REMOVED

    @property
    def removed_fraction(self) -> float:
        return float((~self.present).mean()) if self.ids.size else 0.0

    def mask(self) -> np.ndarray:
        """Dense keep-mask of shape (F, C, kh, kw)."""
        lib = self.library
        table = np.vstack([lib.masks(), np.zeros((1, lib.kh * lib.kw), dtype=bool)])
        # REMOVED == -1 picks the trailing all-false row
        return table[self.ids].reshape(self.ids.shape + (lib.kh, lib.kw))

    def permuted(self, perm: Sequence[int]) -> "PatternAssignment":
        return PatternAssignment(self.ids[np.asarray(perm)], self.library)


@dataclass
class PruneConfig:
    k: int = 4
    library_size: int = 8
    connectivity_rate: float = 0.0
    gamma: tuple = DEFAULT_GAMMA
    module_rates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1 or self.library_size < 1:
            raise ValueError("k and library_size must be >= 1")
        if not 0.0 <= self.connectivity_rate < 1.0:
            raise ValueError("connectivity_rate must lie in [0, 1)")
        allowed = set(self.gamma) | {0.0}
        for module, rate in self.module_rates.items():
            if rate not in allowed:
                raise ValueError(f"rate {rate} for module {module!r} not in {sorted(allowed)}")


@dataclass
class PruneSummary:
    layer: str
    kept_kernels: int
    total_kernels: int
    nonzeros: int
    total_weights: int
    pattern_histogram: dict

    @property
    def pruning_rate(self) -> float:
        return 1.0 - self.nonzeros / self.total_weights if self.total_weights else 0.0


def _check_conv(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights)
    if w.ndim != 4:
        raise DimMismatch(f"expected a (F, C, kh, kw) tensor, got shape {w.shape}")
    return w


def _kernel_abs(weights: np.ndarray) -> np.ndarray:
    w = _check_conv(weights)
    f, c, kh, kw = w.shape
    return np.abs(w.astype(np.float64)).reshape(f * c, kh * kw)


def all_patterns(kh: int, kw: int, k: int) -> list:
    """Every k-cell mask of a kh x kw kernel, in lexicographic entry order."""
    return [Pattern.from_offsets(combo, kw) for combo in itertools.combinations(range(kh * kw), k)]


def design_pattern_library(weights: np.ndarray, k: int = 4, size: int = 8) -> PatternLibrary:
    """Greedily pick ``size`` k-entry masks maximising total retained |w|.

    The objective sums, over all kernels, the best retained L1 mass among the
    chosen masks. Each step adds the candidate with the largest marginal gain;
    ties go to the lexicographically smallest candidate.
    """
    w = _check_conv(weights)
    _, _, kh, kw = w.shape
    cells = kh * kw
    if k > cells or k < 1:
        raise ArityError(f"pattern arity {k} does not fit a {kh}x{kw} kernel")
    n_candidates = math.comb(cells, k)
    if not 1 <= size <= n_candidates:
        raise ValueError(f"library size must be in [1, {n_candidates}], got {size}")

    candidates = all_patterns(kh, kw, k)
    masks = np.stack([p.mask(kh, kw).ravel() for p in candidates]).astype(np.float64)
    retained = _kernel_abs(w) @ masks.T  # (kernels, candidates)
    best = np.zeros(retained.shape[0])
    available = np.ones(len(candidates), dtype=bool)
    chosen = []
    for _ in range(size):
        gains = np.maximum(retained - best[:, None], 0.0).sum(axis=0)
        gains[~available] = -np.inf
        pick = int(np.argmax(gains))
        chosen.append(candidates[pick])
        available[pick] = False
        best = np.maximum(best, retained[:, pick])
    return PatternLibrary(tuple(chosen), kh, kw)


def assign_kernel_patterns(weights: np.ndarray, library: PatternLibrary) -> PatternAssignment:
    """Give each kernel the library pattern that keeps the most L1 mass."""
    w = _check_conv(weights)
    f, c, kh, kw = w.shape
    if (kh, kw) != (library.kh, library.kw):
        raise DimMismatch(f"kernel {kh}x{kw} does not match library {library.kh}x{library.kw}")
    retained = _kernel_abs(w) @ library.masks().T.astype(np.float64)
    ids = np.argmax(retained, axis=1).reshape(f, c) if retained.size else np.zeros((f, c))
    return PatternAssignment(ids.astype(np.int16), library)


def connectivity_prune(weights: np.ndarray, rate: float) -> set:
    """Pick the kernels to cut: the ``floor(rate * F * C)`` smallest by L1 norm.

    Candidates are walked in (norm, f, c) order. A candidate is skipped when
    removing it would leave its filter or its input channel with no kernel.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"connectivity rate must lie in [0, 1), got {rate}")
    w = _check_conv(weights)
    f, c = w.shape[:2]
    # tolerance keeps e.g. 0.29 * 100 from flooring to 28
    target = math.floor(rate * f * c + 1e-9)
    if target == 0:
        return set()
    norms = np.abs(w.astype(np.float64)).sum(axis=(2, 3))
    order = sorted(((norms[i, j], i, j) for i in range(f) for j in range(c)))
    kept_per_filter = [c] * f
    kept_per_channel = [f] * c
    removed = set()
    for _, i, j in order:
        if len(removed) == target:
            break
        if kept_per_filter[i] == 1 or kept_per_channel[j] == 1:
            continue
        removed.add((i, j))
        kept_per_filter[i] -= 1
        kept_per_channel[j] -= 1
    return removed


def prune_layer(weights: np.ndarray, library: PatternLibrary, rate: float = 0.0) -> PatternAssignment:
    """Pattern assignment with the connectivity cut folded in."""
    assignment = assign_kernel_patterns(weights, library)
    ids = assignment.ids.copy()
    for i, j in connectivity_prune(weights, rate):
        ids[i, j] = REMOVED
    return PatternAssignment(ids, library)


def apply_pruning(weights: np.ndarray, assignment: PatternAssignment, layer: str = ""):
    """Zero everything outside the assigned patterns; returns (pruned, summary)."""
    w = _check_conv(weights)
    if w.shape[:2] != assignment.shape or w.shape[2:] != (assignment.library.kh, assignment.library.kw):
        raise DimMismatch(f"weights {w.shape} do not match assignment {assignment.shape}")
    mask = assignment.mask()
    pruned = np.where(mask, w, np.zeros((), dtype=w.dtype))
    present = assignment.present
    hist = Counter(int(i) for i in assignment.ids[present].ravel())
    summary = PruneSummary(
        layer=layer,
        kept_kernels=int(present.sum()),
        total_kernels=int(present.size),
        nonzeros=int(mask.sum()),
        total_weights=int(w.size),
        pattern_histogram=dict(sorted(hist.items())),
    )
    return pruned, summary


def filter_l1_prune(weights: np.ndarray, rate: float) -> np.ndarray:
    """Indices of the ``floor(rate * F)`` filters with the smallest L1 norm.

    Ties go to the lower filter index. Used by module-level pruning where a
    whole filter is the unit of removal.
    """
    w = np.asarray(weights)
    n = math.floor(rate * w.shape[0] + 1e-9)
    norms = np.abs(w.astype(np.float64)).reshape(w.shape[0], -1).sum(axis=1)
    order = np.lexsort((np.arange(w.shape[0]), norms))
    return np.sort(order[:n])


def format_report(summaries: Sequence[PruneSummary], library: Optional[PatternLibrary] = None) -> str:
    """Plain-text pruning report: per-layer rate, library and pattern usage."""
    lines = []
    if library is not None:
        lines.append(f"library k={library.k} P={len(library)} kernel={library.kh}x{library.kw}")
        for i, p in enumerate(library.patterns):
            lines.append(f"  pattern {i}: " + " ".join(f"({r},{c})" for r, c in p.entries))
    for s in summaries:
        lines.append(
            f"layer {s.layer}: kept_kernels={s.kept_kernels}/{s.total_kernels} "
            f"nonzeros={s.nonzeros}/{s.total_weights} rate={s.pruning_rate:.6f}")
        usage = " ".join(f"{pid}:{n}" for pid, n in s.pattern_histogram.items())
        lines.append(f"  usage {usage}" if usage else "  usage -")
    return "\n".join(lines) + "\n"
