"""Sequitur: linear-time grammar inference from a symbol sequence.

The builder keeps two constraints while appending symbols one at a time:

* digram uniqueness: no pair of adjacent symbols occurs twice in the grammar
  (overlapping occurrences such as ``a a a`` excepted);
* rule utility: every rule other than the start rule is used at least twice.

Terminals may be any hashable values.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Hashable, Iterable


@dataclass(frozen=True)
class RuleRef:
    id: int

    def __repr__(self) -> str:
        return f"r{self.id}"


class UnknownRule(KeyError):
    pass


class _Rule:
    __slots__ = ("uid", "guard", "refs")

    def __init__(self, uid: int):
        self.uid = uid
        self.refs = 0
        self.guard = _Symbol(None, self, guard=True)
        self.guard.next = self.guard
        self.guard.prev = self.guard

    def first(self) -> "_Symbol":
        return self.guard.next

    def last(self) -> "_Symbol":
        return self.guard.prev


class _Symbol:
    __slots__ = ("value", "rule", "is_guard", "prev", "next", "key")

    def __init__(self, value, rule=None, guard=False):
        self.value = value
        self.rule = rule  # referenced rule for nonterminals, owner for guards
        self.is_guard = guard
        self.prev = None
        self.next = None
        if guard:
            self.key = ("g", rule.uid)
        elif rule is not None:
            self.key = ("n", rule.uid)
        else:
            self.key = ("t", value)

    @property
    def is_nonterminal(self) -> bool:
        return self.rule is not None and not self.is_guard


def _linked(sym: _Symbol) -> bool:
    return sym.prev is not None and sym.prev.next is sym


class _Builder:
    def __init__(self):
        self.digrams = {}
        self.ops = 0
        self._next_uid = 0
        self.start = self._new_rule()

    def _new_rule(self) -> _Rule:
        rule = _Rule(self._next_uid)
        self._next_uid += 1
        return rule

    def _nonterminal(self, rule: _Rule) -> _Symbol:
        rule.refs += 1
        return _Symbol(None, rule)

    def _copy(self, sym: _Symbol) -> _Symbol:
        return self._nonterminal(sym.rule) if sym.is_nonterminal else _Symbol(sym.value)

    # -- linked-list plumbing -------------------------------------------------
    def _delete_digram(self, sym: _Symbol) -> None:
        if sym.is_guard or sym.next.is_guard:
            return
        k = (sym.key, sym.next.key)
        if self.digrams.get(k) is sym:
            del self.digrams[k]

    def _join(self, left: _Symbol, right: _Symbol) -> None:
        self.ops += 1
        if left.next is not None:
            self._delete_digram(left)
            # in a run "x x x" only the second pair is indexed; when it goes
            # away, the first pair must be re-indexed
            if (right.prev is not None and right.next is not None and not right.is_guard
                    and right.key == right.prev.key == right.next.key):
                self.digrams[(right.key, right.next.key)] = right
            if (left.prev is not None and left.next is not None and not left.is_guard
                    and left.key == left.next.key == left.prev.key):
                self.digrams[(left.prev.key, left.key)] = left.prev
        left.next = right
        right.prev = left

    def _insert_after(self, sym: _Symbol, new: _Symbol) -> None:
        self._join(new, sym.next)
        self._join(sym, new)

    def _remove(self, sym: _Symbol) -> None:
        self._join(sym.prev, sym.next)
        self._delete_digram(sym)
        if sym.is_nonterminal:
            sym.rule.refs -= 1

    # -- the two constraints ----------------------------------------------------
    def check(self, sym: _Symbol) -> bool:
        """Index the digram starting at ``sym``; resolve it if it repeats."""
        self.ops += 1
        if sym.is_guard or sym.next.is_guard:
            return False
        k = (sym.key, sym.next.key)
        found = self.digrams.get(k)
        if found is None or found is sym:
            self.digrams[k] = sym
            return False
        if found.next is not sym and sym.next is not found:
            self._match(sym, found)
        return True

    def _match(self, new: _Symbol, old: _Symbol) -> None:
        if old.prev.is_guard and old.next.next.is_guard:
            rule = old.prev.rule
            self._substitute(new, rule)
        else:
            rule = self._new_rule()
            self._insert_after(rule.last(), self._copy(new))
            self._insert_after(rule.last(), self._copy(new.next))
            self._substitute(old, rule)
            self._substitute(new, rule)
            self.digrams[(rule.first().key, rule.first().next.key)] = rule.first()
        for sym in (rule.first(), rule.last()):
            if sym.is_nonterminal and sym.rule.refs == 1 and _linked(sym):
                self._expand(sym)

    def _substitute(self, sym: _Symbol, rule: _Rule) -> None:
        q = sym.prev
        self._remove(q.next)
        self._remove(q.next)
        self._insert_after(q, self._nonterminal(rule))
        if not self.check(q):
            self.check(q.next)

    def _expand(self, sym: _Symbol) -> None:
        """Inline the body of an underused rule at its single use."""
        left, right = sym.prev, sym.next
        body = sym.rule
        first, last = body.first(), body.last()
        self._join(left, right)
        self._delete_digram(sym)
        self._join(left, first)
        self._join(last, right)
        body.guard.next = body.guard.prev = body.guard
        # both seams are new digrams and may repeat one elsewhere
        if left.next is first and _linked(left):
            self.check(left)
        if last.next is right and _linked(last):
            self.check(last)

    def append(self, value: Hashable) -> None:
        self._insert_after(self.start.last(), _Symbol(value))
        self.check(self.start.last().prev)


@dataclass
class Grammar:
    """Rules keyed by id; bodies hold terminals and :class:`RuleRef` items."""

    rules: dict
    start: int = 0
    op_count: int = 0
    input_length: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def body(self, rule_id: int) -> tuple:
        if rule_id not in self.rules:
            raise UnknownRule(rule_id)
        return self.rules[rule_id]

    def expand(self, rule_id: int = 0) -> list:
        """Full terminal expansion of a rule."""
        if rule_id not in self.rules:
            raise UnknownRule(rule_id)
        if rule_id in self._cache:
            return list(self._cache[rule_id])
        out = []
        stack = [iter(self.rules[rule_id])]
        while stack:
            item = next(stack[-1], _END)
            if item is _END:
                stack.pop()
            elif isinstance(item, RuleRef):
                if item.id not in self.rules:
                    raise UnknownRule(item.id)
                stack.append(iter(self.rules[item.id]))
            else:
                out.append(item)
        self._cache[rule_id] = tuple(out)
        return out

    def children(self, rule_id: int) -> list:
        """Distinct rules referenced directly by ``rule_id``, in body order."""
        seen = []
        for item in self.body(rule_id):
            if isinstance(item, RuleRef) and item.id not in seen:
                seen.append(item.id)
        return seen

    def edges(self) -> list:
        return [(parent, child) for parent in sorted(self.rules) for child in self.children(parent)]

    def occurrences(self) -> dict:
        """How often each rule appears in the full expansion of the start rule."""
        order = self._topological()
        occ = {rid: 0 for rid in self.rules}
        occ[self.start] = 1
        for rid in order:
            for item in self.rules[rid]:
                if isinstance(item, RuleRef):
                    occ[item.id] += occ[rid]
        return occ

    def _topological(self) -> list:
        order, state = [], {}

        def visit(rid):
            state[rid] = 1
            for child in self.children(rid):
                if state.get(child) is None:
                    visit(child)
            state[rid] = 2
            order.append(rid)

        visit(self.start)
        return order[::-1]

    def format(self) -> str:
        lines = []
        for rid in sorted(self.rules):
            lines.append(f"r{rid} -> " + " ".join(
                repr(item) if isinstance(item, RuleRef) else _fmt(item) for item in self.rules[rid]))
        return "\n".join(lines) + "\n"


_END = object()


def _fmt(item) -> str:
    return str(item)


def sequitur_build(symbols: Iterable[Hashable]) -> Grammar:
    """Infer a grammar whose start rule ``r0`` expands back to ``symbols``."""
    seq = list(symbols)
    if not seq:
        raise ValueError("sequitur_build needs a nonempty sequence")
    builder = _Builder()
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10_000))
    try:
        for value in seq:
            builder.append(value)
    finally:
        sys.setrecursionlimit(limit)

    # renumber rules by first appearance in a depth-first walk from the start
    ids = {builder.start.uid: 0}
    rules = {}
    pending = [builder.start]
    while pending:
        rule = pending.pop()
        items = []
        sym = rule.first()
        refs = []
        while not sym.is_guard:
            if sym.is_nonterminal:
                if sym.rule.uid not in ids:
                    ids[sym.rule.uid] = len(ids)
                    refs.append(sym.rule)
                items.append(RuleRef(ids[sym.rule.uid]))
            else:
                items.append(sym.value)
            sym = sym.next
        rules[ids[rule.uid]] = tuple(items)
        pending.extend(reversed(refs))
    return Grammar(rules=dict(sorted(rules.items())), op_count=builder.ops, input_length=len(seq))
