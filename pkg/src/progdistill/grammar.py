"""Probabilistic context-free grammars: file format, sampling, tree levels,
BERT-style masking, n-gram windows and an exact masked-token posterior.

Levels of a parse tree are stored as distance from the root. Queries such
as :func:`boundary_positions` take a level counted upward from the leaves:
level ``l`` selects internal nodes at distance ``tree.depth - l`` from the
root, so level 1 is the parent layer of the terminals and covers every
token when each preterminal emits one word.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

MAX_NODES = 100_000
NORM_TOL = 1e-6

# corruption kinds in a MaskedExample
MASK, RANDOM, KEEP = "mask", "random", "keep"


class GrammarError(ValueError):
    """Malformed grammar text or an invalid grammar."""


class SamplingError(RuntimeError):
    """Derivation exceeded the node budget."""


class OracleUnavailable(RuntimeError):
    """Exact posterior requested beyond the enumeration budget."""


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]
    prob: float


@dataclass
class Grammar:
    root: str
    rules: list[Rule]
    nonterminals: list[str] = field(default_factory=list)
    terminals: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.nonterminals:
            self.nonterminals = list(dict.fromkeys(r.lhs for r in self.rules))
        if not self.terminals:
            nts = set(self.nonterminals)
            self.terminals = list(dict.fromkeys(s for r in self.rules for s in r.rhs if s not in nts))
        self._by_lhs: dict[str, list[Rule]] = {a: [] for a in self.nonterminals}
        for r in self.rules:
            self._by_lhs[r.lhs].append(r)
        self._cum = {a: np.cumsum([r.prob for r in rs]) for a, rs in self._by_lhs.items()}
        self.token_id = {t: i for i, t in enumerate(self.terminals)}
        self.nt_id = {a: i for i, a in enumerate(self.nonterminals)}

    @property
    def vocab_size(self) -> int:
        return len(self.terminals)

    def rules_for(self, lhs: str) -> list[Rule]:
        return self._by_lhs[lhs]

    def is_terminal(self, sym: str) -> bool:
        return sym not in self._by_lhs

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.token_id[t] for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.terminals[i] for i in ids]


# --------------------------------------------------------------- file format

def _parse_rule(line: str, lineno: int) -> tuple[str, tuple[str, ...], float]:
    if "->" not in line:
        raise GrammarError(f"line {lineno}: expected 'LHS -> symbols [p]'")
    lhs, rest = (s.strip() for s in line.split("->", 1))
    if not lhs or len(lhs.split()) != 1:
        raise GrammarError(f"line {lineno}: left-hand side must be a single symbol")
    prob = 1.0
    if rest.endswith("]"):
        if "[" not in rest:
            raise GrammarError(f"line {lineno}: unbalanced probability bracket")
        rest, p = rest[:-1].rsplit("[", 1)
        try:
            prob = float(p)
        except ValueError:
            raise GrammarError(f"line {lineno}: bad probability {p!r}") from None
    rhs = tuple(rest.split())
    if not rhs:
        raise GrammarError(f"line {lineno}: empty right-hand side")
    if not (prob >= 0 and math.isfinite(prob)):
        raise GrammarError(f"line {lineno}: probability must be finite and >= 0, got {prob}")
    return lhs, rhs, prob


def load_grammar(text: str) -> Grammar:
    """Parse the line format::

        root: S
        terminals: a b          # optional; restricts allowed terminals
        S -> A B [0.5]
        # comment

    Rule probabilities for one LHS are renormalized if they sum to 1
    within 1e-6, and rejected otherwise.
    """
    root = None
    declared: list[str] | None = None
    raw: list[tuple[str, tuple[str, ...], float, int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("root:"):
            root = line[5:].strip()
            if not root or len(root.split()) != 1:
                raise GrammarError(f"line {lineno}: root must name one symbol")
            continue
        if line.startswith("terminals:"):
            declared = line[10:].split()
            continue
        lhs, rhs, p = _parse_rule(line, lineno)
        raw.append((lhs, rhs, p, lineno))
    if root is None:
        raise GrammarError("missing 'root:' line")
    nts = list(dict.fromkeys(r[0] for r in raw))
    if root not in nts:
        raise GrammarError(f"root {root!r} has no rules")
    if declared is not None:
        allowed = set(declared) | set(nts)
        for lhs, rhs, _, lineno in raw:
            for s in rhs:
                if s not in allowed:
                    raise GrammarError(f"line {lineno}: unknown symbol {s!r}")
    totals: dict[str, float] = {}
    first_line: dict[str, int] = {}
    for lhs, _, p, lineno in raw:
        totals[lhs] = totals.get(lhs, 0.0) + p
        first_line.setdefault(lhs, lineno)
    for lhs, tot in totals.items():
        if abs(tot - 1.0) > NORM_TOL:
            raise GrammarError(f"line {first_line[lhs]}: rules for {lhs!r} have probability sum {tot:.6g}")
    rules = [Rule(lhs, rhs, p / totals[lhs]) for lhs, rhs, p, _ in raw]
    terminals = list(declared) if declared is not None else []
    if terminals:
        used = dict.fromkeys(s for r in rules for s in r.rhs if s not in set(nts))
        terminals = [t for t in declared if t in used] + [t for t in used if t not in declared]
    return Grammar(root, rules, nts, terminals)


def save_grammar(g: Grammar) -> str:
    """Canonical text form; ``load_grammar(save_grammar(g))`` reproduces ``g``."""
    lines = [f"root: {g.root}", "terminals: " + " ".join(g.terminals)]
    for r in g.rules:
        lines.append(f"{r.lhs} -> {' '.join(r.rhs)} [{r.prob!r}]")
    return "\n".join(lines) + "\n"


def bundled_grammar(name: str) -> Grammar:
    """Load one of the grammars shipped in ``progdistill/grammars``."""
    path = resources.files("progdistill") / "grammars" / f"{name}.cfg"
    return load_grammar(path.read_text(encoding="utf-8"))


def layered_grammar(depth: int, per_level: int, rules_per_nt: int, rhs_lengths: Sequence[int],
                    vocab: int, rng: np.random.Generator, leaf_lengths: Sequence[int] = (1,)) -> Grammar:
    """Random depth-uniform grammar in the spirit of the cfg3 family.

    Level 0 is the root ``S``; levels 1..depth-1 hold ``per_level``
    nonterminals each; every nonterminal has ``rules_per_nt`` rules whose
    right-hand sides draw from the next level with no two equal neighbours.
    The last nonterminal level rewrites to terminal strings whose lengths
    come from ``leaf_lengths``; with the default (1,) every token sits at
    the same depth below a one-word preterminal.
    """
    if depth < 2 or per_level < 2 or vocab < 2:
        raise ValueError("need depth >= 2, per_level >= 2 and vocab >= 2")
    if tuple(leaf_lengths) == (1,) and rules_per_nt > vocab:
        raise ValueError("preterminals need rules_per_nt <= vocab distinct words")
    names = [["S"]] + [[f"N{l}_{i}" for i in range(per_level)] for l in range(1, depth)]
    terms = [f"t{i}" for i in range(vocab)]
    rules: list[Rule] = []
    for l, level in enumerate(names):
        last = l == depth - 1
        for a in level:
            bodies: list[tuple[str, ...]] = []
            while len(bodies) < rules_per_nt:
                pool = terms if last else names[l + 1]
                n = int(rng.choice(leaf_lengths if last else rhs_lengths))
                body = [pool[int(rng.integers(len(pool)))]]
                while len(body) < n:
                    s = pool[int(rng.integers(len(pool)))]
                    if s != body[-1]:
                        body.append(s)
                body = tuple(body)
                if body not in bodies:
                    bodies.append(body)
            w = rng.uniform(0.5, 1.5, size=rules_per_nt)
            w = np.round(w / w.sum(), 6)
            w[-1] = round(1.0 - w[:-1].sum(), 6)
            rules.extend(Rule(a, b, float(p)) for b, p in zip(bodies, w))
    used = {s for r in rules for s in r.rhs}
    return Grammar("S", rules, terminals=[t for t in terms if t in used])


# ------------------------------------------------------------------- trees

@dataclass
class Node:
    symbol: str
    level: int
    children: list[Node] = field(default_factory=list)
    position: int = -1          # sentence index, leaves only
    start: int = 0
    end: int = 0                # span is [start, end)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class ParseTree:
    root: Node

    def nodes(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(reversed(n.children))
        return out

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes() if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.level for n in self.leaves())

    def tokens(self) -> list[str]:
        return [n.symbol for n in self.leaves()]

    def is_depth_uniform(self) -> bool:
        return len({n.level for n in self.leaves()}) == 1


def sample_sentence(g: Grammar, rng: np.random.Generator, max_nodes: int = MAX_NODES,
                    ) -> tuple[list[str], ParseTree]:
    """Expand the root depth-first, drawing each rule with its probability."""
    root = Node(g.root, 0)
    stack = [root]
    count = 1
    tokens: list[str] = []
    # pre-order expansion; leaves are reached left to right
    while stack:
        node = stack.pop()
        if g.is_terminal(node.symbol):
            node.position = len(tokens)
            node.start, node.end = node.position, node.position + 1
            tokens.append(node.symbol)
            continue
        rules = g.rules_for(node.symbol)
        idx = int(np.searchsorted(g._cum[node.symbol], rng.random() * g._cum[node.symbol][-1], side="right"))
        rule = rules[min(idx, len(rules) - 1)]
        count += len(rule.rhs)
        if count > max_nodes:
            raise SamplingError(f"derivation exceeded {max_nodes} nodes")
        node.children = [Node(s, node.level + 1) for s in rule.rhs]
        stack.extend(reversed(node.children))
    _fill_spans(root)
    return tokens, ParseTree(root)


def _fill_spans(root: Node) -> None:
    order: list[Node] = []
    stack = [root]
    while stack:
        n = stack.pop()
        order.append(n)
        stack.extend(n.children)
    for n in reversed(order):
        if n.children:
            n.start, n.end = n.children[0].start, n.children[-1].end


def validate_tree(g: Grammar, tree: ParseTree, tokens: Sequence[str] | None = None) -> bool:
    """Every expansion is a positive-probability rule; leaves spell ``tokens``."""
    allowed = {(r.lhs, r.rhs) for r in g.rules if r.prob > 0}
    if tree.root.symbol != g.root:
        return False
    for n in tree.nodes():
        if n.children:
            if (n.symbol, tuple(c.symbol for c in n.children)) not in allowed:
                return False
            if any(c.level != n.level + 1 for c in n.children):
                return False
        elif not g.is_terminal(n.symbol):
            return False
    return tokens is None or tree.tokens() == list(tokens)


def boundary_positions(tree: ParseTree, level: int) -> list[tuple[int, str]]:
    """(rightmost span position, symbol) for each node ``level`` steps above the leaf layer."""
    depth = tree.depth
    if not 1 <= level <= depth - 1:
        raise ValueError(f"level must lie in [1, {depth - 1}], got {level}")
    target = depth - level
    return [(n.end - 1, n.symbol) for n in tree.nodes() if n.level == target and n.children]


# ----------------------------------------------------------------- masking

@dataclass
class MaskedExample:
    tokens: np.ndarray          # original ids
    masked: np.ndarray          # sorted positions in M
    input: np.ndarray           # corrupted ids
    kinds: list[str]            # one per entry of ``masked``

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens.tolist(), "masked": self.masked.tolist(),
                           "input": self.input.tolist(), "kinds": list(self.kinds)})


_KIND_NAMES = (MASK, RANDOM, KEEP)


def mask_arrays(tokens: np.ndarray, p: float, rng: np.random.Generator, vocab: int, mask_id: int,
                valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized 80/10/10 corruption of an id array of any shape.

    Returns ``(input, in_M, kind)`` with ``kind`` in {0: mask, 1: random,
    2: keep} where ``in_M`` holds and -1 elsewhere. ``valid`` excludes
    padding from M.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    in_m = rng.random(tokens.shape) < p
    if valid is not None:
        in_m &= valid
    u = rng.random(tokens.shape)
    rand_tok = rng.integers(0, vocab, size=tokens.shape)
    kind = np.where(u < 0.8, 0, np.where(u < 0.9, 1, 2))
    kind = np.where(in_m, kind, -1)
    out = np.where(kind == 0, mask_id, np.where(kind == 1, rand_tok, tokens))
    return out, in_m, kind


def apply_masking(tokens, p: float, rng: np.random.Generator, vocab: int,
                  mask_id: int | None = None) -> MaskedExample:
    """Each position joins M w.p. ``p``; members become [mask] (80%), a random
    vocabulary token (10%) or stay as they are (10%)."""
    if not 0 < p < 1:
        raise ValueError("mask rate must lie in (0, 1)")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot mask an empty sequence")
    mask_id = vocab if mask_id is None else mask_id
    out, in_m, kind = mask_arrays(tokens, p, rng, vocab, mask_id)
    pos = np.flatnonzero(in_m)
    return MaskedExample(tokens, pos, out, [_KIND_NAMES[k] for k in kind[pos]])


def export_jsonl(examples: Iterable[MaskedExample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
            n += 1
    return n


def ngram_window(i: int, n: int, h: int, mode: str = "centered") -> list[int]:
    """Positions of the n-gram context of ``i``.

    ``centered`` keeps i and clips at the ends; ``left`` is the n-1 tokens
    strictly before i.
    """
    if not 0 <= i < h:
        raise ValueError(f"position {i} outside [0, {h})")
    if n < 1:
        raise ValueError("window size must be >= 1")
    if mode == "centered":
        lo = max(i - (n // 2), 0)          # ceil((n-1)/2) == n // 2
        hi = min(i + (n - 1) // 2, h - 1)
        return list(range(lo, hi + 1))
    if mode == "left":
        return list(range(max(i - n + 1, 0), i))
    raise ValueError(f"unknown window mode {mode!r}")


# ------------------------------------------------------------ exact oracle

def inside_probability(g: Grammar, pattern: Sequence[int | None], max_len: int = 64) -> float:
    """P(the root derives a string of this length matching ``pattern``).

    ``pattern`` holds a token id per position, or None for a wildcard.
    Computed with an inside chart over arbitrary-arity rules; empty
    right-hand sides are not allowed by the file format, and unary
    nonterminal chains must be acyclic.
    """
    h = len(pattern)
    if h == 0:
        return 0.0
    if h > max_len:
        raise OracleUnavailable(f"length {h} exceeds oracle budget {max_len}")
    nts = g.nonterminals
    # terminal charts: match[t][i, i+1] = 1 if position i can be token t
    term = {}
    for t, tid in g.token_id.items():
        m = np.zeros((h + 1, h + 1))
        for i, want in enumerate(pattern):
            if want is None or want == tid:
                m[i, i + 1] = 1.0
        term[t] = m
    beta = {a: np.zeros((h + 1, h + 1)) for a in nts}
    unary = [r for r in g.rules if len(r.rhs) == 1 and not g.is_terminal(r.rhs[0])]
    order = _unary_order(g, unary)
    chart = lambda s: term[s] if s in term else beta[s]
    idx = np.arange(h + 1)
    for L in range(1, h + 1):
        starts = idx[: h - L + 1]
        ends = starts + L
        new = {a: np.zeros(len(starts)) for a in nts}
        for r in g.rules:
            if len(r.rhs) == 1:
                if r.rhs[0] in term and L == 1:
                    new[r.lhs] += r.prob * term[r.rhs[0]][starts, ends]
                continue
            if len(r.rhs) > L:
                continue
            reach = np.zeros((len(starts), h + 1))
            reach[np.arange(len(starts)), starts] = 1.0
            for s in r.rhs[:-1]:
                reach = reach @ chart(s)
            last = chart(r.rhs[-1])
            new[r.lhs] += r.prob * np.einsum("ie,ie->i", reach, last[:, ends].T)
        for a in nts:
            beta[a][starts, ends] = new[a]
        for r in order:
            beta[r.lhs][starts, ends] += r.prob * beta[r.rhs[0]][starts, ends]
    return float(beta[g.root][0, h])


def _unary_order(g: Grammar, unary: list[Rule]) -> list[Rule]:
    """Unary NT->NT rules sorted so a rule's child is complete before use."""
    if not unary:
        return []
    deps = {a: {r.rhs[0] for r in unary if r.lhs == a} for a in g.nonterminals}
    done: list[str] = []
    state: dict[str, int] = {}

    def visit(a):
        if state.get(a) == 1:
            raise OracleUnavailable("cyclic unary rules are not supported by the oracle")
        if state.get(a) == 2:
            return
        state[a] = 1
        for b in deps[a]:
            visit(b)
        state[a] = 2
        done.append(a)

    for a in g.nonterminals:
        visit(a)
    rank = {a: i for i, a in enumerate(done)}
    return sorted(unary, key=lambda r: rank[r.lhs])


def exact_masked_posterior(g: Grammar, observed: Sequence[int | None], i: int,
                           max_len: int = 64) -> np.ndarray:
    """Exact P(x_i = t | visible tokens, sentence length) over the vocabulary.

    ``observed`` holds the visible token id at each position and None at
    positions in M (mask-token and random-replacement positions alike are
    unobserved). Position ``i`` is treated as unobserved.
    """
    pat = list(observed)
    if not 0 <= i < len(pat):
        raise ValueError(f"position {i} outside the sentence")
    z = np.zeros(g.vocab_size)
    for t in range(g.vocab_size):
        pat[i] = t
        z[t] = inside_probability(g, pat, max_len)
    total = z.sum()
    if total <= 0:
        raise ValueError("visible tokens have zero probability under the grammar")
    return z / total
