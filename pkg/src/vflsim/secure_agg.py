"""Masked two-tree aggregation of per-party partial inner products.

Every party adds a random mask to its partial and the masked values are
summed up tree ``T1``; the masks alone are summed up a different tree ``T2``.
The aggregator subtracts the two sums. Payloads are carried as exact dyadic
rationals (scaled Python ints), so cancellation of the masks is exact and the
result is the correctly rounded sum of the partials regardless of the mask
magnitude.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .core import InvalidInput, VFLError

# every finite double is an integer multiple of 2**-1074
_SHIFT = 1074
_SCALE = 1 << _SHIFT


class InvalidPartyCount(VFLError, ValueError):
    pass


def to_fixed(x: float) -> int:
    num, den = float(x).as_integer_ratio()
    # den is a power of two no larger than 2**1074
    return num << (_SHIFT + 1 - den.bit_length())


def from_fixed(v: int) -> float:
    # int / int true division is correctly rounded in CPython
    return v / _SCALE


def exact_sum(values: Iterable[float]) -> float:
    """Correctly rounded sum; bit-identical to a masked aggregation of the same values."""
    return math.fsum(values)


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggTree:
    """Rooted aggregation tree whose leaves are the parties.

    Node ids ``0..q-1`` are the party leaves; internal nodes follow. Each
    internal node is hosted by a party (the host of its first child), which
    receives the children's values and forwards their sum to its parent.
    """

    q: int
    parent: tuple[int, ...]
    host: tuple[int, ...]

    def __post_init__(self):
        n_nodes = len(self.parent)
        roots = [v for v, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            raise InvalidInput(f"tree needs exactly one root, found {len(roots)}")
        # every node must reach the root without cycles
        for v in range(n_nodes):
            seen = set()
            while v >= 0:
                if v in seen:
                    raise InvalidInput("parent links contain a cycle")
                seen.add(v)
                v = self.parent[v]
        for leaf in range(self.q):
            if any(self.parent[u] == leaf for u in range(n_nodes)):
                raise InvalidInput(f"party leaf {leaf} has children")

    @property
    def root(self) -> int:
        return self.parent.index(-1)

    @property
    def aggregator(self) -> int:
        return self.host[self.root]

    def children(self, node: int) -> list[int]:
        return [u for u, p in enumerate(self.parent) if p == node]

    def leaves_under(self, node: int) -> frozenset[int]:
        if node < self.q:
            return frozenset([node])
        return frozenset().union(*(self.leaves_under(c) for c in self.children(node)))

    def subtree_leaf_sets(self) -> list[frozenset[int]]:
        """Leaf sets of all internal nodes."""
        return [self.leaves_under(v) for v in range(self.q, len(self.parent))]

    def parties(self) -> frozenset[int]:
        return frozenset(range(self.q))

    def postorder(self) -> list[int]:
        order: list[int] = []

        def visit(v):
            for c in self.children(v):
                visit(c)
            order.append(v)

        visit(self.root)
        return order

    @cached_property
    def plan(self) -> tuple:
        """Internal nodes in post-order with (node, children, child leaf sets)."""
        return tuple(
            (v, tuple(self.children(v)), tuple(self.leaves_under(c) for c in self.children(v)))
            for v in self.postorder()
            if v >= self.q
        )

    @classmethod
    def from_nested(cls, nested) -> "AggTree":
        """Build from nested tuples of party ids, e.g. ``((0, 1), (2, 3))``.

        A bare int at top level means a single-party tree.
        """
        leaves = sorted(_flatten(nested))
        q = len(leaves)
        if leaves != list(range(q)):
            raise InvalidInput(f"leaves must be exactly 0..{q - 1}, got {leaves}")
        parent: list[int] = [-1] * q
        host: list[int] = list(range(q))

        def build(node) -> int:
            if isinstance(node, (int, np.integer)):
                return int(node)
            kids = [build(c) for c in node]
            if len(kids) < 2:
                raise InvalidInput("internal nodes need at least two children")
            me = len(parent)
            parent.append(-1)
            host.append(host[kids[0]])
            for k in kids:
                parent[k] = me
            return me

        build(nested)
        return cls(q=q, parent=tuple(parent), host=tuple(host))

    def to_nested(self, node: int | None = None):
        node = self.root if node is None else node
        if node < self.q:
            return node
        return tuple(self.to_nested(c) for c in self.children(node))


def _flatten(nested) -> list[int]:
    if isinstance(nested, (int, np.integer)):
        return [int(nested)]
    return [leaf for c in nested for leaf in _flatten(c)]


def balanced_tree(order: Sequence[int]):
    """Nested balanced binary grouping of ``order``."""
    if len(order) == 1:
        return order[0]
    mid = (len(order) + 1) // 2
    return (balanced_tree(order[:mid]), balanced_tree(order[mid:]))


def significantly_different(t1: AggTree, t2: AggTree) -> bool:
    """True iff the trees differ and share no proper multi-leaf subtree leaf set."""
    if t1.parties() != t2.parties():
        raise InvalidInput("trees span different party sets")
    q = t1.q
    s1 = {s for s in t1.subtree_leaf_sets() if 1 < len(s) < q}
    s2 = {s for s in t2.subtree_leaf_sets() if 1 < len(s) < q}
    if s1 == s2:
        # identical hierarchies (this also covers q <= 2, where no proper subtree exists)
        return False
    return not (s1 & s2)


@dataclass(frozen=True)
class TreePair:
    t1: AggTree
    t2: AggTree
    degraded: bool = False

    def __iter__(self):
        return iter((self.t1, self.t2))


def build_tree_pair(q: int, seed: int, max_tries: int = 2000) -> TreePair:
    """Balanced binary ``T1`` over a seeded permutation and a re-paired ``T2``.

    For q >= 4 the pair passes :func:`significantly_different` and no single
    party can reconstruct another party's partial from what it receives. For
    q in {2, 3} a best-effort distinct pair is returned with ``degraded=True``.
    """
    if q < 2:
        raise InvalidPartyCount(f"need at least 2 parties, got {q}")
    rng = np.random.default_rng(seed)
    t1 = AggTree.from_nested(balanced_tree([int(p) for p in rng.permutation(q)]))
    if q == 2:
        t2 = AggTree.from_nested(balanced_tree([int(p) for p in rng.permutation(q)]))
        return TreePair(t1, t2, degraded=True)
    best = None
    for _ in range(max_tries):
        t2 = AggTree.from_nested(balanced_tree([int(p) for p in rng.permutation(q)]))
        if not significantly_different(t1, t2):
            continue
        if best is None:
            best = t2
        if not any(structural_leaks(t1, t2, [p]) for p in range(q)):
            return TreePair(t1, t2, degraded=q < 4)
    if q < 4 and best is not None:
        return TreePair(t1, best, degraded=True)
    raise VFLError(f"no leak-free significantly different tree pair found for q={q}")


def four_party_trees() -> TreePair:
    """The four-party pair: T1 groups {0,1},{2,3}; T2 groups {0,2},{1,3}."""
    return TreePair(AggTree.from_nested(((0, 1), (2, 3))), AggTree.from_nested(((0, 2), (1, 3))))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


class Phase(str, enum.Enum):
    MASKED = "masked"      # sums of partial + mask, travelling up T1
    MASK_ONLY = "mask"     # sums of masks, travelling up T2


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    payload: float
    phase: Phase
    covers: frozenset[int]
    exact: int = field(default=0, repr=False, compare=False)


@dataclass(frozen=True)
class AggregationTranscript:
    messages: tuple[Message, ...]
    result: float
    trees: TreePair

    def received_by(self, parties: Iterable[int]) -> list[Message]:
        ps = set(parties)
        return [m for m in self.messages if m.receiver in ps and m.sender not in ps]


def _run_tree(tree: AggTree, values: Sequence[int], phase: Phase, messages: list | None) -> int:
    acc: dict[int, int] = dict(enumerate(values))
    host = tree.host
    for v, kids, covers in tree.plan:
        total = 0
        # fixed child order keeps the transcript reproducible
        for c, cov in zip(kids, covers):
            total += acc[c]
            if messages is not None:
                messages.append(Message(host[c], host[v], from_fixed(acc[c]), phase, cov, acc[c]))
        acc[v] = total
    return acc[tree.root]


def draw_masks(rng: np.random.Generator, q: int, scale: float) -> np.ndarray:
    """Uniform masks on [-scale, scale], one per party."""
    return rng.uniform(-scale, scale, size=q)


def masked_aggregate(
    partials: Sequence[float],
    seed,
    trees: TreePair | tuple[AggTree, AggTree],
    mask_scale: float | None = None,
    unmask_debug: bool = False,
    record: bool = True,
) -> tuple[float, AggregationTranscript | None]:
    """Sum ``partials`` through the two-tree masking protocol.

    ``seed`` may be an int or a numpy Generator (used as-is). When
    ``mask_scale`` is None it defaults to ``1e3 * (1 + max|partial|)``.
    ``unmask_debug`` zeroes the masks, which the audit should then flag.
    """
    if not isinstance(trees, TreePair):
        trees = TreePair(*trees)
    q = len(partials)
    if trees.t1.q != q or trees.t2.q != q:
        raise InvalidInput(f"{q} partials but trees span {trees.t1.q}/{trees.t2.q} parties")
    messages: list[Message] | None = [] if record else None
    result = _aggregate(partials, np.random.default_rng(seed), trees, mask_scale, unmask_debug, messages)
    transcript = AggregationTranscript(tuple(messages), result, trees) if record else None
    return result, transcript


def _aggregate(partials, rng, trees: TreePair, mask_scale, unmask_debug: bool, messages) -> float:
    if not all(math.isfinite(p) for p in partials):
        raise InvalidInput("partials must be finite")
    q = len(partials)
    t1, t2 = trees.t1, trees.t2
    if mask_scale is None:
        mask_scale = 1e3 * (1.0 + max(abs(p) for p in partials))
    deltas = [0.0] * q if unmask_debug else draw_masks(rng, q, mask_scale).tolist()
    fixed_deltas = [to_fixed(d) for d in deltas]
    masked = [to_fixed(p) + dl for p, dl in zip(partials, fixed_deltas)]
    xi1 = _run_tree(t1, masked, Phase.MASKED, messages)
    xi2 = _run_tree(t2, fixed_deltas, Phase.MASK_ONLY, messages)
    if messages is not None and t2.aggregator != t1.aggregator:
        messages.append(Message(t2.aggregator, t1.aggregator, from_fixed(xi2), Phase.MASK_ONLY, t2.parties(), xi2))
    return from_fixed(xi1 - xi2)


class SecureAggregator:
    """Reusable aggregator bound to one tree pair and one mask stream."""

    def __init__(self, trees: TreePair, seed, mask_scale: float | None = None):
        if not isinstance(trees, TreePair):
            trees = TreePair(*trees)
        self.trees = trees
        self.rng = np.random.default_rng(seed)
        self.mask_scale = mask_scale
        self.calls = 0

    def __call__(self, partials: Sequence[float]) -> float:
        if len(partials) != self.trees.t1.q:
            raise InvalidInput(f"{len(partials)} partials but trees span {self.trees.t1.q} parties")
        self.calls += 1
        return _aggregate(partials, self.rng, self.trees, self.mask_scale, False, None)


# ---------------------------------------------------------------------------
# auditing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str           # "bare-partial" | "inference"
    victim: int
    observers: tuple[int, ...]
    detail: str

    def line(self) -> str:
        obs = ",".join(map(str, self.observers))
        return f"VIOLATION kind={self.kind} victim={self.victim} observers={obs} {self.detail}"


@dataclass
class AuditReport:
    violations: list[Violation] = field(default_factory=list)
    aggregations: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def extend(self, other: "AuditReport") -> None:
        self.violations.extend(other.violations)
        self.aggregations += other.aggregations

    def to_text(self) -> str:
        lines = [v.line() for v in self.violations]
        lines.append(f"{len(self.violations)} violations in {self.aggregations} aggregations")
        return "\n".join(lines)


def _knowledge_rows(messages: Iterable[Message], coalition: Iterable[int], q: int) -> np.ndarray:
    """Linear forms over (p_0..p_{q-1}, delta_0..delta_{q-1}) known to a coalition."""
    rows = []
    for c in coalition:
        e = np.zeros(2 * q)
        e[c] = 1
        rows.append(e)
        e = np.zeros(2 * q)
        e[q + c] = 1
        rows.append(e)
    for m in messages:
        r = np.zeros(2 * q)
        for p in m.covers:
            r[q + p] = 1
            if m.phase is Phase.MASKED:
                r[p] = 1
        rows.append(r)
    return np.array(rows)


def _recoverable(rows: np.ndarray, q: int, victim: int) -> bool:
    target = np.zeros(2 * q)
    target[victim] = 1
    base = np.linalg.matrix_rank(rows)
    return np.linalg.matrix_rank(np.vstack([rows, target])) == base


def _structural_messages(t1: AggTree, t2: AggTree) -> list[Message]:
    msgs: list[Message] = []
    _run_tree(t1, [0] * t1.q, Phase.MASKED, msgs)
    _run_tree(t2, [0] * t2.q, Phase.MASK_ONLY, msgs)
    if t2.aggregator != t1.aggregator:
        msgs.append(Message(t2.aggregator, t1.aggregator, 0.0, Phase.MASK_ONLY, t2.parties()))
    return msgs


def _inference_violations(messages: Sequence[Message], coalition: Sequence[int], q: int) -> list[Violation]:
    coal = sorted(set(coalition))
    seen = [m for m in messages if m.receiver in coal and m.sender not in coal]
    rows = _knowledge_rows(seen, coal, q)
    out = []
    for victim in range(q):
        if victim in coal:
            continue
        if _recoverable(rows, q, victim):
            out.append(Violation("inference", victim, tuple(coal), f"partial of party {victim} recoverable by linear combination"))
    return out


def structural_leaks(t1: AggTree, t2: AggTree, coalition: Sequence[int]) -> list[Violation]:
    """Partials a coalition can reconstruct from the tree structure alone."""
    return _inference_violations(_structural_messages(t1, t2), coalition, t1.q)


def audit_transcript(
    t: AggregationTranscript,
    partials: Sequence[float],
    coalitions: Sequence[Sequence[int]] | None = None,
    tol: float = 1e-12,
) -> AuditReport:
    """Flag payloads equal to a bare partial and partials a receiver (or a
    colluding group, if ``coalitions`` is given) can reconstruct."""
    q = len(partials)
    report = AuditReport(aggregations=1)
    for m in t.messages:
        if m.phase is not Phase.MASKED:
            continue
        for j, p in enumerate(partials):
            if abs(m.payload - p) <= tol * (1.0 + abs(p)):
                report.violations.append(
                    Violation("bare-partial", j, (m.receiver,), f"message {m.sender}->{m.receiver} payload={m.payload!r}")
                )
                break
    groups = [[p] for p in range(q)] if coalitions is None else [list(c) for c in coalitions]
    for g in groups:
        report.violations.extend(_inference_violations(t.messages, g, q))
    return report


def collusion_pairs(q: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(q), 2))
