"""Core graph representation: symbolic dimensions, virtual buffers, and the
annotated dataflow graph that every other layer operates on.

The graph is deliberately small: three families of nodes (reads/writes against
external memory slots, arithmetic over virtual buffers, affine views) plus two
per-node annotations that make up the schedule -- a loop-order permutation and
a set of staged dimensions.  Illegal schedules are unrepresentable: the only
mutators (in `loopsmith.schedule`) check permutations and dimension membership
before touching a node.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union


class CycleError(Exception):
    """The graph contains a dependency cycle."""


class UnknownVar(Exception):
    """A dimension was referenced that the node/graph does not iterate."""


class SizeError(Exception):
    """A dimension extent outside [1, inf)."""


# --------------------------------------------------------------------------
# Symbolic dimensions
# --------------------------------------------------------------------------

_var_ids = itertools.count()


@dataclass(eq=False)
class SplitOrigin:
    parent: "Var"
    factor: int
    part: str  # "outer" | "inner"


@dataclass(eq=False)
class Var:
    """A named symbolic dimension with a fixed integer extent.

    Identity is by object (two vars may share a name); `uid` exists for
    serialization and stable ordering.  Vars produced by splitting record
    their lineage upward so iteration indices can be recomposed and tail
    iterations detected; the downward outer/inner map lives on the graph.
    """

    name: str
    size: int
    origin: Optional[SplitOrigin] = None
    uid: int = field(default_factory=lambda: next(_var_ids))

    def __post_init__(self) -> None:
        if self.size < 1:
            raise SizeError(f"var {self.name!r} must have extent >= 1, got {self.size}")

    def __repr__(self) -> str:
        return f"Var({self.name}:{self.size})"

    @property
    def root(self) -> "Var":
        v = self
        while v.origin is not None:
            v = v.origin.parent
        return v

    @property
    def tail(self) -> int:
        """Remainder trip of the final outer iteration when this var is the
        inner part of a split that does not divide evenly; 0 otherwise."""
        if self.origin is None or self.origin.part != "inner":
            return 0
        return self.origin.parent.size % self.origin.factor


@dataclass(eq=False)
class AffineExpr:
    """sum(coeff * var) + offset, used to index a tensor dimension."""

    terms: tuple[tuple[Var, int], ...]
    offset: int = 0

    def _merged(self, other: "AffineExpr") -> "AffineExpr":
        acc: dict[int, list] = {}
        for v, c in self.terms + other.terms:
            if v.uid in acc:
                acc[v.uid][1] += c
            else:
                acc[v.uid] = [v, c]
        terms = tuple((v, c) for v, c in acc.values() if c != 0)
        return AffineExpr(terms, self.offset + other.offset)

    def __add__(self, other):
        if isinstance(other, int):
            return AffineExpr(self.terms, self.offset + other)
        if isinstance(other, Var):
            other = AffineExpr(((other, 1),))
        if isinstance(other, AffineExpr):
            return self._merged(other)
        return NotImplemented

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, int):
            return self + (-other)
        return NotImplemented

    def __mul__(self, k):
        if isinstance(k, int):
            return AffineExpr(tuple((v, c * k) for v, c in self.terms), self.offset * k)
        return NotImplemented

    __rmul__ = __mul__

    def __repr__(self) -> str:
        parts = [f"{c}*{v.name}" if c != 1 else v.name for v, c in self.terms]
        if self.offset or not parts:
            parts.append(str(self.offset))
        return " + ".join(parts)


def _var_add(self, other):
    return AffineExpr(((self, 1),)) + other


def _var_sub(self, other):
    return AffineExpr(((self, 1),)) - other


def _var_mul(self, k):
    return AffineExpr(((self, 1),)) * k


Var.__add__ = _var_add  # type: ignore[assignment]
Var.__radd__ = _var_add  # type: ignore[assignment]
Var.__sub__ = _var_sub  # type: ignore[assignment]
Var.__mul__ = _var_mul  # type: ignore[assignment]
Var.__rmul__ = _var_mul  # type: ignore[assignment]


# --------------------------------------------------------------------------
# Buffers and node payloads
# --------------------------------------------------------------------------

@dataclass(eq=False)
class VirtualBuffer:
    """Output value of a node. `dims` are the dimensions in row-major order;
    `materialized_size` is filled in by lowering."""

    name: str
    dims: tuple[Var, ...]
    dtype: str = "f32"
    materialized_size: Optional[int] = None

    def __repr__(self) -> str:
        return f"%{self.name}[{', '.join(d.name for d in self.dims)}]"


@dataclass(eq=False)
class Read:
    slot: int


@dataclass(eq=False)
class Write:
    slot: int


#: elementwise pre/post operations supported natively
ELEMENTWISE_OPS = ("identity", "relu", "sigmoid")

#: combining/reduction operators and their identities
OP_IDENTITY = {"add": 0.0, "mul": 1.0, "max": float("-inf"), "min": float("inf")}

#: node op -> (pointwise combine over inputs, implicit reduction)
OP_SEMANTICS = {
    "add": ("add", "add"),
    "mul": ("mul", "mul"),
    "max": ("max", "max"),
    "min": ("min", "min"),
    "fma": ("mul", "add"),
}


@dataclass(eq=False)
class Arith:
    """Pointwise combine of the inputs followed by an implicit reduction over
    every dimension absent from the output.

    Per output point, with reduction space R:

        acc = alpha * pre(c_in)                  if alpha != 0
              identity(reduce_op)                otherwise
        acc = reduce(acc, beta * combine(inputs))   over all points of R
        out = post(acc)

    `c_in` is the prior contents of the external slot this node feeds, so a
    nonzero alpha is only meaningful on nodes consumed by a write.
    """

    op: str  # add | mul | max | min | fma
    pre: str = "identity"
    post: str = "identity"
    alpha: float = 0.0
    beta: float = 1.0

    @property
    def combine_op(self) -> str:
        return OP_SEMANTICS[self.op][0]

    @property
    def reduce_op(self) -> str:
        return OP_SEMANTICS[self.op][1]


@dataclass(eq=False)
class IndexConstraint:
    """input index = sum(coeff * iter(var)) + offset."""

    input_dim: Var
    terms: tuple[tuple[Var, int], ...]
    offset: int = 0


@dataclass(eq=False)
class View:
    """Affine re-indexing of a single input.

    When `guarded`, out-of-range input indices contribute `oob` (set by the
    frontend to the identity of the consuming reduction) instead of being a
    construction-time error.
    """

    constraints: tuple[IndexConstraint, ...]
    guarded: bool = False
    oob: float = 0.0


Kind = Union[Read, Write, Arith, View]


@dataclass(eq=False)
class Node:
    id: int
    kind: Kind
    inputs: tuple[int, ...]
    output: VirtualBuffer
    order: list[Var] = field(default_factory=list)
    staged: set[Var] = field(default_factory=set)

    def __repr__(self) -> str:
        return f"<node {self.id} {type(self.kind).__name__.lower()} {self.output}>"


# --------------------------------------------------------------------------
# The graph
# --------------------------------------------------------------------------

class DFG:
    """Annotated dataflow graph: a node table plus the split registry that
    maps each split dimension to its (outer, inner) children."""

    def __init__(self) -> None:
        self.nodes: dict[int, Node] = {}
        self.splits: dict[int, tuple[Var, Var]] = {}  # var uid -> children
        self._next = 0

    def add(self, kind: Kind, inputs: Iterable[int], output: VirtualBuffer,
            order: Optional[list[Var]] = None) -> Node:
        nid = self._next
        self._next += 1
        node = Node(nid, kind, tuple(inputs), output)
        node.order = list(order) if order is not None else self.default_order(node)
        self.nodes[nid] = node
        return node

    def __getitem__(self, nid: int) -> Node:
        return self.nodes[nid]

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes.values())

    def consumers(self, nid: int) -> list[Node]:
        return [n for n in self.nodes.values() if nid in n.inputs]

    # ---- dimension bookkeeping -------------------------------------------

    def expansion(self, var: Var) -> list[tuple[Var, int]]:
        """Leaf split vars of `var` with their recomposition coefficients:
        iter(var) == sum(coeff * iter(leaf))."""
        out: list[tuple[Var, int]] = []

        def walk(v: Var, coeff: int) -> None:
            kids = self.splits.get(v.uid)
            if kids is None:
                out.append((v, coeff))
                return
            outer, inner = kids
            walk(outer, coeff * inner.size)
            walk(inner, coeff)

        walk(var, 1)
        return out

    def padded_extent(self, var: Var) -> int:
        """Product of leaf extents; >= var.size when a split has a tail."""
        total = 1
        for v, _ in self.expansion(var):
            total *= v.size
        return total

    def reduction_dims(self, node: Node) -> list[Var]:
        """Dimensions combined away by this node: present on an input buffer
        but absent from the output. Only arithmetic nodes reduce."""
        if not isinstance(node.kind, Arith):
            return []
        out = set(node.output.dims)
        red: list[Var] = []
        for nid in node.inputs:
            for d in self.nodes[nid].output.dims:
                if d not in out and d not in red:
                    red.append(d)
        return red

    def iteration_dims(self, node: Node) -> list[Var]:
        return list(node.output.dims) + self.reduction_dims(node)

    def order_universe(self, node: Node) -> list[Var]:
        """The split-level vars this node's order must be a permutation of."""
        out: list[Var] = []
        for base in self.iteration_dims(node):
            out.extend(v for v, _ in self.expansion(base))
        return out

    def default_order(self, node: Node) -> list[Var]:
        return self.order_universe(node)

    # ---- traversal ---------------------------------------------------------

    def topo_order(self) -> list[int]:
        """Kahn's algorithm; the ready set is a min-heap on node id so the
        result is a pure function of the graph shape."""
        indeg = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        consumers: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for nid, n in self.nodes.items():
            for i in n.inputs:
                consumers[i].append(nid)
        ready = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        out: list[int] = []
        while ready:
            nid = heapq.heappop(ready)
            out.append(nid)
            for c in consumers[nid]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(out) != len(self.nodes):
            raise CycleError("dataflow graph has a cycle")
        return out

    # ---- copying -----------------------------------------------------------

    def clone(self) -> "DFG":
        """Deep copy with fresh Var/buffer/node objects (uids preserved), so
        schedule mutations on the copy never leak into the original."""
        vmap: dict[int, Var] = {}

        def cv(v: Var) -> Var:
            got = vmap.get(v.uid)
            if got is not None:
                return got
            origin = None
            if v.origin is not None:
                origin = SplitOrigin(cv(v.origin.parent), v.origin.factor, v.origin.part)
            nv = Var(v.name, v.size, origin, uid=v.uid)
            vmap[v.uid] = nv
            return nv

        out = DFG()
        out._next = self._next
        for uid, (o, i) in self.splits.items():
            out.splits[uid] = (cv(o), cv(i))
        for nid, n in self.nodes.items():
            buf = VirtualBuffer(n.output.name, tuple(cv(d) for d in n.output.dims),
                                n.output.dtype, n.output.materialized_size)
            k = n.kind
            if isinstance(k, Read):
                nk: Kind = Read(k.slot)
            elif isinstance(k, Write):
                nk = Write(k.slot)
            elif isinstance(k, Arith):
                nk = Arith(k.op, k.pre, k.post, k.alpha, k.beta)
            else:
                nk = View(tuple(IndexConstraint(cv(c.input_dim),
                                                tuple((cv(v), co) for v, co in c.terms),
                                                c.offset) for c in k.constraints),
                          k.guarded, k.oob)
            copy = Node(nid, nk, n.inputs, buf,
                        [cv(v) for v in n.order], {cv(v) for v in n.staged})
            out.nodes[nid] = copy
        return out


def topo_order(dfg: DFG) -> list[int]:
    return dfg.topo_order()


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

@dataclass
class Violation:
    node: Optional[int]
    rule: str
    detail: str = ""

    def __repr__(self) -> str:
        where = f"node {self.node}" if self.node is not None else "graph"
        return f"{self.rule}({where}{': ' + self.detail if self.detail else ''})"


def validate(dfg: DFG) -> list[Violation]:
    """Structural check of every representation invariant. Violations are
    data, not exceptions: an empty list means the graph lowers cleanly."""
    out: list[Violation] = []

    try:
        dfg.topo_order()
    except CycleError:
        out.append(Violation(None, "cyclic"))
        return out

    for nid, node in dfg.nodes.items():
        k = node.kind
        if isinstance(k, Read) and node.inputs:
            out.append(Violation(nid, "read-has-inputs"))
        if isinstance(k, Write):
            if len(node.inputs) != 1:
                out.append(Violation(nid, "write-arity", f"{len(node.inputs)} inputs"))
            if dfg.consumers(nid):
                out.append(Violation(nid, "write-has-consumers"))
        if not isinstance(k, Write) and not dfg.consumers(nid):
            out.append(Violation(nid, "dangling", "no consumer and not a write"))

        for d in list(node.output.dims) + node.order:
            if d.size < 1:
                out.append(Violation(nid, "bad-extent", d.name))
            o = d.origin
            if o is not None:
                want = o.factor if o.part == "inner" else -(-o.parent.size // o.factor)
                if d.size != want:
                    out.append(Violation(nid, "split-extent", d.name))
            seen = set()
            w = d
            while w.origin is not None:
                if w.uid in seen:
                    out.append(Violation(nid, "split-cycle", d.name))
                    break
                seen.add(w.uid)
                w = w.origin.parent

        universe = dfg.order_universe(node)
        if sorted(v.uid for v in node.order) != sorted(v.uid for v in universe):
            out.append(Violation(nid, "order-not-permutation",
                                 f"order={[v.name for v in node.order]}"))
        if not node.staged <= set(node.order):
            out.append(Violation(nid, "staged-not-in-order"))

        ms = node.output.materialized_size
        if ms is not None:
            cap = 1
            for d in node.output.dims:
                cap *= dfg.padded_extent(d)
            if not 1 <= ms <= cap:
                out.append(Violation(nid, "bad-materialized-size", str(ms)))

        if isinstance(k, View):
            if len(node.inputs) != 1:
                out.append(Violation(nid, "view-arity"))
            else:
                in_dims = set(dfg.nodes[node.inputs[0]].output.dims)
                constrained = {c.input_dim for c in k.constraints}
                if constrained != in_dims:
                    out.append(Violation(nid, "view-unconstrained-input-dim"))
                outs = set(node.output.dims)
                for c in k.constraints:
                    for v, coeff in c.terms:
                        if v not in outs:
                            out.append(Violation(nid, "view-term-not-output-dim", v.name))
                    if not k.guarded:
                        lo = c.offset + sum(min(coeff * (v.size - 1), 0) for v, coeff in c.terms)
                        hi = c.offset + sum(max(coeff * (v.size - 1), 0) for v, coeff in c.terms)
                        if lo < 0 or hi >= c.input_dim.size:
                            out.append(Violation(nid, "view-out-of-range",
                                                 f"{c.input_dim.name} in [{lo},{hi}]"))

        if isinstance(k, Arith):
            if k.op not in OP_SEMANTICS:
                out.append(Violation(nid, "unknown-op", k.op))
            if k.op == "fma" and len(node.inputs) != 2:
                out.append(Violation(nid, "fma-arity"))
            for e in (k.pre, k.post):
                if e not in ELEMENTWISE_OPS:
                    out.append(Violation(nid, "unknown-elementwise-op", e))

    return out
