"""Lowering from the annotated dataflow graph to an explicit tree of loops.

Nodes are visited topologically; each walks its loop order and reuses an
already-open loop when (and only when) all of the following hold at the same
nesting position:

  * the loop is labelled by the same dimension,
  * the dimension is not staged by this node or by an input whose leaf sits
    under that loop,
  * no input whose leaf sits under that loop reduces over the dimension
    (its value is only complete once the loop finishes),
  * for view nodes, the dimension is only used identically (coefficient 1,
    offset 0) to index the producer.

Everything else opens fresh loops under the deepest reused ancestor, which is
what makes reductions duplicate loops and staging grow intermediates.
Allocation sizes follow from sharing: an output dimension whose loop is shared
with every consumer contributes 1, anything else contributes its extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .ir import DFG, Arith, Node, Read, Var, View, Write, validate


class InvalidGraph(Exception):
    pass


class NoConsumer(Exception):
    pass


@dataclass(eq=False)
class Loop:
    var: Var
    children: list[Union["Loop", "Leaf"]] = field(default_factory=list)
    parent: Optional["Loop"] = None

    @property
    def extent(self) -> int:
        return self.var.size

    @property
    def tail(self) -> int:
        return self.var.tail

    def path(self) -> list["Loop"]:
        out: list[Loop] = []
        n: Optional[Loop] = self
        while n is not None:
            out.append(n)
            n = n.parent
        return out[::-1]


@dataclass(eq=False)
class Leaf:
    node_id: int
    kind: str  # "compute" for arithmetic, "copy" for read/write/view
    parent: Optional[Loop] = None

    def path(self) -> list[Loop]:
        return self.parent.path() if self.parent is not None else []


@dataclass(eq=False)
class Alloc:
    """Materialization decision for one node's output buffer."""

    size: int                      # padded element count
    scope: Optional[Loop]          # deepest loop shared with all consumers
    shared: set[int]               # id()s of shared loops
    strides: dict[int, int]        # var uid -> stride within the buffer
    dim_strides: list[int]         # per-dim strides (padded row-major)
    dim_addressable: bool          # True when a view consumer indexes by dims


class LoopTree:
    def __init__(self, dfg: DFG) -> None:
        self.dfg = dfg
        self.roots: list[Union[Loop, Leaf]] = []
        self.leaf_of: dict[int, Leaf] = {}
        self.alloc: dict[int, Alloc] = {}

    def loops(self) -> list[Loop]:
        out: list[Loop] = []

        def walk(n):
            if isinstance(n, Loop):
                out.append(n)
                for c in n.children:
                    walk(c)

        for r in self.roots:
            walk(r)
        return out


def _identity_use_only(node: Node, base: Var) -> bool:
    """True if a view node only uses `base` with coefficient 1 / offset 0 /
    single term, i.e. sharing the loop reads exactly the produced block."""
    k = node.kind
    assert isinstance(k, View)
    for c in k.constraints:
        uses = [coeff for v, coeff in c.terms if v is base]
        if not uses:
            continue
        if len(c.terms) > 1 or c.offset != 0 or uses[0] != 1:
            return False
    return True


def lower(dfg: DFG) -> LoopTree:
    """Deterministic lowering with maximal legal loop reuse."""
    problems = validate(dfg)
    if problems:
        raise InvalidGraph(str(problems))

    tree = LoopTree(dfg)
    ref: Optional[Loop] = None  # current innermost loop

    for nid in dfg.topo_order():
        node = dfg[nid]
        order = node.order
        path = ref.path() if ref is not None else []

        shared = 0
        for pos, v in enumerate(order):
            if pos >= len(path) or path[pos].var is not v:
                break
            if v in node.staged:
                break
            conflict = False
            for pid in node.inputs:
                pleaf = tree.leaf_of[pid]
                if path[pos] not in pleaf.path():
                    continue
                producer = dfg[pid]
                base = v.root
                if base in dfg.reduction_dims(producer):
                    conflict = True
                if v in producer.staged:
                    conflict = True
                if isinstance(node.kind, View) and not isinstance(producer.kind, Read):
                    if not _identity_use_only(node, base):
                        conflict = True
            if conflict:
                break
            shared = pos + 1

        cur: Optional[Loop] = path[shared - 1] if shared else None
        for v in order[shared:]:
            loop = Loop(v, parent=cur)
            if cur is None:
                tree.roots.append(loop)
            else:
                cur.children.append(loop)
            cur = loop

        leaf = Leaf(nid, "compute" if isinstance(node.kind, Arith) else "copy",
                    parent=cur)
        if cur is None:
            tree.roots.append(leaf)
        else:
            cur.children.append(leaf)
        tree.leaf_of[nid] = leaf
        ref = cur if cur is not None else ref

    _compute_allocations(tree)
    return tree


def _compute_allocations(tree: LoopTree) -> None:
    dfg = tree.dfg
    for nid, node in dfg.nodes.items():
        if isinstance(node.kind, Write):
            continue
        consumers = dfg.consumers(nid)
        leaf = tree.leaf_of[nid]
        mine = leaf.path()
        shared: set[int] = set()
        common = set(id(l) for l in mine)
        for c in consumers:
            cpath = set(id(l) for l in tree.leaf_of[c.id].path())
            common &= cpath
        if consumers:
            shared = common
        dim_addressable = any(isinstance(c.kind, View) for c in consumers)

        scope: Optional[Loop] = None
        for l in mine:
            if id(l) in shared:
                scope = l

        loop_by_var = {l.var.uid: l for l in mine}
        size = 1
        strides: dict[int, int] = {}
        dim_strides: list[int] = []
        for d in reversed(node.output.dims):
            dim_stride = size
            # expansion leaves sorted by recomposition coefficient, inner first
            leaves = sorted(dfg.expansion(d), key=lambda t: t[1])
            if dim_addressable:
                # coordinate addressing: a view consumer indexes this buffer by
                # the recomposed dimension value, so strides must equal the
                # recomposition coefficients (no tail padding compaction)
                for v, coeff in leaves:
                    strides[v.uid] = coeff * dim_stride
                size *= d.size
            else:
                for v, _coeff in leaves:
                    loop = loop_by_var.get(v.uid)
                    if loop is not None and id(loop) in shared:
                        continue
                    strides[v.uid] = size
                    size *= v.size
            dim_strides.append(dim_stride)
        dim_strides.reverse()
        node.output.materialized_size = size
        tree.alloc[nid] = Alloc(size, scope, shared, strides, dim_strides,
                                dim_addressable)


def alloc_size(node: Node, tree: LoopTree) -> int:
    """Element count the node's output materializes to under this tree."""
    if isinstance(node.kind, Write):
        raise NoConsumer(f"write node {node.id} has no materialized output")
    return tree.alloc[node.id].size


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _leaf_text(dfg: DFG, tree: LoopTree, leaf: Leaf) -> str:
    node = dfg[leaf.node_id]
    k = node.kind
    buf = node.output
    dims = ", ".join(d.name for d in buf.dims)
    if isinstance(k, Read):
        body = f"%{buf.name}[{dims}] = read({k.slot})"
    elif isinstance(k, Write):
        src = dfg[node.inputs[0]].output
        return f"write({k.slot}) = %{src.name}"
    elif isinstance(k, View):
        src = dfg[node.inputs[0]].output
        body = f"%{buf.name}[{dims}] = view(%{src.name})"
    else:
        args = ", ".join(f"%{dfg[i].output.name}" for i in node.inputs)
        expr = f"{k.op}({args})"
        if k.post != "identity":
            expr = f"{k.post}({expr})"
        body = f"%{buf.name}[{dims}] = {expr}"
    alloc = tree.alloc.get(leaf.node_id)
    if alloc is not None:
        body += f" | alloc {alloc.size}"
    return body


def render_text(tree: LoopTree) -> str:
    lines: list[str] = []

    def walk(n, depth: int) -> None:
        pad = "  " * depth
        if isinstance(n, Loop):
            tail = f" [tail {n.tail}]" if n.tail else ""
            lines.append(f"{pad}for {n.var.name} in {n.extent}{tail}:")
            for c in n.children:
                walk(c, depth + 1)
        else:
            lines.append(pad + _leaf_text(tree.dfg, tree, n))

    for r in tree.roots:
        walk(r, 0)
    return "\n".join(lines) + "\n"


def tree_to_json(tree: LoopTree) -> list:
    def walk(n):
        if isinstance(n, Loop):
            return {"loop": n.var.name, "extent": n.extent, "tail": n.tail,
                    "children": [walk(c) for c in n.children]}
        node = tree.dfg[n.node_id]
        alloc = tree.alloc.get(n.node_id)
        return {"leaf": n.node_id, "kind": n.kind,
                "name": node.output.name,
                "alloc": alloc.size if alloc else None}

    return [walk(r) for r in tree.roots]
