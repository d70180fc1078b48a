"""Declarative construction of generalized contractions.

A `GraphBuilder` accumulates tensor statements written in index notation and
emits a valid dataflow graph:

    g = GraphBuilder()
    m, k, n = g.var("m", 64), g.var("k", 64), g.var("n", 64)
    a, b = g.input("a", [m, k]), g.input("b", [k, n])
    c = g.contract("c", (m, n), a[m, k] * b[k, n])
    g.output(c)
    dfg = g.build()

Index slots accept bare dimensions or affine combinations of them (windows,
strides, shifts); any dimension appearing on the right but not on the left is
implicitly reduced with the contraction's reduce operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .ir import (DFG, AffineExpr, Arith, IndexConstraint, Node, OP_IDENTITY,
                 Read, SizeError, Var, View, VirtualBuffer, Write, validate)


class IncompatibleDims(Exception):
    """A dimension was used where its extent cannot fit."""


class BuildError(Exception):
    pass


Index = Union[Var, AffineExpr]


def _as_affine(idx: Index) -> AffineExpr:
    if isinstance(idx, Var):
        return AffineExpr(((idx, 1),))
    if isinstance(idx, AffineExpr):
        return idx
    raise BuildError(f"index must be a Var or affine expression, got {idx!r}")


@dataclass(eq=False)
class Tensor:
    """Handle to a named value: either an external input or the result of a
    contraction. Indexing produces a `TensorExpr` usable in statements."""

    builder: "GraphBuilder"
    name: str
    dims: tuple[Var, ...]
    node: Node  # producing node in the graph

    def __getitem__(self, idx) -> "TensorExpr":
        if not isinstance(idx, tuple):
            idx = (idx,)
        if len(idx) != len(self.dims):
            raise IncompatibleDims(
                f"{self.name} has {len(self.dims)} dims, indexed with {len(idx)}")
        return TensorExpr(self, tuple(idx))

    def __repr__(self) -> str:
        return f"Tensor({self.name}[{', '.join(d.name for d in self.dims)}])"


@dataclass(eq=False)
class TensorExpr:
    """A tensor with an index list, combinable with * and + into operand
    trees. Products/sums decompose left-associatively into binary nodes."""

    tensor: Tensor
    idx: tuple[Index, ...]

    def __mul__(self, other):
        return OpExpr("mul", self, other)

    def __add__(self, other):
        return OpExpr("add", self, other)

    def vars(self) -> list[Var]:
        out: list[Var] = []
        for i in self.idx:
            for v, _ in _as_affine(i).terms:
                if v not in out:
                    out.append(v)
        return out


@dataclass(eq=False)
class OpExpr:
    op: str
    lhs: Union[TensorExpr, "OpExpr"]
    rhs: Union[TensorExpr, "OpExpr"]

    def __mul__(self, other):
        return OpExpr("mul", self, other)

    def __add__(self, other):
        return OpExpr("add", self, other)


Expr = Union[TensorExpr, OpExpr]


def define_var(name: str, size: int) -> Var:
    """Fresh named dimension; extent must be at least 1."""
    if size < 1:
        raise SizeError(f"dimension {name!r} must have extent >= 1")
    return Var(name, size)


class GraphBuilder:
    def __init__(self) -> None:
        self.dfg = DFG()
        self._slots = 0
        self._fresh: set[int] = set()  # nodes created by the current statement

    # ---- declarations ------------------------------------------------------

    def var(self, name: str, size: int) -> Var:
        return define_var(name, size)

    def input(self, name: str, dims: Sequence[Var]) -> Tensor:
        slot = self._slots
        self._slots += 1
        buf = VirtualBuffer(name, tuple(dims))
        node = self.dfg.add(Read(slot), (), buf)
        return Tensor(self, name, tuple(dims), node)

    def output(self, tensor: Tensor, dims: Optional[Sequence[Var]] = None) -> int:
        """Bind `tensor` to an external slot. `dims` sets the stored layout
        (row-major); defaults to the tensor's own dimension order."""
        layout = tuple(dims) if dims is not None else tensor.dims
        if set(layout) != set(tensor.dims):
            raise IncompatibleDims(f"output layout must cover dims of {tensor.name}")
        slot = self._slots
        self._slots += 1
        buf = VirtualBuffer(f"{tensor.name}_out", layout)
        self.dfg.add(Write(slot), (tensor.node.id,), buf)
        return slot

    # ---- statements --------------------------------------------------------

    def contract(self, name: str, out_dims: Sequence[Var], rhs: Expr,
                 op_pair: tuple[str, str] = ("add", "mul"),
                 pre: str = "identity", post: str = "identity",
                 alpha: float = 0.0, beta: float = 1.0) -> Tensor:
        """Generalized contraction: combine the right-hand side pointwise,
        reduce every dimension absent from `out_dims` with op_pair[0], then
        apply the alpha/beta/pre/post extension."""
        reduce_op = op_pair[0]
        self._fresh.clear()
        operand = self._emit_expr(rhs)
        operand_dims = list(self.dfg[operand].output.dims)
        out_dims = tuple(out_dims)
        red = [d for d in operand_dims if d not in out_dims]

        plain = (not red and alpha == 0.0 and beta == 1.0
                 and pre == "identity" and post == "identity")
        if plain and set(operand_dims) == set(out_dims):
            node = self.dfg[operand]
            if operand in self._fresh and isinstance(node.kind, (Arith, View)):
                # reuse the statement's top node as the result, fixing layout
                node.output.name = name
                node.output.dims = out_dims
                node.order = self.dfg.default_order(node)
                return Tensor(self, name, out_dims, node)
            if not isinstance(node.kind, Arith):
                # pure copy: identity contraction realizes at the write
                return Tensor(self, name, out_dims, node)

        buf = VirtualBuffer(name, out_dims)
        node = self.dfg.add(Arith(reduce_op, pre, post, alpha, beta), (operand,), buf)
        return Tensor(self, name, out_dims, node)

    def concat(self, name: str, parts: Sequence[TensorExpr], dim: Var) -> Tensor:
        """Concatenate `parts` along `dim`. Each part becomes a guarded view
        shifted by the running offset; the views sum into the result."""
        if not parts:
            raise BuildError("concat needs at least one part")
        self._fresh.clear()
        rank = len(parts[0].idx)
        if any(len(p.idx) != rank for p in parts):
            raise IncompatibleDims("concat parts must have equal rank")
        cat_pos = None
        for pos in range(rank):
            if all(isinstance(p.idx[pos], Var) for p in parts):
                differs = any(p.idx[pos] is not parts[0].idx[pos] for p in parts)
                total = sum(p.idx[pos].size for p in parts)  # type: ignore[union-attr]
                if (differs or len(parts) == 1) and total == dim.size:
                    cat_pos = pos
                    break
        if cat_pos is None:
            raise IncompatibleDims(
                f"no index position sums to |{dim.name}| = {dim.size}")

        offset = 0
        pieces: list[int] = []
        for p in parts:
            part_var: Var = p.idx[cat_pos]  # type: ignore[assignment]
            idx = list(p.idx)
            idx[cat_pos] = (dim - offset) if offset else _as_affine(dim)
            view = self._emit_view(p.tensor, tuple(idx), guarded=True,
                                   oob=OP_IDENTITY["add"])
            pieces.append(view)
            offset += part_var.size
        out = pieces[0]
        for nid in pieces[1:]:
            out = self._combine("add", out, nid)
        node = self.dfg[out]
        node.output.name = name
        return Tensor(self, name, node.output.dims, node)

    def build(self) -> DFG:
        problems = validate(self.dfg)
        if problems:
            raise BuildError(f"invalid graph: {problems}")
        return self.dfg

    # ---- emission ----------------------------------------------------------

    def _emit_expr(self, expr: Expr) -> int:
        if isinstance(expr, TensorExpr):
            return self._emit_operand(expr)
        if isinstance(expr, OpExpr):
            lhs = self._emit_expr(expr.lhs)
            rhs = self._emit_expr(expr.rhs)
            return self._combine(expr.op, lhs, rhs)
        raise BuildError(f"cannot emit {expr!r}")

    def _combine(self, op: str, lhs: int, rhs: int) -> int:
        ldims = list(self.dfg[lhs].output.dims)
        rdims = [d for d in self.dfg[rhs].output.dims if d not in ldims]
        buf = VirtualBuffer(self._fresh_name(), tuple(ldims + rdims))
        node = self.dfg.add(Arith(op), (lhs, rhs), buf)
        self._fresh.add(node.id)
        return node.id

    def _emit_operand(self, expr: TensorExpr) -> int:
        tensor, idx = expr.tensor, expr.idx
        bare = all(isinstance(i, Var) and i is tensor.dims[pos]
                   for pos, i in enumerate(idx))
        if bare:
            return tensor.node.id
        return self._emit_view(tensor, idx, guarded=False, oob=0.0)

    def _emit_view(self, tensor: Tensor, idx: tuple[Index, ...],
                   guarded: bool, oob: float) -> int:
        constraints = []
        out_dims: list[Var] = []
        for pos, i in enumerate(idx):
            aff = _as_affine(i)
            if len(aff.terms) > 2:
                raise BuildError("at most 2 terms per index constraint")
            if any(c < 0 for _, c in aff.terms):
                raise BuildError("index coefficients must be non-negative")
            in_dim = tensor.dims[pos]
            if not guarded:
                lo = aff.offset
                hi = aff.offset + sum(c * (v.size - 1) for v, c in aff.terms)
                if lo < 0 or hi >= in_dim.size:
                    raise IncompatibleDims(
                        f"index {aff!r} reaches [{lo}, {hi}] outside "
                        f"{in_dim.name}:{in_dim.size}")
            constraints.append(IndexConstraint(in_dim, aff.terms, aff.offset))
            for v, _ in aff.terms:
                if v not in out_dims:
                    out_dims.append(v)
        buf = VirtualBuffer(self._fresh_name(), tuple(out_dims))
        node = self.dfg.add(View(tuple(constraints), guarded, oob),
                            (tensor.node.id,), buf)
        self._fresh.add(node.id)
        return node.id

    def _fresh_name(self) -> str:
        return f"t{len(self.dfg.nodes)}"


# ---- convenience constructors ----------------------------------------------

def matmul_graph(m: int, k: int, n: int,
                 alpha: float = 0.0, beta: float = 1.0) -> DFG:
    """C[m,n] = alpha*C_in + beta * sum_k A[m,k]*B[k,n], the canonical
    two-node (multiply then reduce-add) form."""
    g = GraphBuilder()
    vm, vk, vn = g.var("m", m), g.var("k", k), g.var("n", n)
    a = g.input("a", [vm, vk])
    b = g.input("b", [vk, vn])
    c = g.contract("c", (vm, vn), a[vm, vk] * b[vk, vn],
                   alpha=alpha, beta=beta)
    g.output(c)
    return g.build()
