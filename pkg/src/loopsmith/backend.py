"""Compile a loop tree into a kernel program for a target.

Decision order, mirrored in the emission pipeline:

  * addresses: every access is an affine expression over loop iterators.
    Fully-shared reads and views are elided (consumers address the source
    directly); everything else gets a scratch buffer sized by lowering.
  * vectorization: the innermost loop of a body vectorizes when every access
    is unit-stride or iteration-invariant and unguarded; otherwise the body
    falls back to scalar instructions (there is no gather path).
  * register blocking: for every accumulating leaf, pick the outermost loop
    under which the touched output subset still fits in the register file.
    The output tile is fully unrolled; accumulators never touch memory
    between region entry and exit (the no-spill contract).
  * tails: uneven splits peel the controlling loop's final iteration into a
    specialized epilogue; where peeling cannot make a trip static the loop
    gets a runtime clamp and is excluded from vectorization and unrolling.
  * unrolling proceeds from the innermost loop outward while the emitted
    instruction count stays within the unroll limit.

Compiling the same tree twice yields byte-identical instruction streams.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import vm
from .feedback import ShapeMismatch, bytes_moved, count_flops
from .ir import DFG, Arith, Node, OP_IDENTITY, Read, Var, View, Write
from .lowering import Leaf, Loop, LoopTree
from .program import (Address, BufferInfo, COUNTERS, DynTrip, Guard, Instr,
                      KernelProgram, MEM_COUNTERS, RegionInfo)
from .targets import TargetDescriptor


class BlockTooLarge(Exception):
    """The kernel cannot be expressed without spilling registers."""


class HasReduction(Exception):
    pass


_TEMP_CAP = 8  # low registers reserved for operands and forwarded values


# --------------------------------------------------------------------------
# symbolic accesses (affine over var uids, folded to slots at emission)
# --------------------------------------------------------------------------

@dataclass
class SymGuard:
    const: int
    terms: dict[int, int]
    size: int


@dataclass
class SymAccess:
    buf: int
    const: int
    terms: dict[int, int]  # var uid -> coefficient
    guards: list[SymGuard] = field(default_factory=list)
    fill: float = 0.0

    def coeff(self, uid: int) -> int:
        return self.terms.get(uid, 0)

    def guarded(self) -> bool:
        return bool(self.guards)


def _add_term(terms: dict[int, int], uid: int, coeff: int) -> None:
    if coeff == 0:
        return
    new = terms.get(uid, 0) + coeff
    if new:
        terms[uid] = new
    else:
        terms.pop(uid, None)


# --------------------------------------------------------------------------
# compiled artifact + execution
# --------------------------------------------------------------------------

@dataclass
class CompiledKernel:
    program: KernelProgram
    target: TargetDescriptor
    slot_shapes: dict[int, tuple[int, ...]]
    input_slots: set[int]
    output_slots: set[int]
    scratch_bytes: int
    compile_ms: float
    flops: int
    dfg_bytes_moved: int
    unrolled_spans: list[tuple[int, int]] = field(default_factory=list)
    unroll_limit: int = 0
    counters: dict[str, int] = field(default_factory=dict)
    _encoded: object = None

    @property
    def encoded(self):
        if self._encoded is None:
            self._encoded = self.program.encode()
        return self._encoded

    def disassemble(self) -> str:
        return self.program.disassemble()

    def memory_access_count(self) -> int:
        return sum(self.counters.get(k, 0) for k in MEM_COUNTERS)


def execute(kernel: CompiledKernel, buffers: dict[int, np.ndarray]) -> None:
    """Run the kernel. `buffers` maps external slots to dense row-major
    arrays; output slots are written in place (allocated as f32 zeros when
    absent). Instruction counters reset on every execution."""
    enc = kernel.encoded
    for slot in kernel.input_slots:
        if slot not in buffers:
            raise ShapeMismatch(f"input slot {slot} missing")
    for slot, shape in kernel.slot_shapes.items():
        if slot in buffers:
            want = 1
            for s in shape:
                want *= s
            if buffers[slot].size != want:
                raise ShapeMismatch(
                    f"slot {slot}: expected {shape} ({want} elems), "
                    f"got {buffers[slot].size}")
    arena = np.zeros(enc.arena_size, np.float32)
    for b, info in enumerate(kernel.program.buffers):
        if info.slot is not None and info.slot in buffers:
            base = int(enc.buf_base[b])
            n = 1
            for s in info.shape:
                n *= s
            arena[base:base + n] = np.asarray(buffers[info.slot],
                                              np.float32).reshape(-1)
    counters = np.zeros(len(COUNTERS), np.int64)
    vm.run(enc, arena, counters)
    kernel.counters = {name: int(counters[i]) for i, name in enumerate(COUNTERS)}
    for b, info in enumerate(kernel.program.buffers):
        if info.slot is not None and info.slot in kernel.output_slots:
            base = int(enc.buf_base[b])
            n = 1
            for s in info.shape:
                n *= s
            out = arena[base:base + n]
            if info.slot in buffers:
                dst = buffers[info.slot]
                dst.reshape(-1)[:] = out.astype(dst.dtype)
            else:
                buffers[info.slot] = out.reshape(kernel.slot_shapes[info.slot]).copy()


# --------------------------------------------------------------------------
# region plan
# --------------------------------------------------------------------------

@dataclass
class _Region:
    leaf: Leaf
    root: Loop
    out_loops: list[Loop]     # output-derived loops inside, outer -> inner
    force_unroll: set[int]    # id()s of loops that must fully unroll
    mode: str                 # "vout" | "vred" | "scalar"
    direct: bool              # every reduction loop of the node is inside
    rotation: int             # accumulator registers per output unit
    accum_base: int
    n_accums: int
    elems: int                # accumulator units (vout: vectors, else elements)


class _Pool:
    """Temp register allocator for one straight-line segment with load CSE."""

    def __init__(self, cap: int):
        self.cap = cap
        self.pinned: set[int] = set()
        self.free: list[int] = list(range(cap))
        self.memo: dict[tuple, int] = {}

    def reset(self) -> None:
        """Segment boundary: forget memoized loads and reclaim temps."""
        self.free = [r for r in range(self.cap) if r not in self.pinned]
        self.memo = {}

    def housekeep(self) -> None:
        """Between body instances: reclaim unpinned, unmemoized temps but keep
        the load memo alive (cross-replica CSE)."""
        live = set(self.memo.values()) | self.pinned
        self.free = [r for r in range(self.cap) if r not in live]

    def alloc(self) -> int:
        if self.free:
            return self.free.pop(0)
        for k, r in list(self.memo.items()):
            if r not in self.pinned:
                del self.memo[k]
                return r
        raise BlockTooLarge(
            "a single iteration needs more operand registers than available")

    def release(self, r: int) -> None:
        if r < self.cap and r not in self.pinned and r not in self.free:
            # drop any memo entry that still points at this register
            for k, v in list(self.memo.items()):
                if v == r:
                    del self.memo[k]
            self.free.append(r)
            self.free.sort()

    def invalidate_buf(self, buf: int) -> None:
        for k in [k for k in self.memo if k[0] == "mem" and k[1][0] == buf]:
            r = self.memo.pop(k)


# --------------------------------------------------------------------------
# the emitter
# --------------------------------------------------------------------------

class _Emitter:
    def __init__(self, tree: LoopTree, target: TargetDescriptor,
                 unroll_limit: Optional[int], interleave: bool):
        self.tree = tree
        self.dfg = tree.dfg
        self.target = target
        self.lanes = target.lanes
        self.vregs = target.vregs
        self.limit = unroll_limit if unroll_limit is not None else target.unroll_limit
        self.interleave = interleave
        self.instrs: list[Instr] = []
        self.regions: list[RegionInfo] = []
        self.unrolled_spans: list[tuple[int, int]] = []
        self._unroll_depth = 0
        self._active_regions: list[_Region] = []
        self._pool = _Pool(_TEMP_CAP)
        self._forward: dict[int, int] = {}

        self._setup_buffers()
        self._setup_vars()
        self._compute_liveness()
        self._analyze_runs()
        self._plan_regions()
        self._plan_unroll()
        self._plan_sweeps()

    def _compute_liveness(self) -> None:
        """Subtrees whose only leaves are elided emit nothing."""
        self._live: dict[int, bool] = {}

        def walk(n) -> bool:
            if isinstance(n, Leaf):
                alive = n.node_id not in self.elided
            else:
                alive = False
                for c in n.children:
                    alive = walk(c) or alive
            self._live[id(n)] = alive
            return alive

        for r in self.tree.roots:
            walk(r)

    # ---- setup ---------------------------------------------------------------

    def _setup_buffers(self) -> None:
        self.buffers: list[BufferInfo] = []
        self.buf_of_slot: dict[int, int] = {}
        self.buf_of_node: dict[int, int] = {}
        self.elided: set[int] = set()
        self.input_slots: set[int] = set()
        self.output_slots: set[int] = set()

        for node in self.dfg:
            if isinstance(node.kind, (Read, Write)):
                slot = node.kind.slot
                shape = tuple(d.size for d in node.output.dims)
                size = 1
                for s in shape:
                    size *= s
                if slot not in self.buf_of_slot:
                    self.buf_of_slot[slot] = len(self.buffers)
                    # pad past the largest split-padded coordinate plus a
                    # vector: tail replicas of an unrolled register block may
                    # read the out-of-range coordinates (values never used)
                    max_addr = 0
                    stride = 1
                    for d in reversed(node.output.dims):
                        max_addr += stride * (self.dfg.padded_extent(d) - 1)
                        stride *= d.size
                    padded = max_addr + 1 + self.lanes
                    self.buffers.append(BufferInfo(node.output.name, padded,
                                                   slot, shape))
                if isinstance(node.kind, Read):
                    self.input_slots.add(slot)
                else:
                    self.output_slots.add(slot)

        self.scratch_bytes = 0
        for nid, alloc in self.tree.alloc.items():
            node = self.dfg[nid]
            # pure data movement with no packing intent never materializes:
            # consumers compose the affine access onto the source instead
            if isinstance(node.kind, (Read, View)) and not node.staged:
                self.elided.add(nid)
                continue
            self.buf_of_node[nid] = len(self.buffers)
            padded = alloc.size + self.lanes
            self.buffers.append(BufferInfo(node.output.name, padded, None, ()))
            self.scratch_bytes += 4 * alloc.size

    def _setup_vars(self) -> None:
        self.var_slot: dict[int, int] = {}
        self.var_names: list[str] = []
        for nid in self.dfg.topo_order():
            for v in self.dfg[nid].order:
                if v.uid not in self.var_slot:
                    self.var_slot[v.uid] = len(self.var_names)
                    self.var_names.append(v.name)

    def _syn_slot(self, name: str) -> int:
        slot = len(self.var_names)
        self.var_names.append(name)
        return slot

    # ---- addresses -----------------------------------------------------------

    def _dim_coord(self, d: Var) -> dict[int, int]:
        terms: dict[int, int] = {}
        for v, coeff in self.dfg.expansion(d):
            _add_term(terms, v.uid, coeff)
        return terms

    def _external_access(self, node: Node) -> SymAccess:
        buf = self.buf_of_slot[node.kind.slot]
        terms: dict[int, int] = {}
        stride = 1
        for d in reversed(node.output.dims):
            for uid, c in self._dim_coord(d).items():
                _add_term(terms, uid, c * stride)
            stride *= d.size
        return SymAccess(buf, 0, terms)

    def _scratch_access(self, nid: int) -> SymAccess:
        alloc = self.tree.alloc[nid]
        return SymAccess(self.buf_of_node[nid], 0, dict(alloc.strides))

    def _view_source_access(self, view: Node) -> SymAccess:
        """Source element address for the current iteration of the view's
        output dims, guarded when the view is guarded."""
        k = view.kind
        qid = view.inputs[0]
        q = self.dfg[qid]
        coords = []
        for c in k.constraints:
            terms: dict[int, int] = {}
            for v, coeff in c.terms:
                for uid, ce in self._dim_coord(v).items():
                    _add_term(terms, uid, ce * coeff)
            coords.append((terms, c.offset, c.input_dim.size))
        guards = [SymGuard(const, dict(terms), size)
                  for terms, const, size in coords] if k.guarded else []

        if qid in self.elided:
            if not isinstance(q.kind, Read):
                raise NotImplementedError("views over views are not composed")
            base = self._external_access(q)
            terms = {}
            const = 0
            stride = 1
            for (cterms, cconst, _sz), d in zip(reversed(coords),
                                                reversed(q.output.dims)):
                for uid, ce in cterms.items():
                    _add_term(terms, uid, ce * stride)
                const += cconst * stride
                stride *= d.size
            return SymAccess(base.buf, const, terms, guards, k.oob)

        alloc = self.tree.alloc[qid]
        terms = {}
        const = 0
        for (cterms, cconst, _sz), ds in zip(coords, alloc.dim_strides):
            for uid, ce in cterms.items():
                _add_term(terms, uid, ce * ds)
            const += cconst * ds
        return SymAccess(self.buf_of_node[qid], const, terms, guards, k.oob)

    def _operand_access(self, pid: int) -> SymAccess:
        p = self.dfg[pid]
        if pid in self.elided:
            if isinstance(p.kind, Read):
                return self._external_access(p)
            return self._view_source_access(p)
        return self._scratch_access(pid)

    def _cin_access(self, node: Node) -> SymAccess:
        for c in self.dfg.consumers(node.id):
            if isinstance(c.kind, Write):
                return self._external_access(c)
        raise BlockTooLarge(f"node {node.id} has alpha != 0 but no write consumer")

    # ---- trip analysis ---------------------------------------------------------

    def _trip(self, v: Var, env: dict):
        """(lo, hi, clamps): possible trip counts of a loop over v under env.

        Every padded ancestor of v (any split level whose children's extents
        multiply past its own) contributes a clamp; trips must respect all of
        them, so recomposed iteration points never overrun or double-cover.
        """
        E = v.size
        lo_all, hi_all = E, E
        dyns: list[DynTrip] = []
        anc = v
        while anc.origin is not None:
            anc = anc.origin.parent
            if self.dfg.padded_extent(anc) == anc.size:
                continue
            coeff = 1
            bmin = bmax = 0
            base_const = 0
            dyn_terms: dict[int, int] = {}
            for u, cu in self.dfg.expansion(anc):
                if u.uid == v.uid:
                    coeff = cu
                    continue
                r = env.get(u.uid)
                if r is None:
                    continue  # opens deeper; clamps itself later
                lo, hi = r
                bmin += cu * lo
                bmax += cu * hi
                if lo == hi:
                    base_const += cu * lo
                else:
                    _add_term(dyn_terms, u.uid, cu)
            hi_t = max(0, min(E, (anc.size - 1 - bmin) // coeff + 1))
            lo_t = max(0, min(E, (anc.size - 1 - bmax) // coeff + 1))
            if lo_t == hi_t:
                lo_all = min(lo_all, lo_t)
                hi_all = min(hi_all, hi_t)
            else:
                lo_all = min(lo_all, lo_t)
                hi_all = min(hi_all, hi_t)
                dyns.append(DynTrip(anc.size, coeff, base_const,
                                    tuple(sorted((self.var_slot[u], c)
                                                 for u, c in dyn_terms.items()))))
        if lo_all == hi_all:
            return lo_all, hi_all, ()
        return lo_all, hi_all, tuple(dyns)

    # ---- body runs and vectorizability -----------------------------------------

    def _body_runs(self, children: list) -> list[list[Leaf]]:
        runs, cur = [], []
        for c in children:
            if isinstance(c, Leaf):
                cur.append(c)
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        return runs

    def _analyze_runs(self) -> None:
        self._run_of_leaf: dict[int, list[Leaf]] = {}
        self._vectorizable: dict[int, bool] = {}
        self._parent_of_run: dict[int, Optional[Loop]] = {}

        def visit(children, parent):
            runs = self._body_runs(children)
            leaf_only = all(isinstance(c, Leaf) for c in children)
            for run in runs:
                key = id(run[0])
                for l in run:
                    self._run_of_leaf[id(l)] = run
                self._parent_of_run[key] = parent
                self._vectorizable[key] = (leaf_only and parent is not None
                                           and self._vec_ok(run, parent))
            for c in children:
                if isinstance(c, Loop):
                    visit(c.children, c)

        visit(self.tree.roots, None)

    def _vec_ok(self, run: list[Leaf], parent: Loop) -> bool:
        v = parent.var
        in_run = {l.node_id for l in run}
        for leaf in run:
            nid = leaf.node_id
            if nid in self.elided:
                continue
            node = self.dfg[nid]
            k = node.kind
            accesses: list[SymAccess] = []
            out: Optional[SymAccess] = None
            if isinstance(k, Read):
                accesses.append(self._external_access(node))
                out = self._scratch_access(nid)
            elif isinstance(k, View):
                accesses.append(self._view_source_access(node))
                out = self._scratch_access(nid)
            elif isinstance(k, Write):
                pid = node.inputs[0]
                if not self._forwards(pid, in_run):
                    accesses.append(self._operand_access(pid))
                out = self._external_access(node)
            else:
                for pid in node.inputs:
                    if not self._forwards(pid, in_run):
                        accesses.append(self._operand_access(pid))
                out = self._scratch_access(nid)
                if k.alpha != 0.0 and not self.dfg.reduction_dims(node):
                    accesses.append(self._cin_access(node))
            for acc in accesses:
                if acc.guarded():
                    return False
                if acc.coeff(v.uid) not in (0, 1):
                    return False
            if isinstance(k, Arith) and not self.dfg.reduction_dims(node):
                alloc = self.tree.alloc[nid]
                consumers = self.dfg.consumers(nid)
                if alloc.size == 1 and consumers:
                    if all(c.id in in_run for c in consumers):
                        continue  # forwards by register; no store emitted
                    return False  # one-element buffer cannot hold a vector
            if out is not None:
                reduces_v = (isinstance(k, Arith)
                             and v.root in self.dfg.reduction_dims(node))
                if not reduces_v and out.coeff(v.uid) != 1:
                    return False
        return True

    def _forwards(self, pid: int, in_run: set[int]) -> bool:
        if pid not in in_run:
            return False
        alloc = self.tree.alloc.get(pid)
        return alloc is not None and alloc.size == 1 and pid not in self.elided

    def _body_cost(self, run: list[Leaf]) -> int:
        cost = 0
        for leaf in run:
            if leaf.node_id in self.elided:
                continue
            node = self.dfg[leaf.node_id]
            if isinstance(node.kind, (Read, View, Write)):
                cost += 2
            else:
                k = node.kind
                cost += len(node.inputs) + max(1, len(node.inputs) - 1) + 3
                cost += 4 if k.alpha != 0.0 else 0
                cost += 2 if k.beta != 1.0 else 0
                cost += 1 if k.post != "identity" else 0
        return max(cost, 1)

    # ---- region planning --------------------------------------------------------

    def _statically_sized(self, loop: Loop) -> bool:
        root = loop.var.root
        return self.dfg.padded_extent(root) == root.size

    def _plan_regions(self) -> None:
        self._region_at: dict[int, _Region] = {}    # id(root loop) -> region
        self._region_of: dict[int, _Region] = {}    # node id -> region
        claimed: set[int] = set()
        budget = self.vregs - _TEMP_CAP

        for nid in self.dfg.topo_order():
            node = self.dfg[nid]
            if not isinstance(node.kind, Arith):
                continue
            red = self.dfg.reduction_dims(node)
            if not red:
                continue
            region = self._select_region(node, set(red), budget, claimed)
            if region is None:
                continue
            self._region_of[nid] = region
            self._region_at[id(region.root)] = region
            claimed.add(id(region.root))
            claimed.update(id(l) for l in _loops_under(region.root))

    def _select_region(self, node: Node, red_roots: set, budget: int,
                       claimed: set[int]) -> Optional[_Region]:
        leaf = self.tree.leaf_of[node.id]
        path = leaf.path()
        if not path:
            return None
        alloc = self.tree.alloc[node.id]
        run = self._run_of_leaf[id(leaf)]
        vec = self._vectorizable[id(run[0])]
        innermost = path[-1]
        out_roots = set(node.output.dims)

        v = innermost.var
        if vec and v.root in red_roots:
            mode = "vred"
        elif vec:
            mode = "vout"
        else:
            mode = "scalar"

        def n_regs(elems: int) -> int:
            return -(-elems // self.lanes) if mode == "vout" else elems

        body = self._body_cost(run)
        elems, cost = 1, body
        out_loops: list[Loop] = []
        force: set[int] = set()
        snapshots: list[tuple] = []
        can_unroll = self.limit > 1

        for idx in range(len(path) - 1, -1, -1):
            L = path[idx]
            if alloc.scope is not None and L is alloc.scope:
                break
            if id(L) in claimed:
                break
            if L is not innermost:
                side = any(not _contains_path(c, path)
                           and self._live.get(id(c), False)
                           for c in L.children)
                if side:
                    break
            is_out = L.var.root in out_roots
            if is_out:
                if not can_unroll:
                    break
                if L is innermost and mode == "vout":
                    if L.var.size % self.lanes != 0:
                        break
                    trips = L.var.size // self.lanes
                    ncost = body * trips
                    nelems = L.var.size
                else:
                    ncost = cost * L.var.size
                    nelems = elems * L.var.size
                if ncost > self.limit or n_regs(nelems) > budget:
                    break
                elems, cost = nelems, ncost
                out_loops.insert(0, L)
                force.add(id(L))
            else:
                if can_unroll and self._statically_sized(L) and \
                        cost * L.var.size <= self.limit:
                    cost *= L.var.size
                else:
                    can_unroll = False
            snapshots.append((L, list(out_loops), set(force), elems))

        if not snapshots:
            return None
        root, out_loops, force, elems = snapshots[-1]
        regs = n_regs(elems)
        if regs < 1 or regs > budget:
            return None

        inside = {id(root)} | {id(l) for l in _loops_under(root)}
        direct = all(id(L) in inside for L in path if L.var.root in red_roots)
        if node.kind.alpha != 0.0 and direct and mode == "vout":
            # the prologue loads c_in with vector loads; they must be
            # contiguous along the vectorized dimension
            cin = self._cin_access(node)
            if cin.coeff(path[-1].var.uid) != 1:
                return None

        rotation = 1
        if self.interleave and regs == 1 and mode in ("vred", "scalar"):
            spare = budget - regs
            for r in (4, 2):
                if regs * (r - 1) <= spare:
                    rotation = r
                    break
        accum_base = self.vregs - regs * rotation
        if accum_base < _TEMP_CAP:
            rotation = 1
            accum_base = self.vregs - regs
        if accum_base < _TEMP_CAP:
            return None
        return _Region(leaf, root, out_loops, force, mode, direct, rotation,
                       accum_base, regs * rotation, regs)

    # ---- unroll planning ----------------------------------------------------------

    def _plan_unroll(self) -> None:
        self._unroll: set[int] = set()

        def cost_of(children, parent) -> int:
            """Emitted-size estimate of one iteration of `parent`; -1 when the
            subtree contains a rolled loop (then nothing above may unroll)."""
            total = 0
            rolled = False
            for run in self._body_runs(children):
                total += self._body_cost(run)
            for ch in children:
                if not isinstance(ch, Loop):
                    continue
                sub = cost_of(ch.children, ch)
                key = id(ch)
                forced = any(key in r.force_unroll
                             for r in self._region_of.values())
                if sub < 0:
                    rolled = True
                    continue
                vec_here = False
                runs = self._body_runs(ch.children)
                if len(runs) == 1 and all(isinstance(c, Leaf)
                                          for c in ch.children):
                    vec_here = self._vectorizable[id(runs[0][0])]
                trips = ch.var.size
                if vec_here:
                    trips = ch.var.size // self.lanes + ch.var.size % self.lanes
                unrolled = trips * sub
                if forced or (self.limit > 1 and unrolled <= self.limit
                              and self._statically_sized(ch)):
                    self._unroll.add(key)
                    total += unrolled
                else:
                    rolled = True
            return -1 if rolled else total

        for r in self.tree.roots:
            if isinstance(r, Loop):
                cost_of(r.children, r)

    # ---- init/post sweeps ------------------------------------------------------------

    def _plan_sweeps(self) -> None:
        """Accumulating nodes whose reduction is not fully register-resident
        need their scratch initialized at scope entry and the post-op applied
        at scope exit."""
        self._init_before: dict[int, list[int]] = {}   # id(subtree top) -> nids
        self._post_after: dict[int, list[int]] = {}

        for nid in self.dfg.topo_order():
            node = self.dfg[nid]
            if not isinstance(node.kind, Arith):
                continue
            if not self.dfg.reduction_dims(node):
                continue
            region = self._region_of.get(nid)
            if region is not None and region.direct:
                continue
            leaf = self.tree.leaf_of[nid]
            scope = self.tree.alloc[nid].scope
            path = leaf.path()
            if scope is None:
                top = path[0] if path else leaf
            else:
                i = path.index(scope)
                top = path[i + 1] if i + 1 < len(path) else leaf
            self._init_before.setdefault(id(top), []).append(nid)
            if node.kind.post != "identity":
                self._post_after.setdefault(id(top), []).append(nid)

    # ---- emission ----------------------------------------------------------------------

    def emit(self) -> KernelProgram:
        env: dict[int, tuple[int, int]] = {}
        self._emit_children_list(self.tree.roots, None, env)
        return KernelProgram(self.instrs, self.lanes, self.vregs, self.buffers,
                             self.var_names, self.regions)

    def _emit_children_list(self, children, parent: Optional[Loop], env) -> None:
        emitted = set()
        for c in children:
            if not self._live.get(id(c), False):
                continue
            if id(c) in self._init_before:
                for nid in self._init_before[id(c)]:
                    self._emit_init_sweep(nid, env)
            if isinstance(c, Loop):
                self._emit_loop(c, env)
            else:
                run = self._run_of_leaf[id(c)]
                if id(run[0]) not in emitted:
                    emitted.add(id(run[0]))
                    self._emit_run(run, parent, env, vec_var=None)
            if id(c) in self._post_after:
                for nid in self._post_after[id(c)]:
                    self._emit_post_sweep(nid, env)

    def _emit_loop(self, loop: Loop, env: dict) -> None:
        region = self._region_at.get(id(loop))
        if region is not None and not any(r is region
                                          for r in self._active_regions):
            self._emit_region(region, loop, env)
            return
        self._emit_loop_plain(loop, env)

    def _emit_loop_plain(self, loop: Loop, env: dict) -> None:
        v = loop.var
        lo, hi, dyn = self._trip(v, env)

        runs = self._body_runs(loop.children)
        vec_run = (len(runs) == 1 and all(isinstance(c, Leaf)
                                          for c in loop.children)
                   and self._vectorizable[id(runs[0][0])]
                   and self._runtime_vec_ok(runs[0]))

        forced = any(id(loop) in r.force_unroll for r in self._active_regions)
        if lo != hi:
            if forced:
                # a register-block loop must unroll: emit the static maximum;
                # out-of-range replicas compute into padded cells whose
                # values no consumer ever reads
                self._record_span_start()
                for i in range(hi):
                    self._emit_children_of(loop, {**env, v.uid: (i, i)})
                self._record_span_end()
                return
            # dynamic trip: rolled, scalar
            self._begin(loop, hi, {**env, v.uid: (0, hi - 1)}, dyn=dyn)
            return
        T = lo
        if T == 0:
            return

        if vec_run and T >= self.lanes:
            self._emit_vector_loop(loop, runs[0], T, env)
            return

        unroll = id(loop) in self._unroll or forced
        if unroll:
            self._record_span_start()
            for i in range(T):
                self._emit_children_of(loop, {**env, v.uid: (i, i)})
            self._record_span_end()
            return
        if self._needs_peel(loop, env, T):
            if T > 1:
                self._begin(loop, T - 1, {**env, v.uid: (0, T - 2)})
            self._emit_children_of(loop, {**env, v.uid: (T - 1, T - 1)})
            return
        self._begin(loop, T, {**env, v.uid: (0, T - 1)})

    def _runtime_vec_ok(self, run: list[Leaf]) -> bool:
        """Streaming reductions over the innermost var cannot vectorize (the
        output would be written once per lane)."""
        for leaf in run:
            node = self.dfg[leaf.node_id]
            if not isinstance(node.kind, Arith):
                continue
            red = self.dfg.reduction_dims(node)
            if not red:
                continue
            region = self._region_of.get(leaf.node_id)
            if region is None or not any(r is region for r in self._active_regions):
                v = leaf.parent.var if leaf.parent else None
                if v is not None and v.root in red:
                    return False
        return True

    def _emit_vector_loop(self, loop: Loop, run: list[Leaf], T: int, env) -> None:
        v = loop.var
        nvec, rem = divmod(T, self.lanes)
        unroll = id(loop) in self._unroll or any(
            id(loop) in r.force_unroll for r in self._active_regions)
        if unroll:
            self._record_span_start()
            for i in range(nvec):
                at = i * self.lanes
                self._emit_run(run, loop, {**env, v.uid: (at, at)}, vec_var=v)
            self._record_span_end()
        elif nvec > 0:
            slot = self.var_slot[v.uid]
            self.instrs.append(Instr("loop.begin", var=slot, count=nvec,
                                     step=self.lanes))
            self._pool.reset()
            self._emit_run(run, loop, {**env, v.uid: (0, (nvec - 1) * self.lanes)},
                           vec_var=v)
            self.instrs.append(Instr("loop.end"))
            self._pool.reset()
        for j in range(rem):
            at = nvec * self.lanes + j
            self._emit_run(run, loop, {**env, v.uid: (at, at)}, vec_var=None)

    def _begin(self, loop: Loop, count: int, env: dict,
               dyn: tuple = (), step: int = 1) -> None:
        slot = self.var_slot[loop.var.uid]
        self.instrs.append(Instr("loop.begin", var=slot, count=count,
                                 step=step, dyn=dyn))
        self._pool.reset()
        self._emit_children_of(loop, env)
        self.instrs.append(Instr("loop.end"))
        self._pool.reset()

    def _emit_children_of(self, loop: Loop, env: dict) -> None:
        self._emit_children_list(loop.children, loop, env)

    def _needs_peel(self, loop: Loop, env: dict, T: int) -> bool:
        if T < 1:
            return False
        v = loop.var
        full = {**env, v.uid: (0, T - 1)}
        capped = {**env, v.uid: (0, max(T - 2, 0))}
        last = {**env, v.uid: (T - 1, T - 1)}
        for w in _loops_under(loop):
            lo, hi, _ = self._trip(w.var, full)
            if lo == hi:
                continue
            l1, h1, _ = self._trip(w.var, capped)
            l2, h2, _ = self._trip(w.var, last)
            if l1 == h1 and l2 == h2:
                return True
        return False

    def _record_span_start(self) -> None:
        if self._unroll_depth == 0:
            self._span_start = len(self.instrs)
        self._unroll_depth += 1

    def _record_span_end(self) -> None:
        self._unroll_depth -= 1
        if self._unroll_depth == 0:
            self.unrolled_spans.append((self._span_start, len(self.instrs)))

    # ---- register-blocked regions ----------------------------------------------------

    def _emit_region(self, region: _Region, loop: Loop, env: dict) -> None:
        node = self.dfg[region.leaf.node_id]
        k = node.kind
        ident = float(OP_IDENTITY[k.reduce_op])
        start = len(self.instrs)
        accums = list(range(region.accum_base,
                            region.accum_base + region.n_accums))

        self._pool.reset()
        for elem in range(region.elems):
            eenv = self._elem_env(region, env, elem)
            regs = self._elem_regs(region, elem)
            for rot, reg in enumerate(regs):
                if rot > 0 or (region.direct and k.alpha == 0.0):
                    self.instrs.append(Instr("vbroadcast", dst=reg, imm=ident))
                elif region.direct:
                    self._emit_alpha_init(node, reg, eenv, region)
                else:
                    self._load_accum(region, node, reg, eenv, ident)
        prologue_end = len(self.instrs)

        self._active_regions.append(region)
        self._emit_loop_plain(loop, env)
        self._active_regions.pop()

        epilogue_start = len(self.instrs)
        for elem in range(region.elems):
            eenv = self._elem_env(region, env, elem)
            regs = self._elem_regs(region, elem)
            main = regs[0]
            for extra in regs[1:]:
                self.instrs.append(Instr("vop", kind=k.reduce_op, dst=main,
                                         s1=main, s2=extra))
            if region.mode == "vred":
                self.instrs.append(Instr("vreduce", kind=k.reduce_op,
                                         dst=main, s1=main))
            if k.post != "identity" and region.direct:
                self.instrs.append(Instr("post", kind=k.post, dst=main))
            self._store_accum(region, node, main, eenv)
        self.regions.append(RegionInfo(node.id, start, len(self.instrs),
                                       tuple(accums), prologue_end,
                                       epilogue_start))

    def _elem_regs(self, region: _Region, elem: int) -> list[int]:
        r = region.rotation
        return list(range(region.accum_base + elem * r,
                          region.accum_base + (elem + 1) * r))

    def _elem_env(self, region: _Region, env: dict, elem: int) -> dict:
        eenv = dict(env)
        mults = []
        for L in region.out_loops:
            if region.mode == "vout" and L is region.out_loops[-1]:
                mults.append(L.var.size // self.lanes)
            else:
                mults.append(L.var.size)
        idx = []
        rem = elem
        for m in reversed(mults):
            idx.append(rem % m)
            rem //= m
        idx.reverse()
        for L, i in zip(region.out_loops, idx):
            step = self.lanes if (region.mode == "vout"
                                  and L is region.out_loops[-1]) else 1
            eenv[L.var.uid] = (i * step, i * step)
        return eenv

    def _region_elem_index(self, region: _Region, env: dict) -> int:
        idx = 0
        for L in region.out_loops:
            lo, hi = env[L.var.uid]
            if lo != hi:
                raise RuntimeError(
                    f"register-block loop {L.var.name} not unrolled")
            it = lo
            if region.mode == "vout" and L is region.out_loops[-1]:
                m = L.var.size // self.lanes
                it //= self.lanes
            else:
                m = L.var.size
            idx = idx * m + it
        return idx

    def _rotation_index(self, region: _Region, env: dict) -> int:
        if region.rotation == 1:
            return 0
        node = self.dfg[region.leaf.node_id]
        red = set(self.dfg.reduction_dims(node))
        rot = 0
        for L in [region.root] + _loops_under(region.root):
            if L.var.root in red:
                r = env.get(L.var.uid)
                if r is not None and r[0] == r[1]:
                    rot += r[0]
        return rot

    def _load_accum(self, region, node, reg, eenv, ident: float) -> None:
        acc = self._scratch_access(node.id)
        addr = self._materialize(acc, eenv)
        if region.mode == "vout":
            self.instrs.append(Instr("vload", dst=reg, addr=addr))
        else:
            self.instrs.append(Instr("vbroadcast", dst=reg, imm=ident))
            self.instrs.append(Instr("sload", dst=reg, addr=addr))

    def _store_accum(self, region, node, reg, eenv) -> None:
        acc = self._scratch_access(node.id)
        addr = self._materialize(acc, eenv)
        op = "vstore" if region.mode == "vout" else "sstore"
        self.instrs.append(Instr(op, s1=reg, addr=addr))

    def _emit_alpha_init(self, node: Node, reg: int, eenv: dict,
                         region: _Region) -> None:
        k = node.kind
        cin = self._cin_access(node)
        addr = self._materialize(cin, eenv)
        if region.mode == "vout":
            self.instrs.append(Instr("vload", dst=reg, addr=addr))
        else:
            self.instrs.append(Instr("vbroadcast", dst=reg,
                                     imm=float(OP_IDENTITY[k.reduce_op])))
            self.instrs.append(Instr("sload", dst=reg, addr=addr))
        if k.pre != "identity":
            self.instrs.append(Instr("post", kind=k.pre, dst=reg))
        if k.alpha != 1.0:
            t = self._pool.alloc()
            self.instrs.append(Instr("vbroadcast", dst=t, imm=float(k.alpha)))
            self.instrs.append(Instr("vop", kind="mul", dst=reg, s1=reg, s2=t))
            self._pool.release(t)

    # ---- init / post sweeps ---------------------------------------------------------

    def _sweep_vars(self, nid: int) -> list[Var]:
        """Unshared vars of the node's allocation, outer (largest stride)
        first."""
        alloc = self.tree.alloc[nid]
        uid_var = {}
        for v in self.dfg[nid].order:
            uid_var[v.uid] = v
        vs = sorted(alloc.strides.items(), key=lambda t: -t[1])
        return [uid_var[uid] for uid, _ in vs]

    def _emit_init_sweep(self, nid: int, env: dict) -> None:
        node = self.dfg[nid]
        k = node.kind
        ident = float(OP_IDENTITY[k.reduce_op])
        alloc = self.tree.alloc[nid]
        buf = self.buf_of_node[nid]
        if k.alpha == 0.0:
            # linear memset over the (lane-padded) scratch block
            slot = self._syn_slot(f"_i{nid}")
            count = -(-alloc.size // self.lanes)
            r = self._pool.alloc()
            self.instrs.append(Instr("vbroadcast", dst=r, imm=ident))
            self.instrs.append(Instr("loop.begin", var=slot, count=count,
                                     step=self.lanes))
            self.instrs.append(Instr("vstore", s1=r,
                                     addr=Address(buf, 0, ((slot, 1),))))
            self.instrs.append(Instr("loop.end"))
            self._pool.release(r)
            self._pool.invalidate_buf(buf)
            return
        # alpha * pre(c_in), element by element
        sweep = self._sweep_vars(nid)
        for v in sweep:
            self.instrs.append(Instr("loop.begin", var=self.var_slot[v.uid],
                                     count=v.size))
        body_env = dict(env)
        for v in sweep:
            body_env[v.uid] = (0, v.size - 1)
        self._pool.reset()
        cin = self._cin_access(node)
        r = self._pool.alloc()
        self.instrs.append(Instr("sload", dst=r,
                                 addr=self._materialize(cin, body_env)))
        if k.pre != "identity":
            self.instrs.append(Instr("post", kind=k.pre, dst=r))
        if k.alpha != 1.0:
            t = self._pool.alloc()
            self.instrs.append(Instr("vbroadcast", dst=t, imm=float(k.alpha)))
            self.instrs.append(Instr("sop", kind="mul", dst=r, s1=r, s2=t))
            self._pool.release(t)
        dst = self._scratch_access(nid)
        self.instrs.append(Instr("sstore", s1=r,
                                 addr=self._materialize(dst, body_env)))
        self._pool.release(r)
        for _ in sweep:
            self.instrs.append(Instr("loop.end"))
        self._pool.reset()

    def _emit_post_sweep(self, nid: int, env: dict) -> None:
        node = self.dfg[nid]
        sweep = self._sweep_vars(nid)
        for v in sweep:
            self.instrs.append(Instr("loop.begin", var=self.var_slot[v.uid],
                                     count=v.size))
        body_env = dict(env)
        for v in sweep:
            body_env[v.uid] = (0, v.size - 1)
        self._pool.reset()
        acc = self._scratch_access(nid)
        addr = self._materialize(acc, body_env)
        r = self._pool.alloc()
        self.instrs.append(Instr("sload", dst=r, addr=addr))
        self.instrs.append(Instr("post", kind=node.kind.post, dst=r))
        self.instrs.append(Instr("sstore", s1=r, addr=addr))
        self._pool.release(r)
        for _ in sweep:
            self.instrs.append(Instr("loop.end"))
        self._pool.reset()

    # ---- body emission ------------------------------------------------------------------

    def _emit_run(self, run: list[Leaf], parent: Optional[Loop], env: dict,
                  vec_var: Optional[Var]) -> None:
        self._forward = {}
        self._pool.housekeep()
        for leaf in run:
            self._emit_leaf(leaf, run, env, vec_var)
        for r in self._forward.values():
            self._pool.pinned.discard(r)
            self._pool.release(r)
        self._forward = {}

    def _emit_leaf(self, leaf: Leaf, run: list[Leaf], env: dict,
                   vv: Optional[Var]) -> None:
        nid = leaf.node_id
        if nid in self.elided:
            return
        node = self.dfg[nid]
        k = node.kind
        if isinstance(k, Read):
            self._emit_copy(self._external_access(node),
                            self._scratch_access(nid), env, vv)
        elif isinstance(k, View):
            self._emit_copy(self._view_source_access(node),
                            self._scratch_access(nid), env, vv)
        elif isinstance(k, Write):
            pid = node.inputs[0]
            fwd = self._forward.get(pid)
            dst = self._external_access(node)
            if fwd is not None:
                self._emit_store(fwd, dst, env, vv)
            else:
                self._emit_copy(self._operand_access(pid), dst, env, vv)
        else:
            self._emit_arith(leaf, node, run, env, vv)

    def _emit_copy(self, src: SymAccess, dst: SymAccess, env, vv) -> None:
        r = self._emit_load(src, env, vv)
        self._emit_store(r, dst, env, vv)
        self._pool.release(r)

    def _emit_load(self, src: SymAccess, env, vv: Optional[Var]) -> int:
        addr = self._materialize(src, env)
        vec = vv is not None
        key = ("mem", (src.buf,), addr.key(), vec)
        got = self._pool.memo.get(key)
        if got is not None:
            return got
        r = self._pool.alloc()
        if vec:
            if src.coeff(vv.uid) == 0:
                self.instrs.append(Instr("vbroadcast", dst=r, addr=addr))
            else:
                self.instrs.append(Instr("vload", dst=r, addr=addr))
        else:
            self.instrs.append(Instr("sload", dst=r, addr=addr))
        self._pool.memo[key] = r
        return r

    def _emit_imm(self, value: float) -> int:
        key = ("imm", float(value))
        got = self._pool.memo.get(key)
        if got is not None:
            return got
        r = self._pool.alloc()
        self.instrs.append(Instr("vbroadcast", dst=r, imm=float(value)))
        self._pool.memo[key] = r
        return r

    def _emit_store(self, reg: int, dst: SymAccess, env, vv) -> None:
        addr = self._materialize(dst, env)
        self.instrs.append(Instr("vstore" if vv is not None else "sstore",
                                 s1=reg, addr=addr))
        self._pool.invalidate_buf(dst.buf)

    def _emit_arith(self, leaf: Leaf, node: Node, run: list[Leaf], env,
                    vv: Optional[Var]) -> None:
        k = node.kind
        nid = node.id
        red = self.dfg.reduction_dims(node)
        vec = vv is not None
        opname = "vop" if vec else "sop"
        fmaname = "vfma" if vec else "sfma"
        region = self._region_of.get(nid)
        in_region = region is not None and any(r is region
                                               for r in self._active_regions)

        vals: list[int] = []
        for pid in node.inputs:
            fwd = self._forward.get(pid)
            if fwd is not None:
                vals.append(fwd)
            else:
                vals.append(self._emit_load(self._operand_access(pid), env, vv))

        if red and in_region:
            elem = self._region_elem_index(region, env)
            regs = self._elem_regs(region, elem)
            acc = regs[self._rotation_index(region, env) % len(regs)]
            if (len(vals) == 2 and k.combine_op == "mul"
                    and k.reduce_op == "add" and k.beta == 1.0):
                self.instrs.append(Instr(fmaname, dst=acc, s1=vals[0], s2=vals[1]))
                return
            term = self._fold_combine(node, vals, env, vv)
            if k.beta != 1.0:
                br = self._emit_imm(k.beta)
                term = self._owned(term, vv)
                self.instrs.append(Instr(opname, kind="mul", dst=term,
                                         s1=term, s2=br))
            self.instrs.append(Instr(opname, kind=k.reduce_op, dst=acc,
                                     s1=acc, s2=term))
            self._release_if_temp(term, vals)
            return

        if red:
            term = self._fold_combine(node, vals, env, vv)
            if k.beta != 1.0:
                br = self._emit_imm(k.beta)
                term = self._owned(term, vv)
                self.instrs.append(Instr(opname, kind="mul", dst=term,
                                         s1=term, s2=br))
            accsrc = self._scratch_access(nid)
            cur = self._emit_load(accsrc, env, vv)
            self.instrs.append(Instr(opname, kind=k.reduce_op, dst=cur,
                                     s1=cur, s2=term))
            self._emit_store(cur, accsrc, env, vv)
            self._release_if_temp(term, vals)
            self._pool.release(cur)
            return

        # pointwise node: full value computed here
        term = self._fold_combine(node, vals, env, vv)
        mutates = k.beta != 1.0 or k.alpha != 0.0 or k.post != "identity"
        if mutates:
            term = self._owned(term, vv)
        if k.beta != 1.0:
            br = self._emit_imm(k.beta)
            self.instrs.append(Instr(opname, kind="mul", dst=term, s1=term, s2=br))
        if k.alpha != 0.0:
            cin = self._cin_access(node)
            c = self._emit_load(cin, env, vv)
            cr = self._pool.alloc()
            if k.pre != "identity":
                self.instrs.append(Instr(opname, kind="mul", dst=cr, s1=c,
                                         s2=self._emit_imm(1.0)))
                self.instrs.append(Instr("post", kind=k.pre, dst=cr))
                self.instrs.append(Instr(opname, kind="mul", dst=cr, s1=cr,
                                         s2=self._emit_imm(k.alpha)))
            else:
                self.instrs.append(Instr(opname, kind="mul", dst=cr, s1=c,
                                         s2=self._emit_imm(k.alpha)))
            self.instrs.append(Instr(opname, kind=k.reduce_op, dst=term,
                                     s1=term, s2=cr))
            self._pool.release(cr)
            self._pool.release(c)
        if k.post != "identity":
            self.instrs.append(Instr("post", kind=k.post, dst=term))

        in_run = {l.node_id for l in run}
        alloc = self.tree.alloc[nid]
        has_fwd_consumer = alloc.size == 1 and any(
            c.id in in_run for c in self.dfg.consumers(nid))
        if has_fwd_consumer:
            self._forward[nid] = term
            self._pool.pinned.add(term)
        else:
            self._emit_store(term, self._scratch_access(nid), env, vv)
            self._pool.release(term)

    def _owned(self, term: int, vv: Optional[Var]) -> int:
        """Make sure `term` is writable without clobbering a forwarded or
        memoized register."""
        if term in self._forward.values() or term in self._pool.memo.values():
            op = "vop" if vv is not None else "sop"
            one = self._emit_imm(1.0)
            r = self._pool.alloc()
            self.instrs.append(Instr(op, kind="mul", dst=r, s1=term, s2=one))
            return r
        return term

    def _fold_combine(self, node: Node, vals: list[int], env,
                      vv: Optional[Var]) -> int:
        k = node.kind
        opname = "vop" if vv is not None else "sop"
        if len(vals) == 1:
            return vals[0]
        out = self._pool.alloc()
        self.instrs.append(Instr(opname, kind=k.combine_op, dst=out,
                                 s1=vals[0], s2=vals[1]))
        for r in vals[2:]:
            self.instrs.append(Instr(opname, kind=k.combine_op, dst=out,
                                     s1=out, s2=r))
        return out

    def _release_if_temp(self, term: int, vals: list[int]) -> None:
        if term not in self._forward.values():
            self._pool.release(term)

    # ---- address materialization -----------------------------------------------------

    def _materialize(self, acc: SymAccess, env: dict) -> Address:
        const = acc.const
        terms = []
        for uid, coeff in sorted(acc.terms.items()):
            r = env.get(uid)
            if r is not None and r[0] == r[1]:
                const += coeff * r[0]
            else:
                terms.append((self.var_slot[uid], coeff))
        guards = []
        for g in acc.guards:
            gconst = g.const
            gterms = []
            for uid, coeff in sorted(g.terms.items()):
                r = env.get(uid)
                if r is not None and r[0] == r[1]:
                    gconst += coeff * r[0]
                else:
                    gterms.append((self.var_slot[uid], coeff))
            guards.append(Guard(gconst, tuple(gterms), g.size))
        return Address(acc.buf, const, tuple(terms), tuple(guards), acc.fill)


def _loops_under(loop: Loop) -> list[Loop]:
    out = []

    def walk(n):
        for c in n.children:
            if isinstance(c, Loop):
                out.append(c)
                walk(c)

    walk(loop)
    return out


def _contains_path(subtree, path: list[Loop]) -> bool:
    """True when `subtree` is (or contains) a loop on `path` or the path's
    leaf hangs below it."""
    if isinstance(subtree, Leaf):
        return False
    return any(subtree is p for p in path)


def _fma_peephole(instrs: list[Instr]) -> list[Instr]:
    """vop.mul t,a,b ; vop.add acc,acc,t  ->  vfma acc,a,b (and the scalar
    twin), when t is not read again before being overwritten."""
    out: list[Instr] = []
    i = 0
    n = len(instrs)
    while i < n:
        ins = instrs[i]
        if (i + 1 < n and ins.op in ("vop", "sop") and ins.kind == "mul"
                and instrs[i + 1].op == ins.op
                and instrs[i + 1].kind == "add"):
            nxt = instrs[i + 1]
            t = ins.dst
            if nxt.s2 == t and nxt.s1 == nxt.dst and t != nxt.dst \
                    and not _read_later(instrs, i + 2, t):
                out.append(Instr("vfma" if ins.op == "vop" else "sfma",
                                 dst=nxt.dst, s1=ins.s1, s2=ins.s2))
                i += 2
                continue
        out.append(ins)
        i += 1
    return out


def _read_later(instrs: list[Instr], start: int, reg: int) -> bool:
    for j in range(start, len(instrs)):
        ins = instrs[j]
        if ins.op in ("loop.begin", "loop.end"):
            return True  # conservative across control flow
        if reg in (ins.s1, ins.s2):
            return True
        if ins.dst == reg:
            return False
    return False


# --------------------------------------------------------------------------
# public entry points
# --------------------------------------------------------------------------

def compile_tree(tree: LoopTree, target: TargetDescriptor,
                 unroll_limit: Optional[int] = None,
                 interleave: bool = True) -> CompiledKernel:
    """Compile a (possibly multi-nest) loop tree into an executable kernel."""
    t0 = time.perf_counter()
    em = _Emitter(tree, target, unroll_limit, interleave)
    prog = em.emit()
    prog.instrs = _fma_peephole(prog.instrs)
    # re-map region/span indices after the peephole pass
    prog2 = KernelProgram(prog.instrs, prog.lanes, prog.vregs, prog.buffers,
                          prog.var_names, [])
    regions = _remap_regions(em, prog.instrs)
    prog2.regions = regions
    compile_ms = (time.perf_counter() - t0) * 1000.0
    from .feedback import slot_shapes
    return CompiledKernel(
        program=prog2,
        target=target,
        slot_shapes=slot_shapes(em.dfg),
        input_slots=em.input_slots,
        output_slots=em.output_slots,
        scratch_bytes=em.scratch_bytes,
        compile_ms=compile_ms,
        flops=count_flops(em.dfg),
        dfg_bytes_moved=bytes_moved(em.dfg),
        unrolled_spans=em.unrolled_spans,
        unroll_limit=em.limit,
    )


def _remap_regions(em: _Emitter, instrs: list[Instr]) -> list[RegionInfo]:
    # the peephole only merges adjacent pairs inside regions; boundaries are
    # preserved because prologue/epilogue instructions are loads/stores that
    # the pass never touches. Recompute spans by re-running the mapping.
    return em.regions if len(instrs) == len(em.instrs) else \
        _recount_regions(em)


def _recount_regions(em: _Emitter) -> list[RegionInfo]:
    # map old indices to new ones under pair-merging
    old = em.instrs
    new = _fma_peephole(old)
    mapping = {}
    i = j = 0
    while i < len(old):
        mapping[i] = j
        ins = old[i]
        if (j < len(new) and new[j].op in ("vfma", "sfma")
                and ins.op in ("vop", "sop") and ins.kind == "mul"
                and i + 1 < len(old) and old[i + 1].op == ins.op
                and old[i + 1].kind == "add"
                and old[i + 1].s2 == ins.dst
                and new[j].s1 == ins.s1 and new[j].s2 == ins.s2):
            mapping[i + 1] = j
            i += 2
            j += 1
            continue
        i += 1
        j += 1
    mapping[len(old)] = len(new)
    out = []
    for r in em.regions:
        out.append(RegionInfo(r.node, mapping[r.start], mapping[r.end],
                              r.accum_regs, mapping[r.prologue_end],
                              mapping[r.epilogue_start]))
    em.unrolled_spans = [(mapping[a], mapping[b]) for a, b in em.unrolled_spans]
    return out


def compile(tree: LoopTree, target: TargetDescriptor,
            unroll_limit: Optional[int] = None,
            interleave: bool = True) -> CompiledKernel:
    """Alias of `compile_tree`; kept for single-nest call sites."""
    return compile_tree(tree, target, unroll_limit, interleave)


def compile_single_operand(tree: LoopTree, target: TargetDescriptor,
                           unroll_limit: Optional[int] = None) -> CompiledKernel:
    """Compile a reduction-free single-input tree (reshape, transpose,
    broadcast, slice). Used standalone and by packing stages."""
    dfg = tree.dfg
    for node in dfg:
        if dfg.reduction_dims(node):
            raise HasReduction(f"node {node.id} reduces {dfg.reduction_dims(node)}")
    n_reads = sum(1 for n in dfg if isinstance(n.kind, Read))
    if n_reads != 1:
        raise ValueError(f"single-operand tree must have 1 input, has {n_reads}")
    return compile_tree(tree, target, unroll_limit)
