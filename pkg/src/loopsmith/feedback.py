"""Schedule feedback: a naive whole-array reference interpreter (the oracle
every compiled kernel is checked against), operation/traffic analytics, and a
small benchmarking harness.

Everything here is a function of the dataflow graph alone -- FLOP counts and
arithmetic intensity do not change under any schedule action, which is what
makes them useful anchors while exploring schedules.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ir import DFG, Arith, Node, OP_IDENTITY, Read, View, Write


class ShapeMismatch(Exception):
    pass


_EW = {
    "identity": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
}

_COMBINE = {
    "add": np.add,
    "mul": np.multiply,
    "max": np.maximum,
    "min": np.minimum,
}

_REDUCE = {
    "add": np.sum,
    "mul": np.prod,
    "max": np.max,
    "min": np.min,
}


def slot_shapes(dfg: DFG) -> dict[int, tuple[int, ...]]:
    """External slot -> row-major shape, from the read/write node layouts."""
    out: dict[int, tuple[int, ...]] = {}
    for node in dfg:
        if isinstance(node.kind, (Read, Write)):
            out[node.kind.slot] = tuple(d.size for d in node.output.dims)
    return out


def _check_buffers(dfg: DFG, buffers: dict[int, np.ndarray],
                   need_outputs: bool) -> None:
    for slot, shape in slot_shapes(dfg).items():
        if slot not in buffers:
            if need_outputs:
                raise ShapeMismatch(f"slot {slot} missing")
            continue
        got = buffers[slot]
        if got.size != int(np.prod(shape)):
            raise ShapeMismatch(
                f"slot {slot}: expected {shape} ({int(np.prod(shape))} elems), "
                f"got {got.size}")


def reference_eval(dfg: DFG, buffers: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Evaluate the graph node by node with dense numpy arrays, ignoring every
    schedule annotation. Returns slot -> output array (row-major, float64).

    Input slots must be present in `buffers`; write slots may be present (they
    seed `c_in` for nodes with alpha != 0) or absent (treated as zeros).
    """
    _check_buffers(dfg, buffers, need_outputs=False)
    shapes = slot_shapes(dfg)

    # snapshot prior output contents for the alpha * pre(c_in) term
    prior: dict[int, np.ndarray] = {}
    write_of: dict[int, Node] = {}  # producer node id -> write node
    for node in dfg:
        if isinstance(node.kind, Write):
            arr = buffers.get(node.kind.slot)
            shape = tuple(d.size for d in node.output.dims)
            if arr is None:
                prior[node.kind.slot] = np.zeros(shape)
            else:
                prior[node.kind.slot] = np.asarray(arr, dtype=np.float64).reshape(shape).copy()
            write_of[node.inputs[0]] = node

    vals: dict[int, np.ndarray] = {}
    outs: dict[int, np.ndarray] = {}
    for nid in dfg.topo_order():
        node = dfg[nid]
        k = node.kind
        if isinstance(k, Read):
            shape = shapes[k.slot]
            vals[nid] = np.asarray(buffers[k.slot], dtype=np.float64).reshape(shape)
        elif isinstance(k, View):
            vals[nid] = _eval_view(dfg, node, vals[node.inputs[0]])
        elif isinstance(k, Arith):
            vals[nid] = _eval_arith(dfg, node, vals, prior, write_of)
        elif isinstance(k, Write):
            src = dfg[node.inputs[0]]
            arr = _align(vals[node.inputs[0]], src.output.dims, node.output.dims)
            outs[k.slot] = np.ascontiguousarray(arr)
    return outs


def _align(arr: np.ndarray, have: tuple, want: list | tuple) -> np.ndarray:
    """Transpose/expand `arr` (indexed by dims `have`) into axis order `want`,
    broadcasting along dims it does not carry."""
    have = list(have)
    perm = [have.index(d) for d in want if d in have]
    moved = np.transpose(arr, perm) if arr.ndim else arr
    shape = [d.size if d in have else 1 for d in want]
    return moved.reshape(shape)


def _eval_view(dfg: DFG, node: Node, src: np.ndarray) -> np.ndarray:
    k = node.kind
    out_dims = list(node.output.dims)
    out_shape = tuple(d.size for d in out_dims)
    grids = np.indices(out_shape)
    pos = {d: grids[i] for i, d in enumerate(out_dims)}

    idxs = []
    in_range = np.ones(out_shape, dtype=bool)
    for c in k.constraints:
        x = np.full(out_shape, c.offset, dtype=np.int64)
        for v, coeff in c.terms:
            x = x + coeff * pos[v]
        in_range &= (x >= 0) & (x < c.input_dim.size)
        idxs.append(np.clip(x, 0, c.input_dim.size - 1))
    got = src[tuple(idxs)]
    if k.guarded:
        return np.where(in_range, got, k.oob)
    if not in_range.all():
        raise ShapeMismatch(f"view {node.id} accesses out of range")
    return got


def _eval_arith(dfg: DFG, node: Node, vals: dict[int, np.ndarray],
                prior: dict[int, np.ndarray], write_of: dict[int, Node]) -> np.ndarray:
    k = node.kind
    space = dfg.iteration_dims(node)  # output dims then reduction dims
    parts = [_align(vals[i], dfg[i].output.dims, space) for i in node.inputs]
    combined = parts[0]
    for p in parts[1:]:
        combined = _COMBINE[k.combine_op](combined, p)
    if k.beta != 1.0:
        combined = k.beta * combined
    combined = np.broadcast_to(combined, tuple(d.size for d in space))

    n_out = len(node.output.dims)
    red_axes = tuple(range(n_out, len(space)))
    if red_axes:
        reduced = _REDUCE[k.reduce_op](combined, axis=red_axes)
    else:
        reduced = combined
    if k.alpha != 0.0:
        w = write_of.get(node.id)
        if w is None:
            raise ShapeMismatch(
                f"node {node.id} has alpha != 0 but no write consumer")
        c_in = _align(prior[w.kind.slot], w.output.dims, node.output.dims)
        init = k.alpha * _EW[k.pre](c_in)
        reduced = _COMBINE[k.reduce_op](init, reduced)
    return np.asarray(_EW[k.post](reduced), dtype=np.float64)


# --------------------------------------------------------------------------
# Analytics
# --------------------------------------------------------------------------

def count_flops(dfg: DFG) -> int:
    """Total operation count: a contraction costs two ops per innermost point
    (the combine and the reduce/accumulate); a pure elementwise map costs one
    per output point. A multi-input combine whose reduction happens in a
    consuming node only contributes its combines (the consumer owns the
    accumulate). Pure data movement counts zero."""
    total = 0
    for node in dfg:
        k = node.kind
        if not isinstance(k, Arith):
            continue
        red = dfg.reduction_dims(node)
        points = 1
        for d in list(node.output.dims) + red:
            points *= d.size
        out_points = 1
        for d in node.output.dims:
            out_points *= d.size
        combines = len(node.inputs) - 1
        accumulates = 1 if (red or k.alpha != 0.0) else 0
        if combines >= 1 and accumulates == 0:
            # standalone combine: the accumulate into the output is its own
            # op unless a consuming node performs the reduction instead
            deferred = any(isinstance(c.kind, Arith) and dfg.reduction_dims(c)
                           for c in dfg.consumers(node.id))
            if not deferred:
                accumulates = 1
        per_point = combines + accumulates
        if k.beta != 1.0:
            per_point += 1
        total += points * per_point
        if k.post != "identity":
            total += out_points
        if k.alpha != 0.0 and k.pre != "identity":
            total += out_points
        if k.alpha not in (0.0, 1.0):
            total += out_points
    return total


def bytes_moved(dfg: DFG) -> int:
    """Compulsory external traffic: each external element read or written
    once, regardless of schedule or staging. 4 bytes per f32 element."""
    elems = 0
    for node in dfg:
        if isinstance(node.kind, (Read, Write)):
            n = 1
            for d in node.output.dims:
                n *= d.size
            elems += n
    return 4 * elems


def arithmetic_intensity(dfg: DFG) -> float:
    return count_flops(dfg) / bytes_moved(dfg)


@dataclass
class ScheduleStats:
    """Feedback payload shown after every schedule action."""

    flops: int
    bytes_moved: int
    arithmetic_intensity: float
    compile_ms: float
    gflops: float
    elapsed_ms: float
    repeats: int
    vm_counters: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "flops": self.flops,
            "bytes_moved": self.bytes_moved,
            "arithmetic_intensity": self.arithmetic_intensity,
            "compile_ms": self.compile_ms,
            "gflops": self.gflops,
            "elapsed_ms": self.elapsed_ms,
            "repeats": self.repeats,
            "vm_counters": dict(self.vm_counters),
        }

    def deterministic_json(self) -> dict:
        """The schedule-determined subset (no wall-clock fields); two runs of
        the same schedule must agree on this exactly."""
        return {
            "flops": self.flops,
            "bytes_moved": self.bytes_moved,
            "arithmetic_intensity": self.arithmetic_intensity,
            "vm_counters": dict(self.vm_counters),
        }


def benchmark(kernel, buffers: dict[int, np.ndarray],
              min_ms: float = 10.0) -> ScheduleStats:
    """Run `kernel` until `min_ms` of wall time has elapsed (at least once)
    and report throughput plus the deterministic instruction counters."""
    from .backend import execute  # local import to avoid a cycle

    flops = kernel.flops
    reps = 0
    t0 = time.perf_counter()
    while True:
        execute(kernel, buffers)
        reps += 1
        elapsed = (time.perf_counter() - t0) * 1000.0
        if elapsed >= min_ms:
            break
    gflops = (flops * reps) / (elapsed / 1000.0) / 1e9 if elapsed > 0 else 0.0
    return ScheduleStats(
        flops=flops,
        bytes_moved=kernel.dfg_bytes_moved,
        arithmetic_intensity=flops / kernel.dfg_bytes_moved,
        compile_ms=kernel.compile_ms,
        gflops=gflops,
        elapsed_ms=elapsed,
        repeats=reps,
        vm_counters=dict(kernel.counters),
    )
