"""Kernel program representation: a flat instruction list over a virtual
vector-register file, with affine memory operands resolved against live loop
iterators. This is the compiled artifact -- inspectable, deterministic, and
executed by `loopsmith.vm`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ARITH_KINDS = ("add", "mul", "max", "min")
EW_KINDS = ("identity", "relu", "sigmoid")


@dataclass(frozen=True)
class Guard:
    """0 <= const + sum(coeff*iter) < size, else the access yields fill."""

    const: int
    terms: tuple[tuple[int, int], ...]  # (var slot, coeff)
    size: int


@dataclass(frozen=True)
class Address:
    """buffer[const + sum(coeff * iter(slot))], optionally guarded."""

    buf: int
    const: int
    terms: tuple[tuple[int, int], ...] = ()
    guards: tuple[Guard, ...] = ()
    fill: float = 0.0

    def shifted(self, delta: int) -> "Address":
        return Address(self.buf, self.const + delta, self.terms, self.guards, self.fill)

    def key(self) -> tuple:
        return (self.buf, self.const, self.terms, self.guards, self.fill)


@dataclass(frozen=True)
class DynTrip:
    """Runtime trip-count clamp so split loops never overrun an ancestor
    dimension: trip = min(count, floor((root_size-1-base)/coeff) + 1).
    A loop may carry several clamps, one per padded ancestor."""

    root_size: int
    coeff: int
    base_const: int
    base_terms: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Instr:
    op: str
    dst: int = -1
    s1: int = -1
    s2: int = -1
    kind: str = ""
    addr: Optional[Address] = None
    imm: float = 0.0
    var: int = -1          # loop var slot
    count: int = 0         # static trip count
    step: int = 1          # iterator increment per trip
    dyn: tuple[DynTrip, ...] = ()
    stride: int = 0


@dataclass
class BufferInfo:
    name: str
    size: int                      # element count
    slot: Optional[int] = None     # external slot, None for scratch
    shape: tuple[int, ...] = ()


@dataclass
class RegionInfo:
    """Register-blocked span: accumulators of `node` live in registers from
    instruction `start` to `end` (exclusive)."""

    node: int
    start: int
    end: int
    accum_regs: tuple[int, ...]
    prologue_end: int
    epilogue_start: int


@dataclass
class KernelProgram:
    instrs: list[Instr]
    lanes: int
    vregs: int
    buffers: list[BufferInfo]
    var_names: list[str]
    regions: list[RegionInfo] = field(default_factory=list)

    # ---- textual disassembly (stable; used by golden tests and the UI) ----

    def _addr_text(self, a: Address) -> str:
        parts = []
        for slot, coeff in a.terms:
            name = self.var_names[slot]
            parts.append(name if coeff == 1 else f"{coeff}*{name}")
        if a.const or not parts:
            parts.append(str(a.const))
        buf = self.buffers[a.buf]
        label = f"ext{buf.slot}" if buf.slot is not None else f"buf{a.buf}"
        text = f"{label}[{' + '.join(parts)}]"
        if a.guards:
            gs = []
            for g in a.guards:
                gp = []
                for slot, coeff in g.terms:
                    name = self.var_names[slot]
                    gp.append(name if coeff == 1 else f"{coeff}*{name}")
                if g.const or not gp:
                    gp.append(str(g.const))
                gs.append(f"0<={' + '.join(gp)}<{g.size}")
            text += f" guard({'; '.join(gs)}, fill={a.fill:g})"
        return text

    def disassemble(self) -> str:
        lines = []
        depth = 0
        for ins in self.instrs:
            if ins.op == "loop.end":
                depth -= 1
            pad = "  " * depth
            lines.append(pad + self._instr_text(ins))
            if ins.op == "loop.begin":
                depth += 1
        return "\n".join(lines) + "\n"

    def _instr_text(self, ins: Instr) -> str:
        op = ins.op
        if op == "loop.begin":
            name = self.var_names[ins.var]
            extra = f" step={ins.step}" if ins.step != 1 else ""
            if ins.dyn:
                caps = ",".join(str(d.root_size) for d in ins.dyn)
                return f"loop.begin {name} x{ins.count} (clamped to {caps}){extra}"
            return f"loop.begin {name} x{ins.count}{extra}"
        if op == "loop.end":
            return "loop.end"
        if op in ("vload", "sload"):
            return f"{op} r{ins.dst}, {self._addr_text(ins.addr)}"
        if op == "vload.strided":
            return f"vload.strided r{ins.dst}, {self._addr_text(ins.addr)}, stride={ins.stride}"
        if op == "vbroadcast":
            if ins.addr is not None:
                return f"vbroadcast r{ins.dst}, {self._addr_text(ins.addr)}"
            return f"vbroadcast r{ins.dst}, {ins.imm:g}"
        if op in ("vstore", "sstore"):
            return f"{op} r{ins.s1}, {self._addr_text(ins.addr)}"
        if op in ("vop", "sop"):
            return f"{op}.{ins.kind} r{ins.dst}, r{ins.s1}, r{ins.s2}"
        if op in ("vfma", "sfma"):
            return f"{op} r{ins.dst}, r{ins.s1}, r{ins.s2}"
        if op == "vreduce":
            return f"vreduce.{ins.kind} r{ins.dst}, r{ins.s1}"
        if op == "post":
            return f"post.{ins.kind} r{ins.dst}"
        raise ValueError(f"unknown op {op!r}")

    # ---- dense encoding for the interpreter --------------------------------

    def encode(self) -> "EncodedProgram":
        return encode_program(self)


OPC = {
    "loop.begin": 0, "loop.end": 1, "vload": 2, "vload.strided": 3,
    "vbroadcast": 4, "vbroadcast.imm": 5, "vop": 6, "vfma": 7, "vreduce": 8,
    "vstore": 9, "sload": 10, "sop": 11, "sfma": 12, "sstore": 13, "post": 14,
}

KIND_CODE = {"add": 0, "mul": 1, "max": 2, "min": 3}
EW_CODE = {"identity": 0, "relu": 1, "sigmoid": 2}

#: counter slots (executed-instruction tallies by class)
COUNTERS = ("vload", "vload.strided", "vbroadcast", "vstore", "sload",
            "sstore", "vop", "vfma", "vreduce", "sop", "sfma", "post",
            "vbroadcast.imm", "loop")

MEM_COUNTERS = ("vload", "vload.strided", "vbroadcast", "vstore", "sload", "sstore")


@dataclass
class EncodedProgram:
    ops: np.ndarray          # int32[n]
    a: np.ndarray            # int32[n, 4]  op-specific fields
    f: np.ndarray            # float32[n]
    addr_buf: np.ndarray     # int32[A]
    addr_const: np.ndarray   # int64[A]
    addr_t0: np.ndarray      # int32[A] term range start
    addr_t1: np.ndarray      # int32[A]
    addr_g0: np.ndarray      # int32[A] guard range start
    addr_g1: np.ndarray      # int32[A]
    addr_fill: np.ndarray    # float32[A]
    term_slot: np.ndarray    # int32[T]
    term_coeff: np.ndarray   # int64[T]
    guard_const: np.ndarray  # int64[G]
    guard_size: np.ndarray   # int64[G]
    guard_t0: np.ndarray     # int32[G]
    guard_t1: np.ndarray     # int32[G]
    gterm_slot: np.ndarray   # int32
    gterm_coeff: np.ndarray  # int64
    dyn_root: np.ndarray     # int64[D]
    dyn_coeff: np.ndarray    # int64[D]
    dyn_const: np.ndarray    # int64[D]
    dyn_t0: np.ndarray       # int32[D]
    dyn_t1: np.ndarray       # int32[D]
    dterm_slot: np.ndarray
    dterm_coeff: np.ndarray
    buf_base: np.ndarray     # int64[B] arena offsets
    buf_size: np.ndarray     # int64[B]
    n_vars: int
    lanes: int
    vregs: int
    arena_size: int


def encode_program(p: KernelProgram) -> EncodedProgram:
    n = len(p.instrs)
    ops = np.zeros(n, np.int32)
    a = np.full((n, 5), -1, np.int32)
    f = np.zeros(n, np.float32)

    addrs: list[Address] = []
    addr_idx: dict[tuple, int] = {}

    def intern(addr: Address) -> int:
        k = addr.key()
        got = addr_idx.get(k)
        if got is None:
            got = len(addrs)
            addr_idx[k] = got
            addrs.append(addr)
        return got

    dyns: list[DynTrip] = []

    # match loop begin/end pairs
    stack = []
    end_of = {}
    begin_of = {}
    for i, ins in enumerate(p.instrs):
        if ins.op == "loop.begin":
            stack.append(i)
        elif ins.op == "loop.end":
            b = stack.pop()
            end_of[b] = i
            begin_of[i] = b
    if stack:
        raise ValueError("unbalanced loops")

    for i, ins in enumerate(p.instrs):
        op = ins.op
        if op == "vbroadcast" and ins.addr is None:
            op = "vbroadcast.imm"
        ops[i] = OPC[op]
        if op == "loop.begin":
            d0 = len(dyns)
            for d in ins.dyn:
                dyns.append(d)
            a[i] = (ins.var, ins.count, end_of[i], d0, len(dyns))
            f[i] = ins.step
        elif op == "loop.end":
            a[i, 0] = begin_of[i]
        elif op in ("vload", "sload"):
            a[i, 0] = ins.dst
            a[i, 1] = intern(ins.addr)
        elif op == "vload.strided":
            a[i, 0] = ins.dst
            a[i, 1] = intern(ins.addr)
            a[i, 2] = ins.stride
        elif op == "vbroadcast":
            a[i, 0] = ins.dst
            a[i, 1] = intern(ins.addr)
        elif op == "vbroadcast.imm":
            a[i, 0] = ins.dst
            f[i] = ins.imm
        elif op in ("vop", "sop"):
            a[i, 0] = KIND_CODE[ins.kind]
            a[i, 1] = ins.dst
            a[i, 2] = ins.s1
            a[i, 3] = ins.s2
        elif op in ("vfma", "sfma"):
            a[i, 0] = ins.dst
            a[i, 1] = ins.s1
            a[i, 2] = ins.s2
        elif op == "vreduce":
            a[i, 0] = KIND_CODE[ins.kind]
            a[i, 1] = ins.dst
            a[i, 2] = ins.s1
        elif op in ("vstore", "sstore"):
            a[i, 0] = ins.s1
            a[i, 1] = intern(ins.addr)
        elif op == "post":
            a[i, 0] = EW_CODE[ins.kind]
            a[i, 1] = ins.dst
        else:
            raise ValueError(op)

    # flatten address/guard/dyn tables
    term_slot, term_coeff = [], []
    guard_const, guard_size, guard_t0, guard_t1 = [], [], [], []
    gterm_slot, gterm_coeff = [], []
    A = len(addrs)
    addr_buf = np.zeros(A, np.int32)
    addr_const = np.zeros(A, np.int64)
    addr_t0 = np.zeros(A, np.int32)
    addr_t1 = np.zeros(A, np.int32)
    addr_g0 = np.zeros(A, np.int32)
    addr_g1 = np.zeros(A, np.int32)
    addr_fill = np.zeros(A, np.float32)
    for j, ad in enumerate(addrs):
        addr_buf[j] = ad.buf
        addr_const[j] = ad.const
        addr_t0[j] = len(term_slot)
        for slot, coeff in ad.terms:
            term_slot.append(slot)
            term_coeff.append(coeff)
        addr_t1[j] = len(term_slot)
        addr_g0[j] = len(guard_const)
        for g in ad.guards:
            guard_const.append(g.const)
            guard_size.append(g.size)
            guard_t0.append(len(gterm_slot))
            for slot, coeff in g.terms:
                gterm_slot.append(slot)
                gterm_coeff.append(coeff)
            guard_t1.append(len(gterm_slot))
        addr_g1[j] = len(guard_const)
        addr_fill[j] = ad.fill

    D = len(dyns)
    dyn_root = np.zeros(D, np.int64)
    dyn_coeff = np.ones(D, np.int64)
    dyn_const = np.zeros(D, np.int64)
    dyn_t0 = np.zeros(D, np.int32)
    dyn_t1 = np.zeros(D, np.int32)
    dterm_slot, dterm_coeff = [], []
    for j, d in enumerate(dyns):
        dyn_root[j] = d.root_size
        dyn_coeff[j] = d.coeff
        dyn_const[j] = d.base_const
        dyn_t0[j] = len(dterm_slot)
        for slot, coeff in d.base_terms:
            dterm_slot.append(slot)
            dterm_coeff.append(coeff)
        dyn_t1[j] = len(dterm_slot)

    buf_base = np.zeros(len(p.buffers), np.int64)
    buf_size = np.zeros(len(p.buffers), np.int64)
    off = 0
    for j, b in enumerate(p.buffers):
        buf_base[j] = off
        buf_size[j] = b.size
        off += b.size

    def arr(x, dt):
        return np.asarray(x, dt) if x else np.zeros(0, dt)

    return EncodedProgram(
        ops=ops, a=a, f=f,
        addr_buf=addr_buf, addr_const=addr_const, addr_t0=addr_t0,
        addr_t1=addr_t1, addr_g0=addr_g0, addr_g1=addr_g1, addr_fill=addr_fill,
        term_slot=arr(term_slot, np.int32), term_coeff=arr(term_coeff, np.int64),
        guard_const=arr(guard_const, np.int64), guard_size=arr(guard_size, np.int64),
        guard_t0=arr(guard_t0, np.int32), guard_t1=arr(guard_t1, np.int32),
        gterm_slot=arr(gterm_slot, np.int32), gterm_coeff=arr(gterm_coeff, np.int64),
        dyn_root=dyn_root, dyn_coeff=dyn_coeff, dyn_const=dyn_const,
        dyn_t0=dyn_t0, dyn_t1=dyn_t1,
        dterm_slot=arr(dterm_slot, np.int32), dterm_coeff=arr(dterm_coeff, np.int64),
        buf_base=buf_base, buf_size=buf_size,
        n_vars=len(p.var_names), lanes=p.lanes, vregs=p.vregs,
        arena_size=off,
    )
