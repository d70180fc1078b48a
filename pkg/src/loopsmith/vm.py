"""Interpreter for kernel programs.

The dispatch core is a single flat function over dense arrays so numba can
compile it; without numba the same function runs as plain Python (slow but
identical semantics -- useful for debugging and as a cross-check in tests).
f32 arithmetic throughout, matching the compiled kernels' element type.
"""

from __future__ import annotations

import math

import numpy as np

from .program import COUNTERS, EncodedProgram

_MAX_DEPTH = 64


def _run(ops, a, f, addr_buf, addr_const, addr_t0, addr_t1, addr_g0, addr_g1,
         addr_fill, term_slot, term_coeff, guard_const, guard_size, guard_t0,
         guard_t1, gterm_slot, gterm_coeff, dyn_root, dyn_coeff, dyn_const,
         dyn_t0, dyn_t1, dterm_slot, dterm_coeff, buf_base, buf_size,
         arena, regs, iters, counters, lanes):
    n = ops.shape[0]
    stack_begin = np.empty(_MAX_DEPTH, np.int64)
    stack_trip = np.empty(_MAX_DEPTH, np.int64)
    stack_done = np.empty(_MAX_DEPTH, np.int64)
    sp = 0
    pc = 0
    while pc < n:
        op = ops[pc]
        if op == 0:  # loop.begin
            var = a[pc, 0]
            trip = a[pc, 1]
            for d in range(a[pc, 3], a[pc, 4]):
                base = dyn_const[d]
                for t in range(dyn_t0[d], dyn_t1[d]):
                    base += dterm_coeff[t] * iters[dterm_slot[t]]
                room = (dyn_root[d] - 1 - base) // dyn_coeff[d] + 1
                if room < trip:
                    trip = room
            counters[13] += 1
            if trip <= 0:
                pc = a[pc, 2] + 1
                continue
            stack_begin[sp] = pc
            stack_trip[sp] = trip
            stack_done[sp] = 1
            sp += 1
            iters[var] = 0
            pc += 1
            continue
        if op == 1:  # loop.end
            b = a[pc, 0]
            if stack_done[sp - 1] < stack_trip[sp - 1]:
                stack_done[sp - 1] += 1
                iters[a[b, 0]] += int(f[b])
                pc = b + 1
            else:
                sp -= 1
                pc += 1
            continue

        if op == 2:  # vload
            ad = a[pc, 1]
            off = addr_const[ad]
            for t in range(addr_t0[ad], addr_t1[ad]):
                off += term_coeff[t] * iters[term_slot[t]]
            base = buf_base[addr_buf[ad]] + off
            dst = a[pc, 0]
            for l in range(lanes):
                regs[dst, l] = arena[base + l]
            counters[0] += 1
        elif op == 3:  # vload.strided
            ad = a[pc, 1]
            off = addr_const[ad]
            for t in range(addr_t0[ad], addr_t1[ad]):
                off += term_coeff[t] * iters[term_slot[t]]
            base = buf_base[addr_buf[ad]] + off
            stride = a[pc, 2]
            dst = a[pc, 0]
            for l in range(lanes):
                regs[dst, l] = arena[base + l * stride]
            counters[1] += 1
        elif op == 4:  # vbroadcast (memory)
            ad = a[pc, 1]
            ok = True
            for g in range(addr_g0[ad], addr_g1[ad]):
                x = guard_const[g]
                for t in range(guard_t0[g], guard_t1[g]):
                    x += gterm_coeff[t] * iters[gterm_slot[t]]
                if x < 0 or x >= guard_size[g]:
                    ok = False
            if ok:
                off = addr_const[ad]
                for t in range(addr_t0[ad], addr_t1[ad]):
                    off += term_coeff[t] * iters[term_slot[t]]
                val = arena[buf_base[addr_buf[ad]] + off]
            else:
                val = addr_fill[ad]
            dst = a[pc, 0]
            for l in range(lanes):
                regs[dst, l] = val
            counters[2] += 1
        elif op == 5:  # vbroadcast.imm
            dst = a[pc, 0]
            val = f[pc]
            for l in range(lanes):
                regs[dst, l] = val
            counters[12] += 1
        elif op == 6:  # vop
            kind = a[pc, 0]
            dst = a[pc, 1]
            s1 = a[pc, 2]
            s2 = a[pc, 3]
            if kind == 0:
                for l in range(lanes):
                    regs[dst, l] = regs[s1, l] + regs[s2, l]
            elif kind == 1:
                for l in range(lanes):
                    regs[dst, l] = regs[s1, l] * regs[s2, l]
            elif kind == 2:
                for l in range(lanes):
                    regs[dst, l] = max(regs[s1, l], regs[s2, l])
            else:
                for l in range(lanes):
                    regs[dst, l] = min(regs[s1, l], regs[s2, l])
            counters[6] += 1
        elif op == 7:  # vfma
            dst = a[pc, 0]
            s1 = a[pc, 1]
            s2 = a[pc, 2]
            for l in range(lanes):
                regs[dst, l] = regs[dst, l] + regs[s1, l] * regs[s2, l]
            counters[7] += 1
        elif op == 8:  # vreduce
            kind = a[pc, 0]
            dst = a[pc, 1]
            src = a[pc, 2]
            acc = regs[src, 0]
            if kind == 0:
                for l in range(1, lanes):
                    acc = acc + regs[src, l]
                ident = np.float32(0.0)
            elif kind == 1:
                for l in range(1, lanes):
                    acc = acc * regs[src, l]
                ident = np.float32(1.0)
            elif kind == 2:
                for l in range(1, lanes):
                    acc = max(acc, regs[src, l])
                ident = np.float32(-np.inf)
            else:
                for l in range(1, lanes):
                    acc = min(acc, regs[src, l])
                ident = np.float32(np.inf)
            for l in range(lanes):
                regs[dst, l] = ident
            regs[dst, 0] = acc
            counters[8] += 1
        elif op == 9:  # vstore
            ad = a[pc, 1]
            off = addr_const[ad]
            for t in range(addr_t0[ad], addr_t1[ad]):
                off += term_coeff[t] * iters[term_slot[t]]
            base = buf_base[addr_buf[ad]] + off
            src = a[pc, 0]
            for l in range(lanes):
                arena[base + l] = regs[src, l]
            counters[3] += 1
        elif op == 10:  # sload
            ad = a[pc, 1]
            ok = True
            for g in range(addr_g0[ad], addr_g1[ad]):
                x = guard_const[g]
                for t in range(guard_t0[g], guard_t1[g]):
                    x += gterm_coeff[t] * iters[gterm_slot[t]]
                if x < 0 or x >= guard_size[g]:
                    ok = False
            if ok:
                off = addr_const[ad]
                for t in range(addr_t0[ad], addr_t1[ad]):
                    off += term_coeff[t] * iters[term_slot[t]]
                regs[a[pc, 0], 0] = arena[buf_base[addr_buf[ad]] + off]
            else:
                regs[a[pc, 0], 0] = addr_fill[ad]
            counters[4] += 1
        elif op == 11:  # sop
            kind = a[pc, 0]
            dst = a[pc, 1]
            s1 = a[pc, 2]
            s2 = a[pc, 3]
            if kind == 0:
                regs[dst, 0] = regs[s1, 0] + regs[s2, 0]
            elif kind == 1:
                regs[dst, 0] = regs[s1, 0] * regs[s2, 0]
            elif kind == 2:
                regs[dst, 0] = max(regs[s1, 0], regs[s2, 0])
            else:
                regs[dst, 0] = min(regs[s1, 0], regs[s2, 0])
            counters[9] += 1
        elif op == 12:  # sfma
            dst = a[pc, 0]
            regs[dst, 0] = regs[dst, 0] + regs[a[pc, 1], 0] * regs[a[pc, 2], 0]
            counters[10] += 1
        elif op == 13:  # sstore
            ad = a[pc, 1]
            off = addr_const[ad]
            for t in range(addr_t0[ad], addr_t1[ad]):
                off += term_coeff[t] * iters[term_slot[t]]
            arena[buf_base[addr_buf[ad]] + off] = regs[a[pc, 0], 0]
            counters[5] += 1
        elif op == 14:  # post
            kind = a[pc, 0]
            dst = a[pc, 1]
            if kind == 1:
                for l in range(lanes):
                    regs[dst, l] = max(regs[dst, l], np.float32(0.0))
            elif kind == 2:
                for l in range(lanes):
                    x = float(regs[dst, l])
                    if x >= 0.0:
                        regs[dst, l] = np.float32(1.0 / (1.0 + math.exp(-x)))
                    else:
                        e = math.exp(x)
                        regs[dst, l] = np.float32(e / (1.0 + e))
            counters[11] += 1
        pc += 1
    return 0


_run_py = _run
try:
    import numba

    _run_jit = numba.njit(cache=True, fastmath=False)(_run)
    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is a hard dep, kept soft anyway
    _run_jit = None
    HAVE_NUMBA = False

#: flip to force the pure-Python interpreter (tests use this to cross-check)
FORCE_PYTHON = False


def run(enc: EncodedProgram, arena: np.ndarray, counters: np.ndarray) -> None:
    regs = np.zeros((enc.vregs, enc.lanes), np.float32)
    iters = np.zeros(max(enc.n_vars, 1), np.int64)
    fn = _run_py if (FORCE_PYTHON or _run_jit is None) else _run_jit
    fn(enc.ops, enc.a, enc.f, enc.addr_buf, enc.addr_const, enc.addr_t0,
       enc.addr_t1, enc.addr_g0, enc.addr_g1, enc.addr_fill, enc.term_slot,
       enc.term_coeff, enc.guard_const, enc.guard_size, enc.guard_t0,
       enc.guard_t1, enc.gterm_slot, enc.gterm_coeff, enc.dyn_root,
       enc.dyn_coeff, enc.dyn_const, enc.dyn_t0, enc.dyn_t1, enc.dterm_slot,
       enc.dterm_coeff, enc.buf_base, enc.buf_size, arena, regs, iters,
       counters, enc.lanes)


_warm = False


def warmup() -> None:
    """Trigger the one-time JIT compilation of the dispatch core."""
    global _warm
    if _warm or _run_jit is None:
        return
    from .program import Address, BufferInfo, Instr, KernelProgram

    prog = KernelProgram(
        instrs=[
            Instr("loop.begin", var=0, count=2),
            Instr("sload", dst=0, addr=Address(0, 0, ((0, 1),))),
            Instr("sstore", s1=0, addr=Address(1, 0, ((0, 1),))),
            Instr("loop.end"),
        ],
        lanes=4, vregs=16,
        buffers=[BufferInfo("a", 2, 0, (2,)), BufferInfo("b", 2, 1, (2,))],
        var_names=["i"],
    )
    enc = prog.encode()
    arena = np.zeros(enc.arena_size, np.float32)
    counters = np.zeros(len(COUNTERS), np.int64)
    run(enc, arena, counters)
    _warm = True
