import random

import numpy as np
import pytest

import loopsmith as ls
import loopsmith.vm as vm
from loopsmith import schedule as sch
from loopsmith.program import (Address, BufferInfo, COUNTERS, Guard, Instr,
                               KernelProgram, MEM_COUNTERS)

import op_graphs
from schedule_fuzz import random_actions


def blocked_mm512():
    g = ls.matmul_graph(512, 512, 512)
    sch.split(g, sch.find_var(g, "m"), 5)
    sch.split(g, sch.find_var(g, "n"), 64)
    sch.split(g, sch.find_var(g, "k"), 64)
    order = ["m_o", "n_o", "k_o", "k_i", "m_i", "n_i"]
    for node in g:
        names = [v.name for v in node.order]
        sch.apply_action(g, sch.ReorderAction(
            node.id, [nm for nm in order if nm in names]
            + [nm for nm in names if nm not in order]))
    return g


def test_5x64_block_uses_exactly_20_accumulators():
    # 5 * 64 f32 outputs / 16 lanes = 20 vector registers, within 32
    kernel = ls.compile_tree(ls.lower(blocked_mm512()), ls.avx512_like())
    counts = {len(r.accum_regs) for r in kernel.program.regions}
    assert counts == {20}


def test_transposed_innermost_falls_back_to_scalar():
    dfg = op_graphs.transpose(13, 7)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx512_like())
    v_compute = [i for i in kernel.program.instrs
                 if i.op in ("vop", "vfma", "vreduce")]
    assert v_compute == []
    # and it is still correct
    x = np.arange(13 * 7, dtype=np.float32).reshape(13, 7)
    bufs = {0: x.copy()}
    ls.execute(kernel, bufs)
    assert np.array_equal(bufs[1].reshape(7, 13), x.T)


def test_unit_stride_innermost_vectorizes():
    dfg = op_graphs.mm(16, 16, 32)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    assert any(i.op in ("vfma", "vop") for i in kernel.program.instrs)


def test_unroll_limit_one_materializes_every_loop():
    dfg = op_graphs.mm(16, 16, 16)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx512_like(), unroll_limit=1)
    assert kernel.unrolled_spans == []
    # nothing is replicated: every register block covers output loops only
    # through LoopBegin/LoopEnd, i.e. no block spans an output tile
    for r in kernel.program.regions:
        node = dfg[r.node]
        assert len(r.accum_regs) >= 1
    got = {0: np.eye(16, dtype=np.float32),
           1: np.arange(256, dtype=np.float32).reshape(16, 16)}
    ls.execute(kernel, got)
    assert np.array_equal(got[2].reshape(16, 16), got[1])


def test_huge_unroll_limit_flattens_register_block():
    g = ls.matmul_graph(64, 64, 64)
    sch.split(g, sch.find_var(g, "n"), 16)
    order = ["m", "n_o", "k", "n_i"]
    for node in g:
        names = [v.name for v in node.order]
        sch.apply_action(g, sch.ReorderAction(
            node.id, [nm for nm in order if nm in names]
            + [nm for nm in names if nm not in order]))
    kernel = ls.compile_tree(ls.lower(g), ls.avx512_like(), unroll_limit=10 ** 9)
    # inside every register-blocked span there are no loop instructions
    for r in kernel.program.regions:
        body = kernel.program.instrs[r.prologue_end:r.epilogue_start]
        assert all(i.op not in ("loop.begin", "loop.end") for i in body)


def no_spill_scan(kernel) -> int:
    """Zero loads/stores touching accumulator registers strictly inside any
    register-blocked region (between prologue and epilogue)."""
    violations = 0
    instrs = kernel.program.instrs
    for r in kernel.program.regions:
        accums = set(r.accum_regs)
        for ins in instrs[r.prologue_end:r.epilogue_start]:
            if ins.op in ("vstore", "sstore") and ins.s1 in accums:
                violations += 1
            if ins.op in ("vload", "sload", "vbroadcast", "vload.strided") \
                    and ins.dst in accums:
                violations += 1
    return violations


def stores_per_region_exit(kernel) -> bool:
    """Each accumulator unit is stored exactly once in the epilogue."""
    instrs = kernel.program.instrs
    for r in kernel.program.regions:
        stores = [i for i in instrs[r.epilogue_start:r.end]
                  if i.op in ("vstore", "sstore")]
        rotation = len(r.accum_regs) // max(
            len({i.s1 for i in stores}), 1)
        if len({i.s1 for i in stores}) != len(stores):
            return False
    return True


def test_no_spill_and_single_store_on_blocked_mm():
    kernel = ls.compile_tree(ls.lower(blocked_mm512()), ls.avx512_like())
    assert kernel.program.regions
    assert no_spill_scan(kernel) == 0
    assert stores_per_region_exit(kernel)


def test_unrolled_spans_within_limit():
    for limit in (16, 64, 320):
        kernel = ls.compile_tree(ls.lower(blocked_mm512()), ls.avx512_like(),
                                 unroll_limit=limit)
        for a, b in kernel.unrolled_spans:
            assert b - a <= limit, (limit, b - a)


def test_compile_deterministic():
    t = ls.avx512_like()
    d1 = ls.compile_tree(ls.lower(blocked_mm512()), t).disassemble()
    d2 = ls.compile_tree(ls.lower(blocked_mm512()), t).disassemble()
    assert d1 == d2


def test_tail_peeling_specializes_last_iteration():
    g = ls.matmul_graph(23, 8, 16)
    sch.split(g, sch.find_var(g, "m"), 5)  # 23 = 4*5 + 3
    order = ["m_o", "k", "m_i", "n"]
    for node in g:
        names = [v.name for v in node.order]
        sch.apply_action(g, sch.ReorderAction(
            node.id, [nm for nm in order if nm in names]
            + [nm for nm in names if nm not in order]))
    kernel = ls.compile_tree(ls.lower(g), ls.avx2_like())
    # the peeled epilogue means the m_o loop body runs count-1 times
    begins = [i for i in kernel.program.instrs if i.op == "loop.begin"]
    mo = [i for i in begins if kernel.program.var_names[i.var] == "m_o"]
    assert mo and mo[0].count == 4
    rng = np.random.default_rng(0)
    a = rng.integers(-3, 4, (23, 8)).astype(np.float32)
    b = rng.integers(-3, 4, (8, 16)).astype(np.float32)
    bufs = {0: a.copy(), 1: b.copy()}
    ls.execute(kernel, bufs)
    assert np.array_equal(bufs[2].reshape(23, 16).astype(np.float64),
                          a.astype(np.float64) @ b)


def test_single_operand_paths():
    # transpose
    k = ls.compile_single_operand(ls.lower(op_graphs.transpose(3, 2)),
                                  ls.neon_like())
    bufs = {0: np.arange(6, dtype=np.float32).reshape(3, 2)}
    ls.execute(k, bufs)
    assert np.array_equal(bufs[1].reshape(2, 3), bufs[0].T)

    # identity reshape 6 -> 2x3 is bitwise equal
    g = ls.GraphBuilder()
    r, c = g.var("r", 2), g.var("c", 3)
    x = g.input("x", [g.var("p", 6)])
    o = g.contract("o", (r, c), x[3 * r + c])
    g.output(o)
    dfg = g.build()
    k = ls.compile_single_operand(ls.lower(dfg), ls.avx2_like())
    bufs = {0: np.linspace(0.1, 0.6, 6, dtype=np.float32)}
    ls.execute(k, bufs)
    assert np.array_equal(bufs[1].reshape(-1), bufs[0])

    # broadcast O[r,c] = I[r], rows replicated (loop oracle)
    g = ls.GraphBuilder()
    r, c = g.var("r", 2), g.var("c", 3)
    x = g.input("x", [r])
    o = g.contract("o", (r, c), x[r])
    g.output(o)
    dfg = g.build()
    k = ls.compile_single_operand(ls.lower(dfg), ls.avx2_like())
    bufs = {0: np.array([4.0, 7.0], np.float32)}
    ls.execute(k, bufs)
    want = np.array([[4, 4, 4], [7, 7, 7]], np.float64)
    assert np.array_equal(bufs[1].reshape(2, 3).astype(np.float64), want)


def test_single_operand_rejects_reductions():
    with pytest.raises(ls.HasReduction):
        ls.compile_single_operand(ls.lower(op_graphs.mm(4, 4, 4)),
                                  ls.avx2_like())
    with pytest.raises(ValueError):
        ls.compile_single_operand(ls.lower(op_graphs.concat2()),
                                  ls.avx2_like())


def test_multi_nest_trees_concatenate():
    # two independent pipelines in one graph -> one kernel, both outputs
    g = ls.GraphBuilder()
    r, s = g.var("r", 8), g.var("s", 6)
    x, y = g.input("x", [r]), g.input("y", [s])
    o1 = g.contract("o1", (r,), x[r], post="relu")
    o2 = g.contract("o2", (s,), y[s], post="relu")
    g.output(o1)
    g.output(o2)
    dfg = g.build()
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    bufs = {0: np.array([-1, 2, -3, 4, -5, 6, -7, 8], np.float32),
            1: np.arange(-3, 3, dtype=np.float32)}
    ls.execute(kernel, bufs)
    assert np.array_equal(bufs[2], np.maximum(bufs[0], 0))
    assert np.array_equal(bufs[3], np.maximum(bufs[1], 0))


def test_block_too_large_when_a_point_needs_too_many_registers():
    g = ls.GraphBuilder()
    r = g.var("r", 4)
    xs = [g.input(f"x{i}", [r]) for i in range(12)]
    expr = xs[0][r]
    for t in xs[1:]:
        expr = expr + t[r]
    o = g.contract("o", (r,), expr)
    g.output(o)
    dfg = g.build()
    with pytest.raises(ls.BlockTooLarge):
        ls.compile_tree(ls.lower(dfg), ls.avx2_like())


def test_counters_reset_per_execution():
    dfg = op_graphs.mm(8, 8, 8)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    rng = np.random.default_rng(0)
    bufs = op_graphs.random_inputs(dfg, rng)
    ls.execute(kernel, bufs)
    c1 = dict(kernel.counters)
    ls.execute(kernel, bufs)
    assert kernel.counters == c1


def test_execute_shape_mismatch():
    dfg = op_graphs.mm(8, 8, 8)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    with pytest.raises(ls.ShapeMismatch):
        ls.execute(kernel, {0: np.zeros((4, 4), np.float32),
                            1: np.zeros((8, 8), np.float32)})
    with pytest.raises(ls.ShapeMismatch):
        ls.execute(kernel, {0: np.zeros((8, 8), np.float32)})


def test_guarded_concat_compiles_scalar_and_correct():
    dfg = op_graphs.concat2(4, 3, 3)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx512_like())
    rng = np.random.default_rng(2)
    a = rng.integers(0, 9, (4, 3)).astype(np.float32)
    b = rng.integers(0, 9, (4, 3)).astype(np.float32)
    bufs = {0: a.copy(), 1: b.copy()}
    ls.execute(kernel, bufs)
    assert np.array_equal(bufs[2].reshape(4, 6),
                          np.concatenate([a, b], axis=1))
    # guarded accesses stay scalar
    guarded = [i for i in kernel.program.instrs
               if i.addr is not None and i.addr.guards]
    assert guarded and all(i.op in ("sload", "vbroadcast") for i in guarded)


def test_vm_python_and_jit_agree():
    dfg = op_graphs.mlp3()
    kernel = ls.compile_tree(ls.lower(dfg), ls.neon_like())
    rng = np.random.default_rng(3)
    bufs = op_graphs.random_inputs(dfg, rng)
    jit = {s: b.copy() for s, b in bufs.items()}
    ls.execute(kernel, jit)
    c_jit = dict(kernel.counters)
    vm.FORCE_PYTHON = True
    try:
        py = {s: b.copy() for s, b in bufs.items()}
        ls.execute(kernel, py)
    finally:
        vm.FORCE_PYTHON = False
    assert np.array_equal(jit[4], py[4])
    assert kernel.counters == c_jit


def test_vm_strided_load_opcode():
    prog = KernelProgram(
        instrs=[
            Instr("loop.begin", var=0, count=2),
            Instr("vload.strided", dst=0, addr=Address(0, 0, ((0, 1),)),
                  stride=2),
            Instr("vstore", s1=0, addr=Address(1, 0, ((0, 4),))),
            Instr("loop.end"),
        ],
        lanes=4, vregs=16,
        buffers=[BufferInfo("in", 16, 0, (16,)), BufferInfo("out", 16, 1, (16,))],
        var_names=["i"],
    )
    enc = prog.encode()
    arena = np.zeros(enc.arena_size, np.float32)
    arena[:16] = np.arange(16)
    counters = np.zeros(len(COUNTERS), np.int64)
    vm.run(enc, arena, counters)
    # i=0 gathers [0,2,4,6]; i=1 starts at 1: [1,3,5,7]
    assert np.array_equal(arena[16:20], [0, 2, 4, 6])
    assert np.array_equal(arena[20:24], [1, 3, 5, 7])
    assert counters[COUNTERS.index("vload.strided")] == 2


def test_memory_access_counter_matches_instruction_classes():
    dfg = op_graphs.mm(8, 8, 8)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    bufs = op_graphs.random_inputs(dfg, np.random.default_rng(0))
    ls.execute(kernel, bufs)
    assert kernel.memory_access_count() == sum(
        kernel.counters[k] for k in MEM_COUNTERS)


def test_fuzzed_kernels_satisfy_structural_invariants():
    """Random schedules: no spills, unroll spans within limit, vector/scalar
    totality per body."""
    rng = random.Random(9)
    targets = [ls.avx512_like, ls.avx2_like, ls.neon_like]
    for i in range(120):
        name = rng.choice(sorted(op_graphs.ACCEPTANCE_OPS))
        dfg = op_graphs.ACCEPTANCE_OPS[name]()
        random_actions(dfg, rng, max_splits=2)
        limit = rng.choice([1, 32, 320])
        kernel = ls.compile_tree(ls.lower(dfg), targets[rng.randrange(3)](),
                                 unroll_limit=limit)
        assert no_spill_scan(kernel) == 0
        for a, b in kernel.unrolled_spans:
            assert b - a <= limit
        for ins in kernel.program.instrs:
            assert max(ins.dst, ins.s1, ins.s2) < kernel.program.vregs
