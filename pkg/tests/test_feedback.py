import random

import numpy as np
import pytest

import loopsmith as ls
from loopsmith import schedule as sch

import op_graphs
from schedule_fuzz import random_actions


def test_flops_mm512():
    assert ls.count_flops(ls.matmul_graph(512, 512, 512)) == 268_435_456


def test_flops_relu_map():
    g = ls.GraphBuilder()
    n = g.var("n", 1000)
    x = g.input("x", [n])
    o = g.contract("o", (n,), x[n], post="relu")
    g.output(o)
    assert ls.count_flops(g.build()) == 1000


def test_flops_schedule_invariant():
    g = ls.matmul_graph(512, 512, 512)
    want = ls.count_flops(g)
    sch.split(g, sch.find_var(g, "m"), 5)
    sch.split(g, sch.find_var(g, "k"), 64)
    sch.stage(g, g[1], g[1].order[0])
    assert ls.count_flops(g) == want


def test_intensity_mm512():
    g = ls.matmul_graph(512, 512, 512)
    assert ls.bytes_moved(g) == 3_145_728  # 3 * 512^2 unique f32 elements
    exact = 268_435_456 / 3_145_728
    assert abs(ls.arithmetic_intensity(g) - exact) <= 1e-9
    assert abs(exact - 85.3333333) < 1e-3


def test_intensity_elementwise_relu():
    g = ls.GraphBuilder()
    n = g.var("n", 4096)
    x = g.input("x", [n])
    o = g.contract("o", (n,), x[n], post="relu")
    g.output(o)
    dfg = g.build()
    assert ls.arithmetic_intensity(dfg) == 4096 / (8 * 4096)


def test_intensity_broadcast_add_formula():
    m, n = 6, 10
    dfg = op_graphs.broadcast_add(m, n)
    # unique-element enumeration: read m + read m*n + write m*n
    assert ls.bytes_moved(dfg) == 4 * (m + 2 * m * n)
    assert ls.count_flops(dfg) == 2 * m * n
    assert ls.arithmetic_intensity(dfg) == (2 * m * n) / (4 * (m + 2 * m * n))


def test_analytics_invariant_under_50_mutations():
    rng = random.Random(17)
    g = ls.matmul_graph(512, 512, 512)
    f0, b0 = ls.count_flops(g), ls.bytes_moved(g)
    applied = 0
    while applied < 50:
        applied += len(random_actions(g, rng, n_actions=5, max_splits=6))
    assert ls.count_flops(g) == f0
    assert ls.bytes_moved(g) == b0


def test_reference_eval_identity_operand():
    # MM with B = identity: C = A under the default alpha=0, beta=1
    g = ls.matmul_graph(4, 4, 4)
    rng = np.random.default_rng(0)
    a = rng.integers(-3, 4, (4, 4)).astype(np.float32)
    out = ls.reference_eval(g, {0: a, 1: np.eye(4, dtype=np.float32)})
    assert np.array_equal(out[2], a.astype(np.float64))


def test_reference_eval_alpha_beta():
    # alpha=1, beta=0: the output is exactly the prior contents
    g = ls.matmul_graph(4, 4, 4, alpha=1.0, beta=0.0)
    rng = np.random.default_rng(1)
    bufs = {0: rng.random((4, 4)).astype(np.float32),
            1: rng.random((4, 4)).astype(np.float32),
            2: rng.random((4, 4)).astype(np.float32)}
    out = ls.reference_eval(g, bufs)
    assert np.allclose(out[2], bufs[2], rtol=1e-6)


def test_reference_eval_tropical_matmul():
    # (max, +) contraction against a brute-force oracle
    g = ls.GraphBuilder()
    m, k, n = g.var("m", 4), g.var("k", 4), g.var("n", 4)
    a, b = g.input("a", [m, k]), g.input("b", [k, n])
    o = g.contract("o", (m, n), a[m, k] + b[k, n], op_pair=("max", "add"))
    g.output(o)
    dfg = g.build()
    rng = np.random.default_rng(2)
    A = rng.integers(-5, 6, (4, 4)).astype(np.float32)
    B = rng.integers(-5, 6, (4, 4)).astype(np.float32)
    out = ls.reference_eval(dfg, {0: A, 1: B})
    want = np.full((4, 4), -np.inf)
    for i in range(4):
        for j in range(4):
            for kk in range(4):
                want[i, j] = max(want[i, j], A[i, kk] + B[kk, j])
    assert np.array_equal(out[2], want)


def test_maxpool_ramp_against_window_oracle():
    dfg = op_graphs.maxpool2x2(4)
    ramp = np.arange(16, dtype=np.float32).reshape(4, 4)
    out = ls.reference_eval(dfg, {0: ramp})
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    bufs = {0: ramp.copy()}
    ls.execute(kernel, bufs)
    want = np.array([[5, 7], [13, 15]], np.float64)
    assert np.array_equal(out[1], want)
    assert np.array_equal(bufs[1].reshape(2, 2).astype(np.float64), want)


def test_benchmark_single_run_and_determinism():
    dfg = op_graphs.mm(16, 16, 16)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    bufs = op_graphs.random_inputs(dfg, np.random.default_rng(0))
    s1 = ls.benchmark(kernel, dict(bufs), min_ms=0)
    assert s1.repeats == 1
    assert s1.flops == ls.count_flops(dfg)
    assert s1.arithmetic_intensity == s1.flops / s1.bytes_moved
    s2 = ls.benchmark(kernel, dict(bufs), min_ms=0)
    assert s1.vm_counters == s2.vm_counters
    assert s1.deterministic_json() == s2.deterministic_json()


def test_benchmark_repeats_until_min_ms():
    dfg = op_graphs.mm(8, 8, 8)
    kernel = ls.compile_tree(ls.lower(dfg), ls.avx2_like())
    bufs = op_graphs.random_inputs(dfg, np.random.default_rng(0))
    st = ls.benchmark(kernel, dict(bufs), min_ms=30)
    assert st.elapsed_ms >= 30 and st.repeats > 1
    assert st.gflops > 0


def test_blocked_mm_moves_less_memory_than_naive():
    naive = op_graphs.mm(256, 256, 256)
    k_naive = ls.compile_tree(ls.lower(naive), ls.avx512_like())
    bufs = op_graphs.random_inputs(naive, np.random.default_rng(0))
    ls.execute(k_naive, {s: b.copy() for s, b in bufs.items()})

    blocked = op_graphs.mm(256, 256, 256)
    sch.split(blocked, sch.find_var(blocked, "m"), 4)
    sch.split(blocked, sch.find_var(blocked, "n"), 64)
    order = ["m_o", "n_o", "k", "m_i", "n_i"]
    for node in blocked:
        names = [v.name for v in node.order]
        sch.apply_action(blocked, sch.ReorderAction(
            node.id, [nm for nm in order if nm in names]
            + [nm for nm in names if nm not in order]))
    k_blocked = ls.compile_tree(ls.lower(blocked), ls.avx512_like())
    ls.execute(k_blocked, {s: b.copy() for s, b in bufs.items()})
    assert k_blocked.memory_access_count() < k_naive.memory_access_count()


def test_bytes_moved_ignores_staging():
    g = ls.matmul_graph(64, 64, 64)
    b0 = ls.bytes_moved(g)
    sch.split(g, sch.find_var(g, "k"), 8)
    read_b = g[1]
    sch.stage(g, read_b, next(v for v in read_b.order if v.name == "k_i"))
    assert ls.bytes_moved(g) == b0
