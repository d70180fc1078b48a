import numpy as np
import pytest

import loopsmith as ls
from loopsmith.ir import Arith, Read, View, Write

import op_graphs


def test_define_var_examples():
    m = ls.define_var("m", 512)
    assert m.size == 512
    one = ls.define_var("k", 1)
    assert one.size == 1
    with pytest.raises(ls.SizeError):
        ls.define_var("m", 0)


def test_matmul_structure_matches_two_node_form():
    g = ls.matmul_graph(4, 3, 5)
    kinds = [type(n.kind).__name__ for n in g]
    assert kinds == ["Read", "Read", "Arith", "Arith", "Write"]
    mul, add = g[2], g[3]
    assert mul.kind.op == "mul" and len(mul.inputs) == 2
    assert [d.name for d in mul.output.dims] == ["m", "k", "n"]
    assert add.kind.op == "add"
    assert [d.name for d in g.reduction_dims(add)] == ["k"]


def test_identity_contraction_is_pure_copy():
    g = ls.GraphBuilder()
    r = g.var("r", 6)
    x = g.input("x", [r])
    o = g.contract("o", (r,), x[r])
    g.output(o)
    dfg = g.build()
    # no arithmetic node: the write consumes the read directly
    kinds = [type(n.kind).__name__ for n in dfg]
    assert kinds == ["Read", "Write"]


def test_pooling_becomes_view_plus_max_reduce():
    dfg = op_graphs.maxpool2x2(4)
    kinds = [type(n.kind).__name__ for n in dfg]
    assert kinds == ["Read", "View", "Arith", "Write"]
    view, red = dfg[1], dfg[2]
    assert view.kind.guarded is False
    assert red.kind.op == "max"
    assert {d.name for d in dfg.reduction_dims(red)} == {"kr", "kc"}


def test_out_of_range_window_rejected():
    g = ls.GraphBuilder()
    r = g.var("r", 31)  # 31 + 2 overruns a 32-wide input
    kk = g.var("q", 3)
    x = g.input("x", [g.var("p", 32)])
    with pytest.raises(ls.IncompatibleDims):
        g.contract("o", (r,), x[r + kk])


def test_incompatible_rank_rejected():
    g = ls.GraphBuilder()
    r = g.var("r", 4)
    x = g.input("x", [r])
    with pytest.raises(ls.IncompatibleDims):
        x[r, r]


def test_concat_offsets_prefix_sum():
    # parts [2], [5], [1] -> offsets 0, 2, 7 (prefix-sum oracle)
    g = ls.GraphBuilder()
    sizes = [2, 5, 1]
    parts = []
    for i, s in enumerate(sizes):
        v = g.var(f"p{i}", s)
        t = g.input(f"x{i}", [v])
        parts.append(t[v])
    r = g.var("r", sum(sizes))
    o = g.concat("o", parts, r)
    g.output(o)
    dfg = g.build()
    views = [n for n in dfg if isinstance(n.kind, View)]
    offsets = sorted(-v.kind.constraints[0].offset for v in views)
    expected = [0]
    for s in sizes[:-1]:
        expected.append(expected[-1] + s)
    assert offsets == expected
    assert all(v.kind.guarded for v in views)


def test_concat_single_part_is_identity_view():
    g = ls.GraphBuilder()
    p = g.var("p", 4)
    x = g.input("x", [p])
    r = g.var("r", 4)
    o = g.concat("o", [x[p]], r)
    g.output(o)
    dfg = g.build()
    view = next(n for n in dfg if isinstance(n.kind, View))
    assert view.kind.constraints[0].offset == 0
    buf = {0: np.arange(4, dtype=np.float32)}
    out = ls.reference_eval(dfg, buf)
    assert np.array_equal(out[1], np.arange(4.0))


def test_concat_two_2d_parts():
    dfg = op_graphs.concat2(4, 3, 3)
    rng = np.random.default_rng(0)
    a = rng.integers(0, 9, (4, 3)).astype(np.float32)
    b = rng.integers(0, 9, (4, 3)).astype(np.float32)
    out = ls.reference_eval(dfg, {0: a, 1: b})
    # brute-force copy oracle
    want = np.concatenate([a, b], axis=1)
    assert np.array_equal(out[2], want)


def test_broadcast_add_replicates_exactly():
    dfg = op_graphs.broadcast_add(5, 7)
    rng = np.random.default_rng(1)
    a = rng.integers(-4, 5, (5,)).astype(np.float32)
    b = rng.integers(-4, 5, (5, 7)).astype(np.float32)
    out = ls.reference_eval(dfg, {0: a, 1: b})
    assert np.max(np.abs(out[2] - (a[:, None] + b))) == 0.0


@pytest.mark.parametrize("name", sorted(op_graphs.ACCEPTANCE_OPS))
def test_frontend_graphs_match_direct_formulas(name):
    """Round trip: the built graph evaluated naively equals a dense-loop
    evaluation of the source formula."""
    dfg = op_graphs.ACCEPTANCE_OPS[name]()
    rng = np.random.default_rng(42)
    bufs = op_graphs.random_inputs(dfg, rng)
    got = ls.reference_eval(dfg, bufs)
    want = _direct_formula(name, bufs)
    for slot, ref in want.items():
        assert np.allclose(got[slot], ref, rtol=1e-6), name


def _direct_formula(name, bufs):
    if name in ("mm16", "mm64"):
        return {2: bufs[0].astype(np.float64) @ bufs[1].astype(np.float64)}
    if name == "conv1d":
        x, w = bufs[0].astype(np.float64), bufs[1].astype(np.float64)
        n = x.size - w.size + 1
        out = np.zeros(n)
        for r in range(n):
            for q in range(w.size):
                out[r] += x[r + q] * w[q]
        return {2: out}
    if name == "maxpool":
        x = bufs[0].astype(np.float64)
        h = x.shape[0] // 2
        out = np.full((h, h), -np.inf)
        for r in range(h):
            for c in range(h):
                for kr in range(2):
                    for kc in range(2):
                        out[r, c] = max(out[r, c], x[2 * r + kr, 2 * c + kc])
        return {1: out}
    if name == "transpose":
        return {1: bufs[0].astype(np.float64).T}
    if name == "concat":
        return {2: np.concatenate([bufs[0], bufs[1]], axis=1).astype(np.float64)}
    if name == "broadcast_add":
        return {2: bufs[0].astype(np.float64)[:, None] + bufs[1]}
    if name == "mlp3":
        x, w1, w2, w3 = (bufs[i].astype(np.float64) for i in range(4))
        h1 = np.maximum(x @ w1.T, 0.0)
        h2 = np.maximum(h1 @ w2.T, 0.0)
        return {4: 1.0 / (1.0 + np.exp(-(h2 @ w3.T)))}
    raise AssertionError(name)
