import pytest
from hypothesis import given, strategies as st

import loopsmith as ls
from loopsmith.ir import Arith, DFG, Read, VirtualBuffer, Write


def test_matmul_graph_validates_clean():
    g = ls.matmul_graph(4, 3, 5)
    assert ls.validate(g) == []


def test_empty_graph_validates_clean():
    assert ls.validate(DFG()) == []


def test_order_not_permutation_reported():
    g = ls.matmul_graph(4, 3, 5)
    add = g[3]
    add.order = [v for v in add.order if v.name != "k"]  # drop k behind the API's back
    rules = [v.rule for v in ls.validate(g)]
    assert "order-not-permutation" in rules


def test_read_with_inputs_reported():
    g = ls.matmul_graph(2, 2, 2)
    g[0].inputs = (1,)
    assert "read-has-inputs" in [v.rule for v in ls.validate(g)]


def test_dangling_node_reported():
    g = DFG()
    v = ls.Var("i", 3)
    g.add(Read(0), (), VirtualBuffer("a", (v,)))
    assert "dangling" in [v_.rule for v_ in ls.validate(g)]


def test_cycle_detected():
    g = DFG()
    v = ls.Var("i", 3)
    g.add(Read(0), (), VirtualBuffer("a", (v,)))
    g.add(Arith("add"), (0,), VirtualBuffer("b", (v,)))
    g.add(Arith("add"), (1,), VirtualBuffer("c", (v,)))
    g.add(Write(1), (2,), VirtualBuffer("o", (v,)))
    g[1].inputs = (0, 2)  # close the b <-> c cycle behind the API's back
    assert [x.rule for x in ls.validate(g)] == ["cyclic"]
    with pytest.raises(ls.CycleError):
        g.topo_order()


def test_topo_matmul_order():
    g = ls.matmul_graph(4, 3, 5)
    # read a, read b, multiply, reduce-add, write
    assert g.topo_order() == [0, 1, 2, 3, 4]


def test_topo_chain():
    g = DFG()
    v = ls.Var("i", 3)
    g.add(Read(0), (), VirtualBuffer("a", (v,)))
    g.add(Write(1), (0,), VirtualBuffer("o", (v,)))
    assert g.topo_order() == [0, 1]


def test_topo_diamond_tie_break():
    # read -> {f, g} -> h: both orders valid; ascending-id tie break picks f
    # (enumerated: valid topological orders are [0,1,2,3] and [0,2,1,3])
    g = DFG()
    v = ls.Var("i", 3)
    g.add(Read(0), (), VirtualBuffer("a", (v,)))
    g.add(Arith("add"), (0,), VirtualBuffer("f", (v,)))
    g.add(Arith("add"), (0,), VirtualBuffer("g", (v,)))
    g.add(Arith("add", post="relu"), (1, 2), VirtualBuffer("h", (v,)))
    g.add(Write(1), (3,), VirtualBuffer("o", (v,)))
    assert g.topo_order() == [0, 1, 2, 3, 4]


def test_topo_independent_of_insertion_jitter():
    # same shape, nodes pre-registered in a different dict order
    g = ls.matmul_graph(4, 3, 5)
    shuffled = DFG()
    shuffled._next = g._next
    for nid in [4, 2, 0, 3, 1]:
        shuffled.nodes[nid] = g.nodes[nid]
    shuffled.splits = g.splits
    assert shuffled.topo_order() == g.topo_order()


def test_var_size_must_be_positive():
    with pytest.raises(ls.SizeError):
        ls.define_var("m", 0)


def test_duplicate_names_are_distinct_vars():
    a = ls.define_var("x", 4)
    b = ls.define_var("x", 4)
    assert a is not b and a.uid != b.uid


@given(size=st.integers(1, 200), factor=st.integers(1, 40))
def test_split_extents_reconstruct_with_tail_bound(size, factor):
    g = DFG()
    v = ls.Var("v", size)
    buf = VirtualBuffer("a", (v,))
    g.add(Read(0), (), buf)
    g.add(Write(1), (0,), VirtualBuffer("o", (v,)))
    outer, inner = ls.split(g, v, factor)
    assert outer.size == -(-size // factor)
    assert inner.size == factor
    assert size <= outer.size * inner.size < size + factor
    assert inner.tail == size % factor


def test_affine_expr_arithmetic():
    r = ls.define_var("r", 8)
    c = ls.define_var("c", 8)
    e = 2 * r + c - 1
    terms = dict((v.name, co) for v, co in e.terms)
    assert terms == {"r": 2, "c": 1} and e.offset == -1


def test_clone_is_isolated():
    g = ls.matmul_graph(4, 3, 5)
    c = g.clone()
    ls.split(c, ls.find_var(c, "k"), 3)
    assert all(v.name != "k_o" for node in g for v in node.order)
    assert any(v.name == "k_o" for node in c for v in node.order)
