import io
import json

import numpy as np
import pytest

import loopsmith as ls
from loopsmith import serialize
from loopsmith.session import PROTOCOL_VERSION, Session, serve

import op_graphs


def test_json_round_trip_is_identity():
    g = op_graphs.mlp3()
    ls.split(g, ls.find_var(g, "b"), 2)
    ls.stage(g, g[4], g[4].order[0])
    s1 = serialize.dumps(g)
    s2 = serialize.dumps(serialize.loads(s1))
    assert s1 == s2


def test_round_trip_preserves_split_lineage():
    g = op_graphs.mm(23, 8, 8)
    ls.split(g, ls.find_var(g, "m"), 5)
    g2 = serialize.loads(serialize.dumps(g))
    mi = ls.find_var(g2, "m_i")
    assert mi.tail == 3  # 23 = 4*5 + 3
    assert g2.padded_extent(mi.root) == 25


def test_malformed_json_raises_schema_error():
    with pytest.raises(serialize.SchemaError):
        serialize.loads("{not json")
    with pytest.raises(serialize.SchemaError):
        serialize.loads(json.dumps({"vars": [], "nodes": [{"id": 0}],
                                    "outputs": []}))


def fresh_session():
    return Session(op_graphs.mm(32, 32, 32), target=ls.avx2_like())


def test_split_reply_contains_tree_and_stats():
    s = fresh_session()
    r = s.handle({"cmd": "split", "var": "k", "factor": 4})
    assert r["ok"] and "k_o" in r["tree"] and "k_i" in r["tree"]
    assert r["stats"]["flops"] == 2 * 32 ** 3
    assert s.replay_check()


def test_undo_restores_rendering_byte_for_byte():
    s = fresh_session()
    before = s.tree_text()
    s.handle({"cmd": "split", "var": "k", "factor": 4})
    r = s.handle({"cmd": "undo"})
    assert r["ok"] and r["tree"] == before
    assert s.replay_check()


def test_invalid_reorder_leaves_state_unchanged():
    s = fresh_session()
    before = serialize.dumps(s.dfg)
    r = s.handle({"cmd": "reorder", "node": 3, "order": ["m"]})
    assert r["error"] == "not-a-permutation"
    assert serialize.dumps(s.dfg) == before
    assert s.handle({"cmd": "reorder", "node": 99,
                     "order": ["m"]})["error"] == "unknown-node"


def test_error_catalogue():
    s = Session()
    assert s.handle({"cmd": "split", "var": "k", "factor": 2})["error"] == "no-dfg"
    assert s.handle("not a dict")["error"] == "bad-message"
    assert s.handle({"cmd": "definitely_not_real"})["error"] == "unknown-command"
    s = fresh_session()
    assert s.handle({"cmd": "split", "var": "zz", "factor": 2})["error"] == "unknown-var"
    assert s.handle({"cmd": "split", "var": "k"})["error"] == "bad-message"
    assert s.handle({"cmd": "split", "var": "k", "factor": 0})["error"] == "invalid-size"
    assert s.handle({"cmd": "set_target", "target": "z80"})["error"] == "unknown-target"
    assert s.handle({"cmd": "undo"})["error"] == "nothing-to-undo"


def test_set_target_and_unroll():
    s = fresh_session()
    r = s.handle({"cmd": "set_target", "target": "neon-like"})
    assert r["ok"] and s.target.lanes == 4
    r = s.handle({"cmd": "set_unroll", "limit": 8})
    assert r["ok"] and s.unroll_limit == 8


def test_bench_and_views():
    s = fresh_session()
    r = s.handle({"cmd": "bench", "min_ms": 1})
    assert r["ok"] and r["stats"]["gflops"] > 0
    assert "for m in 32" in s.handle({"cmd": "show_tree"})["tree"]
    asm = s.handle({"cmd": "show_kernel"})["asm"]
    assert "loop.begin" in asm


def test_tune_step_applies_and_replays():
    s = fresh_session()
    r = s.handle({"cmd": "tune_step", "budget": 10})
    assert r["ok"] and r["candidates"] <= 10
    assert s.replay_check()


def test_load_rejects_ambiguous_names():
    g = ls.DFG()
    v1, v2 = ls.Var("x", 4), ls.Var("x", 4)
    from loopsmith.ir import Read, VirtualBuffer, Write
    g.add(Read(0), (), VirtualBuffer("a", (v1, v2)))
    g.add(Write(1), (0,), VirtualBuffer("o", (v1, v2)))
    s = Session()
    r = s.handle({"cmd": "load", "dfg": serialize.dfg_to_json(g)})
    assert r["error"] == "ambiguous-var-names"


def test_serve_loop():
    g = op_graphs.mm(16, 16, 16)
    lines = [
        json.dumps({"cmd": "load", "dfg": serialize.dfg_to_json(g)}),
        json.dumps({"cmd": "split", "var": "n", "factor": 4}),
        "this is not json",
        json.dumps({"cmd": "show_tree"}),
    ]
    out = io.StringIO()
    serve(None, stdin=io.StringIO("\n".join(lines) + "\n"), stdout=out)
    replies = [json.loads(l) for l in out.getvalue().splitlines()]
    assert replies[0] == {"hello": "loopsmith", "protocol": PROTOCOL_VERSION}
    assert replies[1]["ok"] and replies[2]["ok"]
    assert replies[3]["error"] == "bad-json"
    assert "n_o" in replies[4]["tree"]
