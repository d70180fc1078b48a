"""Graph JSON interchange.

Schema (all annotations included, so save/load round-trips exactly):

    {
      "vars":  [{"id", "name", "size", "origin": {"parent", "factor", "part"} | null}],
      "nodes": [{"id", "kind", "slot"?, "name", "inputs", "dims", "order",
                 "staged", "op"?, "pre"?, "post"?, "alpha"?, "beta"?,
                 "constraints"?, "guarded"?, "oob"?}],
      "outputs": [{"slot", "node"}]
    }

Dims/order/staged/constraint references are var ids. `dumps` is canonical
(sorted keys, fixed separators): two structurally equal graphs serialize to
identical bytes.
"""

from __future__ import annotations

import itertools
import json

from . import ir
from .ir import (DFG, Arith, IndexConstraint, Node, Read, SplitOrigin, Var,
                 View, VirtualBuffer, Write)


class SchemaError(Exception):
    pass


def dfg_to_json(dfg: DFG) -> dict:
    """Canonical form: var ids are renumbered in deterministic first-visit
    order, so two structurally equal graphs (however their dims were created)
    serialize identically."""
    canon: dict[int, int] = {}
    vars_in_order: list[Var] = []

    def note(v: Var) -> int:
        if v.uid not in canon:
            canon[v.uid] = len(canon)
            vars_in_order.append(v)
            if v.origin is not None:
                note(v.origin.parent)
        return canon[v.uid]

    nodes = []
    for nid in sorted(dfg.nodes):
        n = dfg.nodes[nid]
        entry: dict = {
            "id": n.id,
            "kind": type(n.kind).__name__.lower(),
            "name": n.output.name,
            "inputs": list(n.inputs),
            "dims": [note(d) for d in n.output.dims],
            "order": [note(v) for v in n.order],
            "staged": sorted(note(v) for v in n.staged),
        }
        k = n.kind
        if isinstance(k, (Read, Write)):
            entry["slot"] = k.slot
        elif isinstance(k, Arith):
            entry.update(op=k.op, pre=k.pre, post=k.post,
                         alpha=k.alpha, beta=k.beta)
        elif isinstance(k, View):
            entry["guarded"] = k.guarded
            entry["oob"] = k.oob
            entry["constraints"] = [
                {"input_dim": note(c.input_dim),
                 "terms": [[note(v), coeff] for v, coeff in c.terms],
                 "offset": c.offset}
                for c in k.constraints]
        nodes.append(entry)

    vars_out = []
    for v in vars_in_order:
        origin = None
        if v.origin is not None:
            origin = {"parent": canon[v.origin.parent.uid],
                      "factor": v.origin.factor, "part": v.origin.part}
        vars_out.append({"id": canon[v.uid], "name": v.name, "size": v.size,
                         "origin": origin})
    vars_out.sort(key=lambda e: e["id"])

    outputs = [{"slot": n.kind.slot, "node": n.id}
               for n in dfg if isinstance(n.kind, Write)]
    return {"vars": vars_out, "nodes": nodes, "outputs": outputs}


def dfg_from_json(obj: dict) -> DFG:
    try:
        return _load(obj)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise SchemaError(f"malformed graph JSON: {e}") from None


def _load(obj: dict) -> DFG:
    raw_vars = {int(v["id"]): v for v in obj["vars"]}
    built: dict[int, Var] = {}

    def var(uid: int) -> Var:
        uid = int(uid)
        if uid in built:
            return built[uid]
        spec = raw_vars[uid]
        origin = None
        if spec.get("origin"):
            o = spec["origin"]
            origin = SplitOrigin(var(o["parent"]), int(o["factor"]),
                                 str(o["part"]))
        v = Var(str(spec["name"]), int(spec["size"]), origin, uid=uid)
        built[uid] = v
        return v

    dfg = DFG()
    for spec in obj["nodes"]:
        kind_name = spec["kind"]
        if kind_name == "read":
            kind: ir.Kind = Read(int(spec["slot"]))
        elif kind_name == "write":
            kind = Write(int(spec["slot"]))
        elif kind_name == "arith":
            kind = Arith(str(spec["op"]), str(spec.get("pre", "identity")),
                         str(spec.get("post", "identity")),
                         float(spec.get("alpha", 0.0)),
                         float(spec.get("beta", 1.0)))
        elif kind_name == "view":
            cons = tuple(
                IndexConstraint(var(c["input_dim"]),
                                tuple((var(t[0]), int(t[1]))
                                      for t in c["terms"]),
                                int(c.get("offset", 0)))
                for c in spec["constraints"])
            kind = View(cons, bool(spec.get("guarded", False)),
                        float(spec.get("oob", 0.0)))
        else:
            raise SchemaError(f"unknown node kind {kind_name!r}")
        buf = VirtualBuffer(str(spec["name"]),
                            tuple(var(d) for d in spec["dims"]))
        node = Node(int(spec["id"]), kind, tuple(int(i) for i in spec["inputs"]),
                    buf, [var(u) for u in spec["order"]],
                    {var(u) for u in spec.get("staged", [])})
        dfg.nodes[node.id] = node
    dfg._next = max(dfg.nodes, default=-1) + 1

    # rebuild the split registry from origins
    halves: dict[int, dict[str, Var]] = {}
    for v in built.values():
        if v.origin is not None:
            halves.setdefault(v.origin.parent.uid, {})[v.origin.part] = v
    for uid, pair in halves.items():
        if "outer" in pair and "inner" in pair:
            dfg.splits[uid] = (pair["outer"], pair["inner"])

    # keep future var ids clear of the loaded ones
    top = max(built, default=-1) + 1
    current = next(ir._var_ids)
    if top > current:
        ir._var_ids = itertools.count(top)

    problems = ir.validate(dfg)
    if problems:
        raise SchemaError(f"graph fails validation: {problems}")
    return dfg


def dumps(dfg: DFG) -> str:
    return json.dumps(dfg_to_json(dfg), sort_keys=True, separators=(",", ":"))


def loads(text: str) -> DFG:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e}") from None
    return dfg_from_json(obj)


def save(dfg: DFG, path: str) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(dfg_to_json(dfg), sort_keys=True, indent=1) + "\n")


def load(path: str) -> DFG:
    with open(path) as f:
        return loads(f.read())
