"""Schedule mutations over the annotated graph: split, reorder, stage, bulk
wrappers, and serializable action records for replay.

Splits apply globally (every node iterating the dimension sees the same
outer/inner pair), so node orders always stay permutations of their iteration
space without per-node aliasing. Reorder rejects anything that is not a
permutation of the node's current order; that check is what keeps illegal
schedules unrepresentable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

from .ir import DFG, Node, SizeError, SplitOrigin, UnknownVar, Var


class NotAPermutation(Exception):
    pass


def split(dfg: DFG, var: Var, factor: int) -> tuple[Var, Var]:
    """Split `var` into (outer, inner) with inner extent `factor` and outer
    extent ceil(size/factor); records tail metadata when the factor does not
    divide the extent. Rewrites every node order containing `var` in place."""
    if factor < 1:
        raise SizeError(f"split factor must be >= 1, got {factor}")
    var = _resolve(dfg, var)
    holders = [n for n in dfg if var in n.order]
    if not holders:
        raise UnknownVar(f"{var.name} does not appear in any node order")
    outer = Var(f"{var.name}_o", -(-var.size // factor),
                SplitOrigin(var, factor, "outer"))
    inner = Var(f"{var.name}_i", factor, SplitOrigin(var, factor, "inner"))
    dfg.splits[var.uid] = (outer, inner)
    for node in holders:
        at = node.order.index(var)
        node.order[at:at + 1] = [outer, inner]
        if var in node.staged:
            node.staged.discard(var)
            node.staged.update((outer, inner))
    return outer, inner


def reorder(dfg: DFG, node: Node, new_order: Sequence[Var]) -> None:
    """Set the node's loop order. `new_order` must be a permutation of the
    current order (matched by uid, so vars from a cloned graph are accepted)."""
    by_uid = {v.uid: v for v in node.order}
    if sorted(by_uid) != sorted(v.uid for v in new_order):
        raise NotAPermutation(
            f"node {node.id}: {[v.name for v in new_order]} is not a "
            f"permutation of {[v.name for v in node.order]}")
    node.order = [by_uid[v.uid] for v in new_order]


def stage(dfg: DFG, node: Node, var: Var) -> None:
    """Mark `var` as staged on `node`: lowering will refuse to share that loop
    across this node's boundary, materializing the intermediate."""
    var = _resolve_in_order(node, var)
    node.staged.add(var)


def bulk(dfg: DFG, nodes: Iterable[Node], action: Callable[[DFG, Node], None]) -> None:
    """Apply `action` to each node transactionally: the graph is mutated only
    if every application succeeds."""
    nodes = list(nodes)
    trial = dfg.clone()
    for n in nodes:
        action(trial, trial[n.id])
    dfg.nodes = trial.nodes
    dfg.splits = trial.splits
    dfg._next = trial._next


def _resolve(dfg: DFG, var: Var) -> Var:
    """Map a var (possibly from a clone) onto this graph's own object."""
    for node in dfg:
        for v in node.order:
            if v.uid == var.uid:
                return v
    raise UnknownVar(var.name)


def _resolve_in_order(node: Node, var: Var) -> Var:
    for v in node.order:
        if v.uid == var.uid:
            return v
    raise UnknownVar(f"{var.name} not in order of node {node.id}")


def find_var(dfg: DFG, name: str) -> Var:
    """Look up a dimension by name across all node orders."""
    for node in dfg:
        for v in node.order:
            if v.name == name:
                return v
    raise UnknownVar(name)


# --------------------------------------------------------------------------
# Action records (replayable, JSON-friendly)
# --------------------------------------------------------------------------

@dataclass
class SplitAction:
    var: str
    factor: int

    def to_json(self) -> dict:
        return {"action": "split", "var": self.var, "factor": self.factor}


@dataclass
class ReorderAction:
    node: int
    order: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"action": "reorder", "node": self.node, "order": list(self.order)}


@dataclass
class StageAction:
    node: int
    var: str

    def to_json(self) -> dict:
        return {"action": "stage", "node": self.node, "var": self.var}


Action = Union[SplitAction, ReorderAction, StageAction]


def action_from_json(obj: dict) -> Action:
    kind = obj["action"]
    if kind == "split":
        return SplitAction(obj["var"], int(obj["factor"]))
    if kind == "reorder":
        return ReorderAction(int(obj["node"]), [str(v) for v in obj["order"]])
    if kind == "stage":
        return StageAction(int(obj["node"]), obj["var"])
    raise ValueError(f"unknown action {kind!r}")


def apply_action(dfg: DFG, action: Action) -> None:
    if isinstance(action, SplitAction):
        split(dfg, find_var(dfg, action.var), action.factor)
    elif isinstance(action, ReorderAction):
        node = dfg[action.node]
        by_name = {v.name: v for v in node.order}
        try:
            order = [by_name[nm] for nm in action.order]
        except KeyError as e:
            raise NotAPermutation(f"unknown var {e.args[0]!r} in reorder") from None
        reorder(dfg, node, order)
    elif isinstance(action, StageAction):
        node = dfg[action.node]
        by_name = {v.name: v for v in node.order}
        if action.var not in by_name:
            raise UnknownVar(action.var)
        stage(dfg, node, by_name[action.var])
    else:
        raise TypeError(f"not an action: {action!r}")


def apply_actions(dfg: DFG, actions: Iterable[Action]) -> None:
    for a in actions:
        apply_action(dfg, a)


def set_unroll_limit(target, limit: int) -> None:
    """Override the target's default cap on unrolled instruction count."""
    if limit < 1:
        raise SizeError(f"unroll limit must be >= 1, got {limit}")
    target.unroll_limit = limit
