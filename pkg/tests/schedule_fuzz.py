"""Random schedule-action sequences for property tests and program fuzzing."""

from __future__ import annotations

import random

from loopsmith import DFG
from loopsmith.schedule import (ReorderAction, SplitAction, StageAction,
                                apply_action)


def random_actions(dfg: DFG, rng: random.Random, n_actions: int = None,
                   max_splits: int = 3):
    """Generate and apply a random legal action sequence; returns the action
    records (the graph is mutated in place)."""
    if n_actions is None:
        n_actions = rng.randint(1, 7)
    actions = []
    splits = 0
    for _ in range(n_actions):
        kind = rng.choice(["split", "reorder", "reorder", "stage"])
        nodes = list(dfg)
        if kind == "split" and splits < max_splits:
            cands = sorted({v.name for node in nodes for v in node.order
                            if v.size >= 2})
            if not cands:
                continue
            name = rng.choice(cands)
            var = next(v for node in nodes for v in node.order
                       if v.name == name)
            factor = rng.choice([2, 3, 4, 5, 8])
            factor = min(factor, var.size)
            a = SplitAction(name, factor)
            apply_action(dfg, a)
            actions.append(a)
            splits += 1
        elif kind == "reorder":
            node = rng.choice(nodes)
            if len(node.order) < 2:
                continue
            names = [v.name for v in node.order]
            rng.shuffle(names)
            a = ReorderAction(node.id, names)
            apply_action(dfg, a)
            actions.append(a)
        elif kind == "stage":
            node = rng.choice(nodes)
            if not node.order:
                continue
            var = rng.choice(node.order)
            a = StageAction(node.id, var.name)
            apply_action(dfg, a)
            actions.append(a)
    return actions
