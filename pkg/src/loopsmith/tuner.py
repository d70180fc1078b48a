"""Three-step scripted schedule sweep.

Step 1 sweeps register-block shapes that fit the target's register file
together with cache-derived tile sizes. Step 2 permutes sliding windows of
the loop order, innermost first, keeping the best order per window. Step 3
injects memory packing by staging operand reads. Scoring is host-independent:
executed memory-access instruction count first, wall time as a tiebreak.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from itertools import permutations
from typing import Optional

import numpy as np

from .backend import BlockTooLarge, compile_tree, execute
from .feedback import ScheduleStats, benchmark, reference_eval
from .ir import DFG, Arith, Read, Write
from .lowering import lower
from .schedule import (Action, ReorderAction, SplitAction, StageAction,
                       apply_actions)
from .targets import TargetDescriptor


@dataclass
class Candidate:
    actions: list[Action]
    stats: Optional[ScheduleStats] = None
    score: tuple = ()
    error: str = ""

    def to_json(self) -> dict:
        return {
            "actions": [a.to_json() for a in self.actions],
            "stats": self.stats.to_json() if self.stats else None,
            "score": list(self.score) if self.score else None,
            "error": self.error or None,
        }


@dataclass
class TuneResult:
    best: Candidate
    leaderboard: list[Candidate] = field(default_factory=list)

    def dump_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            for c in self.leaderboard:
                f.write(json.dumps(c.to_json()) + "\n")


def _score(dfg: DFG, actions: list[Action], target: TargetDescriptor,
           buffers: dict[int, np.ndarray], min_ms: float) -> Candidate:
    cand = Candidate(list(actions))
    try:
        trial = dfg.clone()
        apply_actions(trial, actions)
        kernel = compile_tree(lower(trial), target)
        stats = benchmark(kernel, {k: v.copy() for k, v in buffers.items()},
                          min_ms=min_ms)
        cand.stats = stats
        mem = sum(stats.vm_counters.get(k, 0) for k in
                  ("vload", "vload.strided", "vbroadcast", "vstore",
                   "sload", "sstore"))
        cand.score = (mem, stats.elapsed_ms / max(stats.repeats, 1))
    except (BlockTooLarge, Exception) as e:  # noqa: BLE001 - record, don't die
        cand.error = f"{type(e).__name__}: {e}"
        cand.score = (float("inf"), float("inf"))
    return cand


def _random_buffers(dfg: DFG, rng: np.random.Generator) -> dict[int, np.ndarray]:
    from .feedback import slot_shapes

    out = {}
    inputs = {n.kind.slot for n in dfg if isinstance(n.kind, Read)}
    for slot, shape in slot_shapes(dfg).items():
        if slot in inputs:
            out[slot] = rng.integers(-3, 4, size=shape).astype(np.float32)
        else:
            out[slot] = np.zeros(shape, np.float32)
    return out


def _contraction_node(dfg: DFG):
    """The deepest arithmetic node with reduction dims, or None."""
    best = None
    for nid in dfg.topo_order():
        node = dfg[nid]
        if isinstance(node.kind, Arith) and dfg.reduction_dims(node):
            best = node
    return best


def _block_candidates(target: TargetDescriptor) -> list[tuple[int, int]]:
    lanes = target.lanes
    budget = (target.vregs - 8) * lanes
    rows = [1, 2, 3, 4, 5, 6]
    cols = [lanes * m for m in (1, 2, 3, 4, 5, 6) if lanes * m <= 128]
    out = []
    for r in rows:
        for c in cols:
            if r * c <= budget:
                out.append((r, c))
    return out


def _tile_candidates(target: TargetDescriptor) -> list[int]:
    out = [32, 64, 128, 256, 512]
    l1 = target.cache_sizes[0] if target.cache_sizes else 32 * 1024
    return [t for t in out if t * 4 * 8 <= l1 * 4]


def _global_reorder(dfg: DFG, loop_order: list[str]) -> list[Action]:
    """Reorder every node to follow `loop_order` filtered to its own vars."""
    actions: list[Action] = []
    for node in dfg:
        names = [v.name for v in node.order]
        want = [nm for nm in loop_order if nm in names]
        rest = [nm for nm in names if nm not in want]
        actions.append(ReorderAction(node.id, want + rest))
    return actions


def tune(dfg: DFG, target: TargetDescriptor, budget: int = 500,
         min_ms: float = 0.0, seed: int = 0,
         verify_fraction: float = 0.05) -> TuneResult:
    """Sweep schedules for `dfg` and return the best action sequence plus
    every scored candidate. At most `budget` candidates are evaluated."""
    rng = np.random.default_rng(seed)
    pyrng = random.Random(seed)
    buffers = _random_buffers(dfg, rng)
    leaderboard: list[Candidate] = []
    spent = 0

    def evaluate(actions: list[Action]) -> Candidate:
        nonlocal spent
        cand = _score(dfg, actions, target, buffers, min_ms)
        spent += 1
        leaderboard.append(cand)
        if cand.stats is not None and verify_fraction > 0 and \
                pyrng.random() < verify_fraction:
            _spot_check(dfg, cand.actions, target, rng)
        return cand

    best = evaluate([])
    node = _contraction_node(dfg)
    if node is None or budget <= 1:
        return TuneResult(best, leaderboard)

    out_dims = [d for d in node.output.dims]
    red_dims = dfg.reduction_dims(node)

    # step 1: register blocking + cache tiles
    if len(out_dims) >= 2:
        row, col = out_dims[-2].name, out_dims[-1].name
    elif out_dims:
        row, col = None, out_dims[-1].name
    else:
        row = col = None
    kname = red_dims[0].name if red_dims else None

    if col is not None:
        for (bm, bn) in _block_candidates(target):
            if spent >= budget:
                break
            ks = _tile_candidates(target) if kname else [None]
            for bk in ks:
                if spent >= budget:
                    break
                actions: list[Action] = []
                order: list[str] = []
                cvar = next(d for d in out_dims if d.name == col)
                if bn > 1 and bn < cvar.size:
                    actions.append(SplitAction(col, bn))
                    outer_cols, inner_cols = [f"{col}_o"], [f"{col}_i"]
                elif bn <= cvar.size:
                    outer_cols, inner_cols = [], [col]
                else:
                    continue
                inner_rows: list[str] = []
                outer_rows: list[str] = []
                if row is not None:
                    rvar = next(d for d in out_dims if d.name == row)
                    if bm > 1 and bm < rvar.size:
                        actions.append(SplitAction(row, bm))
                        outer_rows, inner_rows = [f"{row}_o"], [f"{row}_i"]
                    elif bm <= rvar.size:
                        outer_rows, inner_rows = [], [row]
                    else:
                        continue
                kouter: list[str] = []
                kinner: list[str] = []
                if kname:
                    kvar = red_dims[0]
                    if bk and bk < kvar.size:
                        actions.append(SplitAction(kname, bk))
                        kouter, kinner = [f"{kname}_o"], [f"{kname}_i"]
                    else:
                        kinner = [kname]
                order = (outer_rows + outer_cols + kouter + kinner
                         + inner_rows + inner_cols)
                extra = [d.name for d in out_dims
                         if d.name not in (row, col)]
                extra += [d.name for d in red_dims[1:]]
                actions.extend(_global_reorder_after(dfg, actions,
                                                     extra + order))
                evaluate(actions)
                if len(ks) == 1:
                    break
        leaderboard_sorted = sorted((c for c in leaderboard if c.stats),
                                    key=lambda c: c.score)
        if leaderboard_sorted:
            best = leaderboard_sorted[0]

    # step 2: sliding-window permutations over the best order
    base_actions = [a for a in best.actions
                    if isinstance(a, (SplitAction, StageAction))]
    trial = dfg.clone()
    apply_actions(trial, base_actions)
    ref_node = _contraction_node(trial)
    loop_names = [v.name for v in ref_node.order]
    window = min(5, len(loop_names))
    for start in range(len(loop_names) - window, -1, -1):
        if spent >= budget:
            break
        seg = loop_names[start:start + window]
        best_here = best
        for perm in permutations(seg):
            if spent >= budget:
                break
            if list(perm) == seg:
                continue
            new_order = (loop_names[:start] + list(perm)
                         + loop_names[start + window:])
            actions = base_actions + _global_reorder(trial, new_order)
            cand = evaluate(actions)
            if cand.stats is not None and (best_here.score == () or
                                           cand.score < best_here.score):
                best_here = cand
        if best_here is not best and best_here.stats is not None:
            best = best_here
            # keep the winning order for the next window
            reorders = [a for a in best.actions if isinstance(a, ReorderAction)]
            base = dfg.clone()
            apply_actions(base, best.actions)
            loop_names = [v.name for v in _contraction_node(base).order]

    # step 3: packing injection by staging operand reads
    pack_targets = []
    base = dfg.clone()
    apply_actions(base, best.actions)
    cnode = _contraction_node(base)
    for pid in _transitive_reads(base, cnode):
        rnode = base[pid]
        for v in rnode.order:
            if v.origin is not None:
                pack_targets.append((pid, v.name))
    for nid, vname in pack_targets[:8]:
        if spent >= budget:
            break
        actions = best.actions + [StageAction(nid, vname)]
        cand = evaluate(actions)
        if cand.stats is not None and cand.score < best.score:
            best = cand

    return TuneResult(best, leaderboard)


def _global_reorder_after(dfg: DFG, pre_actions: list[Action],
                          loop_order: list[str]) -> list[Action]:
    trial = dfg.clone()
    apply_actions(trial, pre_actions)
    return _global_reorder(trial, loop_order)


def _transitive_reads(dfg: DFG, node) -> list[int]:
    out = []
    seen = set()
    stack = list(node.inputs)
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        n = dfg[nid]
        if isinstance(n.kind, Read):
            out.append(nid)
        stack.extend(n.inputs)
    return sorted(out)


def _spot_check(dfg: DFG, actions: list[Action], target: TargetDescriptor,
                rng: np.random.Generator) -> None:
    """Verify a candidate's kernel against the reference interpreter."""
    trial = dfg.clone()
    apply_actions(trial, actions)
    buffers = _random_buffers(trial, rng)
    want = reference_eval(trial, buffers)
    kernel = compile_tree(lower(trial), target)
    got = {k: v.copy() for k, v in buffers.items()}
    execute(kernel, got)
    for slot, ref in want.items():
        res = got[slot].reshape(ref.shape)
        denom = np.maximum(np.abs(ref), 1.0)
        err = np.max(np.abs(res - ref) / denom)
        if err > 1e-4:
            raise AssertionError(
                f"tuner candidate diverges from reference (slot {slot}, "
                f"rel err {err:.2e})")
