"""Interactive schedule-exploration session: one graph, an undoable action
history, and a line-delimited JSON protocol that the terminal UI (or any
client) drives over stdin/stdout.

Protocol: one JSON object per line. Requests carry {"cmd": ...}; every
mutating command replies with the re-rendered loop tree plus fresh stats, and
errors leave the session state untouched:

    {"cmd": "load", "dfg": {...}} | {"cmd": "load", "path": "g.json"}
    {"cmd": "split", "var": "k", "factor": 4}
    {"cmd": "reorder", "node": 3, "order": ["m", "k", "n"]}
    {"cmd": "stage", "node": 0, "var": "k_i"}
    {"cmd": "undo"}
    {"cmd": "set_target", "target": "avx2-like"}
    {"cmd": "set_unroll", "limit": 128}
    {"cmd": "bench", "min_ms": 50}
    {"cmd": "show_tree"} | {"cmd": "show_kernel"}
    {"cmd": "tune_step", "budget": 16}

Replaying the accepted action history against the initially loaded graph
always reproduces the current graph exactly.
"""

from __future__ import annotations

import json
import sys
from typing import Optional

import numpy as np

from . import serialize, vm
from .backend import BlockTooLarge, compile_tree
from .feedback import ScheduleStats, benchmark, slot_shapes
from .ir import DFG, Read, SizeError, UnknownVar, validate
from .lowering import lower, render_text
from .schedule import (Action, NotAPermutation, ReorderAction, SplitAction,
                       StageAction, action_from_json, apply_action,
                       apply_actions)
from .targets import TargetDescriptor, avx512_like, by_name

PROTOCOL_VERSION = 1


class SessionError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail or code)
        self.code = code
        self.detail = detail


class Session:
    def __init__(self, dfg: Optional[DFG] = None,
                 target: Optional[TargetDescriptor] = None, seed: int = 0,
                 bench_ms: float = 0.0):
        self.target = target or avx512_like()
        self.unroll_limit: Optional[int] = None
        self.seed = seed
        self.bench_ms = bench_ms
        self.initial: Optional[dict] = None
        self.dfg: Optional[DFG] = None
        self.history: list[Action] = []
        self.last_stats: Optional[ScheduleStats] = None
        vm.warmup()
        if dfg is not None:
            self._load(serialize.dfg_to_json(dfg))

    # ---- core state ---------------------------------------------------------

    def _load(self, obj: dict) -> None:
        dfg = serialize.dfg_from_json(obj)
        seen: dict[str, int] = {}
        for node in dfg:
            for v in node.order:
                if seen.setdefault(v.name, v.uid) != v.uid:
                    raise SessionError(
                        "ambiguous-var-names",
                        f"two distinct dims named {v.name!r}; protocol "
                        f"refers to dims by name")
        self.initial = obj
        self.dfg = dfg
        self.history = []

    def _require(self) -> DFG:
        if self.dfg is None:
            raise SessionError("no-dfg", "load a graph first")
        return self.dfg

    def _buffers(self) -> dict[int, np.ndarray]:
        dfg = self._require()
        rng = np.random.default_rng(self.seed)
        out = {}
        inputs = {n.kind.slot for n in dfg if isinstance(n.kind, Read)}
        for slot, shape in slot_shapes(dfg).items():
            if slot in inputs:
                out[slot] = rng.integers(-3, 4, size=shape).astype(np.float32)
        return out

    def compile(self):
        tree = lower(self._require())
        kernel = compile_tree(tree, self.target, self.unroll_limit)
        return tree, kernel

    def stats(self, min_ms: Optional[float] = None) -> ScheduleStats:
        _, kernel = self.compile()
        st = benchmark(kernel, self._buffers(),
                       min_ms=self.bench_ms if min_ms is None else min_ms)
        self.last_stats = st
        return st

    def tree_text(self) -> str:
        return render_text(lower(self._require()))

    def replay_check(self) -> bool:
        """Replaying the history from the initial graph reproduces the
        current one byte-for-byte."""
        if self.initial is None:
            return True
        fresh = serialize.dfg_from_json(self.initial)
        apply_actions(fresh, self.history)
        return serialize.dumps(fresh) == serialize.dumps(self.dfg)

    # ---- protocol -----------------------------------------------------------

    def handle(self, msg) -> dict:
        try:
            if not isinstance(msg, dict) or "cmd" not in msg:
                raise SessionError("bad-message", "expected {\"cmd\": ...}")
            cmd = msg["cmd"]
            fn = getattr(self, f"_cmd_{cmd}", None)
            if fn is None:
                raise SessionError("unknown-command", str(cmd))
            return fn(msg)
        except SessionError as e:
            return {"error": e.code, "detail": e.detail}
        except (UnknownVar, KeyError) as e:
            return {"error": "unknown-var", "detail": str(e)}
        except NotAPermutation as e:
            return {"error": "not-a-permutation", "detail": str(e)}
        except SizeError as e:
            return {"error": "invalid-size", "detail": str(e)}
        except serialize.SchemaError as e:
            return {"error": "bad-graph", "detail": str(e)}
        except BlockTooLarge as e:
            return {"error": "block-too-large", "detail": str(e)}
        except Exception as e:  # noqa: BLE001 - protocol boundary
            return {"error": "internal", "detail": f"{type(e).__name__}: {e}"}

    def _mutate(self, action: Action) -> dict:
        """Apply one schedule action transactionally and reply with the new
        tree plus fresh stats."""
        dfg = self._require()
        trial = dfg.clone()
        apply_action(trial, action)
        problems = validate(trial)
        if problems:
            raise SessionError("invalid-schedule", str(problems))
        self.dfg = trial
        self.history.append(action)
        st = self.stats()
        return {"ok": True, "tree": self.tree_text(), "stats": st.to_json(),
                "history_len": len(self.history)}

    def _cmd_hello(self, msg) -> dict:
        return {"hello": "loopsmith", "protocol": PROTOCOL_VERSION}

    def _cmd_load(self, msg) -> dict:
        if "dfg" in msg:
            obj = msg["dfg"]
        elif "path" in msg:
            with open(msg["path"]) as f:
                obj = json.load(f)
        else:
            raise SessionError("bad-message", "load needs dfg or path")
        self._load(obj)
        st = self.stats()
        return {"ok": True, "tree": self.tree_text(), "stats": st.to_json(),
                "history_len": 0}

    def _cmd_split(self, msg) -> dict:
        try:
            factor = int(msg["factor"])
        except (KeyError, ValueError, TypeError):
            raise SessionError("bad-message", "split needs var and factor")
        return self._mutate(SplitAction(str(msg.get("var")), factor))

    def _cmd_reorder(self, msg) -> dict:
        if "node" not in msg or "order" not in msg:
            raise SessionError("bad-message", "reorder needs node and order")
        node = int(msg["node"])
        if node not in self._require().nodes:
            raise SessionError("unknown-node", str(node))
        return self._mutate(ReorderAction(node, [str(v) for v in msg["order"]]))

    def _cmd_stage(self, msg) -> dict:
        if "node" not in msg or "var" not in msg:
            raise SessionError("bad-message", "stage needs node and var")
        node = int(msg["node"])
        if node not in self._require().nodes:
            raise SessionError("unknown-node", str(node))
        return self._mutate(StageAction(node, str(msg["var"])))

    def _cmd_undo(self, msg) -> dict:
        self._require()
        if not self.history:
            raise SessionError("nothing-to-undo")
        self.history.pop()
        fresh = serialize.dfg_from_json(self.initial)
        apply_actions(fresh, self.history)
        self.dfg = fresh
        st = self.stats()
        return {"ok": True, "tree": self.tree_text(), "stats": st.to_json(),
                "history_len": len(self.history)}

    def _cmd_set_target(self, msg) -> dict:
        try:
            self.target = by_name(str(msg.get("target")))
        except ValueError as e:
            raise SessionError("unknown-target", str(e))
        out = {"ok": True, "target": self.target.name}
        if self.dfg is not None:
            out["tree"] = self.tree_text()
            out["stats"] = self.stats().to_json()
        return out

    def _cmd_set_unroll(self, msg) -> dict:
        try:
            limit = int(msg["limit"])
        except (KeyError, ValueError, TypeError):
            raise SessionError("bad-message", "set_unroll needs limit")
        if limit < 1:
            raise SessionError("invalid-size", "unroll limit must be >= 1")
        self.unroll_limit = limit
        out = {"ok": True, "unroll_limit": limit}
        if self.dfg is not None:
            out["stats"] = self.stats().to_json()
        return out

    def _cmd_bench(self, msg) -> dict:
        min_ms = float(msg.get("min_ms", 10.0))
        st = self.stats(min_ms=min_ms)
        return {"ok": True, "stats": st.to_json()}

    def _cmd_show_tree(self, msg) -> dict:
        return {"ok": True, "tree": self.tree_text()}

    def _cmd_show_kernel(self, msg) -> dict:
        _, kernel = self.compile()
        return {"ok": True, "asm": kernel.disassemble(),
                "compile_ms": kernel.compile_ms}

    def _cmd_tune_step(self, msg) -> dict:
        from .tuner import tune

        dfg = self._require()
        budget = int(msg.get("budget", 16))
        result = tune(dfg, self.target, budget=budget, min_ms=0.0,
                      seed=self.seed, verify_fraction=0.0)
        applied = []
        if result.best.actions and result.best.stats is not None:
            for a in result.best.actions:
                apply_action(dfg, a)
                self.history.append(a)
                applied.append(a.to_json())
        st = self.stats()
        return {"ok": True, "tree": self.tree_text(), "stats": st.to_json(),
                "applied": applied, "candidates": len(result.leaderboard),
                "history_len": len(self.history)}


def serve(initial_path: Optional[str] = None, stdin=None, stdout=None) -> int:
    """Run the line-delimited JSON protocol until EOF."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    session = Session()

    def emit(obj: dict) -> None:
        stdout.write(json.dumps(obj) + "\n")
        stdout.flush()

    emit({"hello": "loopsmith", "protocol": PROTOCOL_VERSION})
    if initial_path:
        emit(session.handle({"cmd": "load", "path": initial_path}))
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as e:
            emit({"error": "bad-json", "detail": str(e)})
            continue
        emit(session.handle(msg))
    return 0
