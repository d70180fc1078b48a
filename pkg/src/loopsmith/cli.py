"""Command-line entry points.

    loopsmith compile g.json [--target T] [--unroll N] [--emit asm|json]
    loopsmith run g.json --data DIR [--target T]
    loopsmith bench g.json [--target T] [--min-ms MS]
    loopsmith tune g.json [--budget N] [--out leaderboard.jsonl] [--target T]
    loopsmith serve [g.json]

Tensor data interchange for `run`: a directory containing shapes.json
(slot -> shape list) plus one raw little-endian f32 blob per slot named
"<slot>.bin". Output slots are written back into the same directory.

Exit codes: 0 on success, 2 on input errors (diagnostics on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import serialize, session
from .backend import compile_tree, execute
from .feedback import ShapeMismatch, benchmark, count_flops, slot_shapes
from .ir import Read, Write
from .lowering import lower
from .targets import by_name
from .tuner import tune


class InputError(Exception):
    pass


def _load_graph(path: str):
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    try:
        return serialize.load(path)
    except serialize.SchemaError as e:
        raise InputError(str(e)) from None


def _target(name: str):
    try:
        return by_name(name)
    except ValueError as e:
        raise InputError(str(e)) from None


def cmd_compile(args) -> int:
    dfg = _load_graph(args.graph)
    kernel = compile_tree(lower(dfg), _target(args.target), args.unroll)
    if args.emit == "asm":
        sys.stdout.write(kernel.disassemble())
    else:
        prog = kernel.program
        out = {
            "target": kernel.target.name,
            "lanes": prog.lanes,
            "vregs": prog.vregs,
            "compile_ms": kernel.compile_ms,
            "scratch_bytes": kernel.scratch_bytes,
            "instructions": len(prog.instrs),
            "regions": [{"node": r.node, "accum_regs": list(r.accum_regs)}
                        for r in prog.regions],
        }
        json.dump(out, sys.stdout, indent=1)
        sys.stdout.write("\n")
    return 0


def _read_data_dir(dfg, data_dir: str):
    manifest_path = os.path.join(data_dir, "shapes.json")
    if not os.path.exists(manifest_path):
        raise InputError(f"missing {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    shapes = slot_shapes(dfg)
    buffers = {}
    for slot_str, shape in manifest.items():
        slot = int(slot_str)
        want = shapes.get(slot)
        if want is None:
            raise InputError(f"slot {slot} not used by the graph")
        blob = os.path.join(data_dir, f"{slot}.bin")
        if not os.path.exists(blob):
            raise InputError(f"missing blob {blob}")
        arr = np.fromfile(blob, dtype="<f4")
        if arr.size != int(np.prod(shape)) if shape else 1:
            raise InputError(f"slot {slot}: blob has {arr.size} f32 elements, "
                             f"manifest says {shape}")
        buffers[slot] = arr.reshape(tuple(int(s) for s in shape))
    return buffers


def cmd_run(args) -> int:
    dfg = _load_graph(args.graph)
    buffers = _read_data_dir(dfg, args.data)
    inputs = {n.kind.slot for n in dfg if isinstance(n.kind, Read)}
    missing = inputs - set(buffers)
    if missing:
        raise InputError(f"missing input slots: {sorted(missing)}")
    kernel = compile_tree(lower(dfg), _target(args.target), args.unroll)
    try:
        execute(kernel, buffers)
    except ShapeMismatch as e:
        raise InputError(str(e)) from None
    manifest = {}
    for slot, shape in slot_shapes(dfg).items():
        if slot in buffers:
            manifest[str(slot)] = list(shape)
    outputs = {n.kind.slot for n in dfg if isinstance(n.kind, Write)}
    for slot in sorted(outputs):
        buffers[slot].astype("<f4").tofile(os.path.join(args.data, f"{slot}.bin"))
    with open(os.path.join(args.data, "shapes.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    print(json.dumps({"ok": True, "outputs": sorted(outputs),
                      "counters": kernel.counters}))
    return 0


def cmd_bench(args) -> int:
    dfg = _load_graph(args.graph)
    kernel = compile_tree(lower(dfg), _target(args.target), args.unroll)
    rng = np.random.default_rng(args.seed)
    buffers = {}
    inputs = {n.kind.slot for n in dfg if isinstance(n.kind, Read)}
    for slot, shape in slot_shapes(dfg).items():
        if slot in inputs:
            buffers[slot] = rng.integers(-3, 4, size=shape).astype(np.float32)
    stats = benchmark(kernel, buffers, min_ms=args.min_ms)
    json.dump(stats.to_json(), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def cmd_tune(args) -> int:
    dfg = _load_graph(args.graph)
    result = tune(dfg, _target(args.target), budget=args.budget,
                  min_ms=args.min_ms, seed=args.seed)
    if args.out:
        result.dump_jsonl(args.out)
    json.dump({"best": result.best.to_json(),
               "candidates": len(result.leaderboard)}, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def cmd_serve(args) -> int:
    return session.serve(args.graph)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loopsmith",
                                description="tensor-contraction scheduling "
                                            "and kernel compilation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True):
        if graph:
            sp.add_argument("graph", help="graph JSON file")
        sp.add_argument("--target", default="avx512-like")
        sp.add_argument("--unroll", type=int, default=None,
                        help="override the unrolled-instruction limit")

    sp = sub.add_parser("compile", help="compile and print the kernel")
    common(sp)
    sp.add_argument("--emit", choices=("asm", "json"), default="asm")
    sp.set_defaults(fn=cmd_compile)

    sp = sub.add_parser("run", help="execute against a data directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("bench", help="compile and benchmark")
    common(sp)
    sp.add_argument("--min-ms", type=float, default=50.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("tune", help="scripted schedule sweep")
    common(sp)
    sp.add_argument("--budget", type=int, default=500)
    sp.add_argument("--min-ms", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="leaderboard JSONL path")
    sp.set_defaults(fn=cmd_tune)

    sp = sub.add_parser("serve", help="speak the session protocol on stdio")
    sp.add_argument("graph", nargs="?", default=None)
    sp.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
