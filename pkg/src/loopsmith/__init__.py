"""loopsmith: a lightweight tensor-contraction scheduling and compilation
toolkit.

Build a computation declaratively (`GraphBuilder`), schedule it with split /
reorder / stage actions, lower it to an explicit loop tree, compile to a
vectorized register-blocked kernel program, and measure it -- all in a few
milliseconds per iteration.
"""

from .ir import (DFG, AffineExpr, Arith, CycleError, IndexConstraint, Node,
                 Read, SizeError, UnknownVar, Var, View, VirtualBuffer, Write,
                 topo_order, validate)
from .frontend import (GraphBuilder, IncompatibleDims, Tensor, TensorExpr,
                       define_var, matmul_graph)
from .schedule import (NotAPermutation, ReorderAction, SplitAction,
                       StageAction, apply_action, apply_actions, bulk,
                       find_var, reorder, set_unroll_limit, split, stage)
from .lowering import (Alloc, InvalidGraph, Leaf, Loop, LoopTree, NoConsumer,
                       alloc_size, lower, render_text, tree_to_json)
from .targets import TargetDescriptor, avx2_like, avx512_like, neon_like
from .program import Instr, KernelProgram
from .backend import (BlockTooLarge, CompiledKernel, HasReduction, compile,
                      compile_single_operand, compile_tree, execute)
from .feedback import (ScheduleStats, ShapeMismatch, arithmetic_intensity,
                       benchmark, bytes_moved, count_flops, reference_eval,
                       slot_shapes)
from .tuner import tune

__all__ = [
    "DFG", "Var", "Node", "VirtualBuffer", "AffineExpr", "IndexConstraint",
    "Read", "Write", "Arith", "View", "validate", "topo_order",
    "CycleError", "UnknownVar", "SizeError",
    "GraphBuilder", "Tensor", "TensorExpr", "define_var", "matmul_graph",
    "IncompatibleDims",
    "split", "reorder", "stage", "bulk", "find_var", "set_unroll_limit",
    "NotAPermutation", "SplitAction", "ReorderAction", "StageAction",
    "apply_action", "apply_actions",
    "lower", "LoopTree", "Loop", "Leaf", "Alloc", "alloc_size",
    "render_text", "tree_to_json", "InvalidGraph", "NoConsumer",
    "TargetDescriptor", "avx2_like", "avx512_like", "neon_like",
    "KernelProgram", "Instr",
    "compile", "compile_tree", "compile_single_operand", "execute",
    "CompiledKernel", "BlockTooLarge", "HasReduction",
    "reference_eval", "count_flops", "arithmetic_intensity", "bytes_moved",
    "benchmark", "ScheduleStats", "ShapeMismatch", "slot_shapes",
    "tune",
]

__version__ = "0.1.0"
