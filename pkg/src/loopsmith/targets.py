"""Virtual machine targets: vector width, register-file size, unroll budget,
and cache sizes. These drive every backend decision; the named presets mirror
common ISA families but are configuration, not measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class TargetDescriptor:
    name: str
    lanes: int                 # f32 elements per vector register
    vregs: int                 # vector register count
    unroll_limit: int = 320    # max instructions in the unrolled region
    cache_sizes: list[int] = field(default_factory=lambda: [32 * 1024, 1024 * 1024])

    def __post_init__(self) -> None:
        if self.lanes not in (4, 8, 16):
            raise ValueError(f"lanes must be 4, 8 or 16, got {self.lanes}")
        if self.vregs not in (16, 32):
            raise ValueError(f"vregs must be 16 or 32, got {self.vregs}")


def avx512_like() -> TargetDescriptor:
    return TargetDescriptor("avx512-like", lanes=16, vregs=32,
                            cache_sizes=[32 * 1024, 1024 * 1024, 32 * 1024 * 1024])


def avx2_like() -> TargetDescriptor:
    return TargetDescriptor("avx2-like", lanes=8, vregs=16,
                            cache_sizes=[32 * 1024, 512 * 1024, 8 * 1024 * 1024])


def neon_like() -> TargetDescriptor:
    return TargetDescriptor("neon-like", lanes=4, vregs=32,
                            cache_sizes=[64 * 1024, 1024 * 1024])


PRESETS = {
    "avx512-like": avx512_like,
    "avx2-like": avx2_like,
    "neon-like": neon_like,
}


def by_name(name: str) -> TargetDescriptor:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown target {name!r}; known: {sorted(PRESETS)}") from None
