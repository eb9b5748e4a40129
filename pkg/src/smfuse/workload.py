"""Synthetic kernel generation.

A kernel is a grid of CTAs, each holding warps that run abstract instruction
streams. The instruction *kinds*, compute latencies and reconvergence points
form a kernel-wide program shared by every warp (all threads run the same
code). Branch taken-masks and memory addresses are per-warp data drawn from a
generator keyed by ``(seed, cta_id, warp_id)``, so a CTA's streams do not
depend on where it runs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

WARP_SIZE = 32
FULL_MASK = (1 << WARP_SIZE) - 1
COMPUTE_LATENCY = 4
# Cold (streaming) accesses live far above any hot footprint.
COLD_BASE = 1 << 36
_PROGRAM_TAG = 0x5EED
_WARP_TAG = 0xC7A
# Lane-group granularity at which divergence and hot/cold choices are drawn.
DRAW_GROUP = 8


class KernelSpecError(ValueError):
    """Raised for malformed or invariant-violating kernel specs."""


class Kind(IntEnum):
    COMPUTE = 0
    LOAD = 1
    STORE = 2
    BRANCH = 3
    BARRIER = 4
    EXIT = 5


@dataclass(frozen=True, slots=True)
class AbstractInstr:
    kind: Kind
    latency: int = 0
    # LOAD/STORE: 32 per-lane byte addresses, None for inactive lanes.
    addresses: tuple | None = None
    # BRANCH: lanes (subset of the active mask) that execute the body.
    taken_mask: int | None = None
    reconv: int | None = None


@dataclass(frozen=True)
class KernelSpec:
    name: str
    cta_count: int
    warps_per_cta: int
    instructions_per_warp: int
    load_rate: float = 0.0
    store_rate: float = 0.0
    branch_rate: float = 0.0
    branch_divergence_prob: float = 0.0
    divergent_path_extra_insns: int = 8
    access_stride_bytes: int = 4
    access_footprint_bytes: int = 16384
    locality: float = 0.0
    seed: int = 0
    # 0 = unphased; otherwise alternate calm/divergent phases of this length.
    phase_len: int = 0

    def __post_init__(self) -> None:
        validate_spec(self)

    @property
    def thread_count(self) -> int:
        return self.cta_count * self.warps_per_cta * WARP_SIZE


@dataclass(frozen=True)
class CtaStream:
    cta_id: int
    streams: tuple  # per-warp tuple of AbstractInstr

    @property
    def warp_count(self) -> int:
        return len(self.streams)


_INT_FIELDS = ("cta_count", "warps_per_cta", "instructions_per_warp",
               "divergent_path_extra_insns", "access_stride_bytes",
               "access_footprint_bytes", "seed", "phase_len")
_REQUIRED_FIELDS = ("name", "cta_count", "warps_per_cta", "instructions_per_warp")
_RATE_FIELDS = ("load_rate", "store_rate", "branch_rate",
                "branch_divergence_prob", "locality")


def validate_spec(spec: KernelSpec) -> None:
    if not isinstance(spec.name, str):
        raise KernelSpecError("name: expected a string")
    for name in _INT_FIELDS:
        value = getattr(spec, name)
        if isinstance(value, bool) or not isinstance(value, int):
            raise KernelSpecError(f"{name}: expected an integer, got {value!r}")
    for name in _RATE_FIELDS:
        value = getattr(spec, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise KernelSpecError(f"{name}: expected a number, got {value!r}")
        if not 0.0 <= value <= 1.0:
            raise KernelSpecError(f"{name}: rate {value} outside [0, 1]")
    for name in ("cta_count", "warps_per_cta", "access_stride_bytes",
                 "access_footprint_bytes"):
        if getattr(spec, name) <= 0:
            raise KernelSpecError(f"{name}: must be positive")
    if spec.instructions_per_warp < 2:
        raise KernelSpecError("instructions_per_warp: need at least 2 (body + EXIT)")
    if spec.divergent_path_extra_insns < 0 or spec.phase_len < 0:
        raise KernelSpecError("divergent_path_extra_insns/phase_len: must be >= 0")
    if not 0 <= spec.seed < 2**64:
        raise KernelSpecError("seed: must fit in 64 unsigned bits")
    total = spec.load_rate + spec.store_rate + spec.branch_rate
    if total > 1.0 + 1e-12:
        raise KernelSpecError(
            f"load_rate + store_rate + branch_rate = {total:.4f} exceeds 1")
    if spec.phase_len and spec.phase_len >= spec.instructions_per_warp:
        raise KernelSpecError("phase_len: must be < instructions_per_warp")


def divergence_phased_kernel(base: KernelSpec, phase_len: int) -> KernelSpec:
    """Variant of ``base`` alternating calm and divergent phases.

    Calm phases have full branch masks and warp-coherent hot loads; divergent
    phases use the base divergence probability and per-group hot/cold loads.
    """
    if phase_len <= 0:
        raise KernelSpecError("phase_len: must be positive")
    return replace(base, name=f"{base.name}-phased", phase_len=phase_len)


def is_divergent_phase(spec: KernelSpec, pc: int) -> bool:
    if not spec.phase_len:
        return True
    return (pc // spec.phase_len) % 2 == 1


# -- program ---------------------------------------------------------------

@dataclass(frozen=True)
class Program:
    kinds: tuple
    latencies: tuple
    reconv: tuple  # reconvergence pc per BRANCH, -1 elsewhere
    hot_base: tuple  # per LOAD/STORE hot slice base byte offset, -1 elsewhere


def _exact_kind_sequence(spec: KernelSpec, rng: np.random.Generator) -> list:
    body = spec.instructions_per_warp - 1
    counts = {
        Kind.LOAD: round(spec.load_rate * body),
        Kind.STORE: round(spec.store_rate * body),
        Kind.BRANCH: round(spec.branch_rate * body),
    }
    while sum(counts.values()) > body:
        biggest = max(counts, key=lambda k: (counts[k], -int(k)))
        counts[biggest] -= 1
    kinds = [Kind.COMPUTE] * body
    pos = 0
    for kind in (Kind.LOAD, Kind.STORE, Kind.BRANCH):
        kinds[pos:pos + counts[kind]] = [kind] * counts[kind]
        pos += counts[kind]
    order = rng.permutation(body)
    return [kinds[i] for i in order] + [Kind.EXIT]


def build_program(spec: KernelSpec) -> Program:
    rng = np.random.default_rng([spec.seed, _PROGRAM_TAG])
    kinds = _exact_kind_sequence(spec, rng)
    n = len(kinds)
    exit_pc = n - 1
    reconv = [-1] * n
    enclosing: list[int] = []
    for pc, kind in enumerate(kinds):
        while enclosing and enclosing[-1] <= pc:
            enclosing.pop()
        if kind is Kind.BRANCH:
            limit = enclosing[-1] if enclosing else exit_pc
            if spec.phase_len:
                # paths close before the phase ends so calm phases start converged
                limit = min(limit, (pc // spec.phase_len + 1) * spec.phase_len)
            r = min(pc + 1 + spec.divergent_path_extra_insns, limit)
            reconv[pc] = r
            if r > pc + 1:
                enclosing.append(r)
    slice_bytes = WARP_SIZE * spec.access_stride_bytes
    n_slices = max(1, spec.access_footprint_bytes // slice_bytes)
    slices = rng.integers(0, n_slices, size=n)
    hot_base = tuple(int(slices[pc]) * slice_bytes if k in (Kind.LOAD, Kind.STORE) else -1
                     for pc, k in enumerate(kinds))
    latencies = tuple(COMPUTE_LATENCY if k in (Kind.COMPUTE, Kind.BRANCH) else 0
                      for k in kinds)
    return Program(tuple(kinds), latencies, tuple(reconv), hot_base)


# -- per-warp streams ------------------------------------------------------

def _group_masks(active: int) -> list[int]:
    return [m for m in ((0xFF << s) for s in range(0, WARP_SIZE, DRAW_GROUP)) if active & m]


def _divergent_mask(active: int, rng: np.random.Generator) -> int:
    groups = _group_masks(active)
    if len(groups) >= 2:
        for _ in range(8):
            picks = rng.random(len(groups)) < 0.5
            taken = 0
            for g, pick in zip(groups, picks):
                if pick:
                    taken |= g & active
            if taken and taken != active:
                return taken
    lanes = [i for i in range(WARP_SIZE) if active >> i & 1]
    if len(lanes) < 2:
        return active
    k = int(rng.integers(1, len(lanes)))
    chosen = rng.choice(len(lanes), size=k, replace=False)
    return sum(1 << lanes[i] for i in chosen)


def _warp_stream(spec: KernelSpec, program: Program, cta_id: int, warp_id: int,
                 shared: dict) -> tuple:
    rng = np.random.default_rng([spec.seed, _WARP_TAG, cta_id, warp_id])
    stride = spec.access_stride_bytes
    footprint = spec.access_footprint_bytes
    total_threads = spec.thread_count
    first_tid = (cta_id * spec.warps_per_cta + warp_id) * WARP_SIZE
    active = FULL_MASK
    stack: list[tuple[int, int]] = []
    out = []
    n_groups = WARP_SIZE // DRAW_GROUP
    phase = -1
    hot = [True] * n_groups
    for pc, kind in enumerate(program.kinds):
        while stack and stack[-1][0] == pc:
            active = stack.pop()[1]
        divergent_phase = is_divergent_phase(spec, pc)
        this_phase = pc // spec.phase_len if spec.phase_len else 0
        if this_phase != phase:
            # lane groups keep their hot/cold character for a whole phase
            phase = this_phase
            if divergent_phase:
                hot = list(rng.random(n_groups) < spec.locality)
            else:
                hot = [True] * n_groups
        if kind is Kind.BRANCH:
            if not divergent_phase:
                taken = active
            elif rng.random() < spec.branch_divergence_prob:
                taken = _divergent_mask(active, rng)
            else:
                # warp-uniform outcome: the whole warp takes or skips the path
                taken = active if rng.random() < 0.5 else 0
            r = program.reconv[pc]
            out.append(AbstractInstr(kind, program.latencies[pc], taken_mask=taken, reconv=r))
            if taken != active:
                stack.append((r, active))
                active = taken
                while stack and stack[-1][0] == pc + 1:
                    active = stack.pop()[1]
        elif kind in (Kind.LOAD, Kind.STORE):
            base = program.hot_base[pc]
            addrs = [None] * WARP_SIZE
            for lane in range(WARP_SIZE):
                if not active >> lane & 1:
                    continue
                if hot[lane // DRAW_GROUP]:
                    addrs[lane] = (base + lane * stride) % footprint
                else:
                    addrs[lane] = COLD_BASE + (pc * total_threads + first_tid + lane) * stride
            out.append(AbstractInstr(kind, addresses=tuple(addrs)))
        else:
            key = (kind, program.latencies[pc])
            instr = shared.get(key)
            if instr is None:
                instr = shared[key] = AbstractInstr(kind, program.latencies[pc])
            out.append(instr)
    return tuple(out)


def generate_kernel(spec: KernelSpec) -> list[CtaStream]:
    """Expand ``spec`` into per-CTA instruction streams (deterministic)."""
    validate_spec(spec)
    program = build_program(spec)
    shared: dict = {}
    return [
        CtaStream(cta, tuple(_warp_stream(spec, program, cta, w, shared)
                             for w in range(spec.warps_per_cta)))
        for cta in range(spec.cta_count)
    ]


def kind_fractions(ctas: list[CtaStream]) -> dict[Kind, float]:
    counts = {k: 0 for k in Kind}
    total = 0
    for cta in ctas:
        for stream in cta.streams:
            for instr in stream:
                counts[instr.kind] += 1
            total += len(stream)
    return {k: counts[k] / total for k in Kind}


# -- files -----------------------------------------------------------------

def kernel_to_dict(spec: KernelSpec) -> dict:
    return asdict(spec)


def kernel_from_dict(data: dict) -> KernelSpec:
    if not isinstance(data, dict):
        raise KernelSpecError("kernel file: expected a JSON object")
    known = {f.name for f in fields(KernelSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise KernelSpecError(f"{unknown[0]}: unknown field")
    for name in _REQUIRED_FIELDS:
        if name not in data:
            raise KernelSpecError(f"{name}: required field missing")
    return KernelSpec(**data)


def load_kernel_file(path: str | Path) -> KernelSpec:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KernelSpecError(f"{path}: invalid JSON ({exc.msg})") from exc
    return kernel_from_dict(data)


def write_kernel_file(spec: KernelSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(kernel_to_dict(spec), indent=2) + "\n")

