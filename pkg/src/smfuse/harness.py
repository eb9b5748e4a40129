"""Experiment drivers: one controlled run, budget sweeps, scheme comparison,
training-data collection and CSV reporting."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .gpu import (FUSING_SCHEMES, POLICY, Gpu, GpuConfig, metrics_from_counters,
                  sample_metrics)
from .memsys import ConfigError
from .predictor import (FEATURES, MetricVector, PredictorModel, TrainingSample, accuracy,
                        default_model, impact_magnitudes, load_model, logit,
                        normalized_impacts, predict_fuse, read_samples, save_model, train,
                        SamplingInconclusive)
from .reconfig import Decision, apply_kernel_decision
from .workload import KernelSpec, generate_kernel

SCALAR_FIELDS = (
    "run_id", "kernel", "scheme", "ipc", "l1i_miss_rate", "l1d_miss_rate",
    "actual_memory_access_rate", "control_stall_fraction", "icnt_stall_rate",
    "noc_injection_rate", "avg_noc_latency", "sm_idle_fraction", "total_cycles",
    "thread_insns", "decision", "logit", "sampling_flagged", "split_events",
    "refuse_events", "wall_seconds",
)


@dataclass
class RunReport:
    kernel: str
    scheme: str
    ipc: float
    l1i_miss_rate: float
    l1d_miss_rate: float
    actual_memory_access_rate: float
    control_stall_fraction: float
    icnt_stall_rate: float
    noc_injection_rate: float
    avg_noc_latency: float
    sm_idle_fraction: float
    total_cycles: int
    thread_insns: int
    sampled: MetricVector
    impacts: dict
    decision: str = ""
    logit: float = 0.0
    sampling_flagged: bool = False
    timeline: list = field(default_factory=list)     # (pair, cycle, transition)
    lane_audit: list = field(default_factory=list)   # (pair, cycle, lanes before, after)
    wall_seconds: float = 0.0
    run_id: str = ""
    thread_counts: dict | None = field(default=None, repr=False)

    @property
    def split_events(self) -> int:
        return sum(1 for _, _, t in self.timeline if t == "FUSED->SPLIT_RUNNING")

    @property
    def refuse_events(self) -> int:
        return sum(1 for _, _, t in self.timeline if t == "SPLIT_RUNNING->FUSED")

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in SCALAR_FIELDS}

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "thread_counts"}
        d["sampled"] = asdict(self.sampled)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["sampled"] = MetricVector(**d["sampled"])
        d["timeline"] = [tuple(x) for x in d.get("timeline", [])]
        d["lane_audit"] = [tuple(x) for x in d.get("lane_audit", [])]
        return cls(**d)


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def _sample_done(gpu: Gpu, deadline: int) -> bool:
    return gpu.finished() or gpu.now >= deadline or all(gpu.sm_completed)


def run(cfg: GpuConfig, kernel: KernelSpec, model: PredictorModel | None = None) -> RunReport:
    """Sample on the baseline, predict, reconfigure, run to completion."""
    cfg.validate()
    t0 = time.perf_counter()
    if cfg.seed is not None:
        kernel = replace(kernel, seed=cfg.seed)
    gpu = Gpu(cfg, generate_kernel(kernel))
    scheme = cfg.scheme
    if model is None:
        model = load_model(cfg.model_path) if cfg.model_path else default_model()
    decision = None
    flagged = False

    if scheme == "scale_up":
        gpu.fuse_all(POLICY[scheme])
        decision = Decision.SCALE_UP
        sampled = None
    else:
        window = cfg.sample_cycles
        sampled = None
        for _ in range(cfg.sample_doublings + 1):
            gpu.run_until(lambda: _sample_done(gpu, window), limit=window)
            try:
                sampled = sample_metrics(gpu.counters(), max(1, gpu.now), cfg.sm_count,
                                         gpu.topo.live_node_count(), cfg.sm.max_ctas)
                break
            except SamplingInconclusive:
                if gpu.finished():
                    break
                window *= 2
        if sampled is None:
            flagged = True
            sampled = gpu.metric_vector(max(1, gpu.now))
        if scheme in FUSING_SCHEMES:
            decision = Decision.SCALE_OUT if flagged else predict_fuse(model, sampled)
            if decision is Decision.SCALE_UP and not gpu.finished():
                gpu.dispatch_enabled = False
                gpu.run_until(gpu.drained)
                gpu.idle_for(cfg.reconfig.reconfig_cost)
                apply_kernel_decision(gpu, decision, POLICY[scheme])
                gpu.dispatch_enabled = True
    gpu.run_until(gpu.finished)

    cycles = max(1, gpu.end_cycle)
    c = gpu.counters()
    whole = metrics_from_counters(c, cycles, cfg.sm_count, gpu.topo.live_node_count(),
                                  cfg.sm.max_ctas)
    if sampled is None:
        sampled = whole
    impacts = impact_magnitudes(model, sampled)
    timeline = [(p.pair_id, cyc, t) for p in gpu.pairs for cyc, t in p.events]
    timeline.sort(key=lambda r: (r[1], r[0]))
    audit = [(p.pair_id, *a) for p in gpu.pairs for a in p.lane_audit]
    return RunReport(
        kernel=kernel.name, scheme=scheme,
        ipc=c["core_thread_insns"] / cycles,
        l1i_miss_rate=whole.l1i_miss, l1d_miss_rate=whole.l1d_miss,
        actual_memory_access_rate=whole.coalescing,
        control_stall_fraction=whole.control_divergent,
        icnt_stall_rate=min(1.0, _ratio(c["icnt_stall"], cycles * cfg.mc_count)),
        noc_injection_rate=_ratio(c["injected_flits"], cycles * gpu.topo.live_node_count()),
        avg_noc_latency=whole.avg_noc_latency,
        sm_idle_fraction=_ratio(c["weighted_idle"], c["weighted_cycles"]),
        total_cycles=cycles, thread_insns=c["core_thread_insns"],
        sampled=sampled, impacts=impacts,
        decision=decision.value if decision else "",
        logit=logit(model, sampled), sampling_flagged=flagged,
        timeline=timeline, lane_audit=audit,
        wall_seconds=time.perf_counter() - t0,
        run_id=f"{kernel.name}:{scheme}",
        thread_counts=gpu.threads.counts if gpu.threads is not None else None,
    )


# -- sweeps -------------------------------------------------------------------

DEFAULT_SWEEP_BUDGET = 57_600   # threads; divisible by 16, 25, 36 and 64


def scaled_config(base: GpuConfig, sm_count: int, budget: int) -> GpuConfig:
    """Per-SM resources scaled so that ``sm_count`` SMs share ``budget`` threads."""
    if budget % sm_count:
        raise ConfigError(f"budget {budget} is not divisible by {sm_count} SMs")
    threads = budget // sm_count
    s = threads / base.sm.max_threads
    sm = replace(base.sm, max_threads=threads,
                 simd_width=max(1, round(base.sm.simd_width * s)),
                 max_ctas=max(1, round(base.sm.max_ctas * s)),
                 l1d_kb=base.sm.l1d_kb * s,
                 mshr_entries=max(1, round(base.sm.mshr_entries * s)))
    # SMs with at least twice the base thread budget also get twice-wide warps
    wide = threads >= 2 * base.sm.max_threads
    return replace(base, sm_count=sm_count, sm=sm, scheme="baseline", wide_warps=wide)


def sweep_scaling(kernel: KernelSpec, sm_counts, budget: int | None = None,
                  perfect_noc: bool = False, base: GpuConfig | None = None) -> list[dict]:
    base = base or GpuConfig()
    budget = budget or DEFAULT_SWEEP_BUDGET
    configs = [scaled_config(replace(base, perfect_noc=perfect_noc), n, budget)
               for n in sm_counts]
    rows = []
    ref = None
    for cfg in configs:
        r = run(cfg, kernel)
        ref = r.ipc if ref is None else ref
        rows.append({"sm_count": cfg.sm_count, "threads_per_sm": cfg.sm.max_threads,
                     "simd_width": cfg.sm.simd_width,
                     "warp_lanes": 64 if cfg.wide_warps else 32, "perfect_noc": perfect_noc,
                     "ipc": r.ipc, "normalized_ipc": _ratio(r.ipc, ref),
                     "actual_memory_access_rate": r.actual_memory_access_rate,
                     "control_stall_fraction": r.control_stall_fraction,
                     "avg_noc_latency": r.avg_noc_latency, "total_cycles": r.total_cycles})
    return rows


def compare_schemes(kernel: KernelSpec, schemes, base: GpuConfig | None = None,
                    model: PredictorModel | None = None) -> list[tuple[RunReport, float]]:
    """One report per scheme with its speedup over the baseline run."""
    base = base or GpuConfig()
    reports = {}
    for s in dict.fromkeys(["baseline", *schemes]):
        reports[s] = run(replace(base, scheme=s), kernel, model)
    ref = reports["baseline"].ipc
    return [(reports[s], _ratio(reports[s].ipc, ref)) for s in schemes]


# -- training --------------------------------------------------------------------

def labelled_sample(kernel: KernelSpec, base: GpuConfig) -> TrainingSample:
    """Metrics from the baseline sampling window, labelled by the paired outcome."""
    out = run(replace(base, scheme="baseline"), kernel)
    up = run(replace(base, scheme="scale_up"), kernel)
    return TrainingSample(out.sampled, up.ipc > out.ipc)


def train_cli(data_csv, out_path, lr: float = 0.5, epochs: int = 3000, l2: float = 0.0,
              holdout: float = 0.2, seed: int = 0) -> tuple[PredictorModel, float, float]:
    """Train on a CSV, hold out a deterministic fraction, write the model."""
    samples = read_samples(data_csv)
    order = np.random.default_rng(seed).permutation(len(samples))
    n_test = int(len(samples) * holdout) if len(samples) >= 10 else 0
    test = [samples[i] for i in order[:n_test]]
    fit = [samples[i] for i in order[n_test:]]
    result = train(fit, lr=lr, epochs=epochs, l2=l2)
    save_model(result.model, out_path)
    held = accuracy(result.model, test) if test else result.accuracy
    return result.model, result.accuracy, held


# -- reporting --------------------------------------------------------------------

def report(reports, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "timeline.csv", out / "impact.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(SCALAR_FIELDS))
        w.writeheader()
        for r in reports:
            w.writerow(r.scalars())
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "pair", "cycle", "transition"])
        for r in reports:
            for pair, cyc, t in r.timeline:
                w.writerow([r.run_id, pair, cyc, t])
    terms = ["constant", *FEATURES]
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", *terms, *(f"norm_{t}" for t in terms), "logit"])
        for r in reports:
            norm = normalized_impacts(r.impacts)
            w.writerow([r.run_id, *(r.impacts[t] for t in terms),
                        *(norm[t] for t in terms), math.fsum(r.impacts.values())])
    return paths


def save_report(r: RunReport, path) -> None:
    Path(path).write_text(json.dumps(r.to_json(), indent=1) + "\n")


def load_reports(in_dir) -> list[RunReport]:
    files = sorted(Path(in_dir).glob("*.json"))
    return [RunReport.from_json(json.loads(p.read_text())) for p in files]

