from dataclasses import replace

import pytest

from reference import thread_counts
from smfuse.gpu import SCHEMES, Gpu, GpuConfig, config_from_dict, config_to_dict, sample_metrics
from smfuse.harness import run
from smfuse.memsys import ConfigError
from smfuse.predictor import SamplingInconclusive, constant_model
from smfuse.smcore import SmConfig
from smfuse.workload import KernelSpec, divergence_phased_kernel, generate_kernel

ALWAYS_FUSE = constant_model(1.0)


def phased(seed=1, ctas=8):
    base = KernelSpec(name="ph", cta_count=ctas, warps_per_cta=4, instructions_per_warp=120,
                      load_rate=0.25, branch_rate=0.1, branch_divergence_prob=0.6,
                      locality=0.7, seed=seed)
    return divergence_phased_kernel(base, 30)


def desk(scheme, **kw):
    return GpuConfig.desk(scheme=scheme, sm=SmConfig(max_ctas=2), **kw)


def _no_skip(self, now):
    return now + 1


@pytest.mark.parametrize("scheme", ["baseline", "static_fuse", "direct_split", "warp_regroup"])
def test_fast_forward_is_exact(scheme, monkeypatch):
    k = phased()
    fast = run(desk(scheme), k, ALWAYS_FUSE)
    monkeypatch.setattr(Gpu, "_next_time", _no_skip)
    slow = run(desk(scheme), k, ALWAYS_FUSE)
    a, b = fast.scalars(), slow.scalars()
    a.pop("wall_seconds"), b.pop("wall_seconds")
    assert a == b
    assert fast.timeline == slow.timeline


@pytest.mark.parametrize("scheme", SCHEMES)
def test_every_thread_retires_its_stream(scheme):
    k = phased(ctas=6)
    r = run(desk(scheme, track_threads=True), k, ALWAYS_FUSE)
    assert r.thread_counts == thread_counts(k)


def test_dynamic_run_splits_and_conserves():
    base = KernelSpec(name="ph", cta_count=32, warps_per_cta=4, instructions_per_warp=200,
                      load_rate=0.25, branch_rate=0.0, locality=0.8, seed=1)
    k = divergence_phased_kernel(base, 50)
    r = run(desk("warp_regroup", track_threads=True), k, ALWAYS_FUSE)
    assert r.split_events > 0
    assert r.thread_counts == thread_counts(k)
    assert all(before == after for _, _, before, after in r.lane_audit)


def test_cross_scheme_totals_match():
    k = phased(seed=3)
    totals = {run(desk(s), k, ALWAYS_FUSE).thread_insns for s in SCHEMES}
    assert len(totals) == 1


def test_runs_are_deterministic():
    k = phased(seed=4)
    a = run(desk("direct_split"), k, ALWAYS_FUSE).scalars()
    b = run(desk("direct_split"), k, ALWAYS_FUSE).scalars()
    a.pop("wall_seconds"), b.pop("wall_seconds")
    assert a == b


def test_uniform_stride_spreads_over_all_mcs():
    k = KernelSpec(name="s", cta_count=8, warps_per_cta=2, instructions_per_warp=60,
                   load_rate=0.5, access_stride_bytes=128, locality=0.0, seed=1)
    g = Gpu(GpuConfig(), generate_kernel(k))
    g.run_until(g.finished)
    reads = [mc.stats.reads for mc in g.mcs]
    assert min(reads) > 0
    assert max(reads) - min(reads) <= 0.1 * sum(reads) / len(reads) + 1


def test_single_warp_stride_one_coalescing():
    k = KernelSpec(name="c", cta_count=1, warps_per_cta=1, instructions_per_warp=200,
                   load_rate=0.2, access_stride_bytes=4, locality=1.0, seed=2)
    g = Gpu(GpuConfig.desk(), generate_kernel(k))
    g.run_until(g.finished)
    m = g.metric_vector(g.now)
    assert m.coalescing == pytest.approx(1 / 32)
    assert m.control_divergent == 0 and m.store_inst_rate == 0


def test_icnt_stall_counts_blocked_cycles():
    k = KernelSpec(name="s", cta_count=1, warps_per_cta=1, instructions_per_warp=10, seed=1)
    g = Gpu(GpuConfig.desk(), generate_kernel(k))
    mc = g.mcs[0]
    for port in g.ports.values():
        port.fill = lambda line, now: None    # replies land nowhere; only the MC side matters
    for i in range(4):
        mc.receive(i * 4 * 128, False, g.topo.sm_nodes[i], g.units[i].port.port_id)
        mc.l2.fill(i * 4 * 128)
    for now in range(4):
        mc.service(now)
    start = 4 + g.cfg.l2_latency
    blocked = []
    for now in range(start, start + 200):
        before = mc.stats.icnt_stall_cycles
        g._memory(now)
        inc = mc.stats.icnt_stall_cycles - before
        assert inc in (0, 1)
        if inc:
            assert mc.head_reply(now) is not None    # still holding a reply
        blocked.append(inc)
    assert sum(blocked) >= 1
    assert not mc.replies


def test_perfect_noc_has_unit_latency():
    k = KernelSpec(name="p", cta_count=8, warps_per_cta=2, instructions_per_warp=80,
                   load_rate=0.3, locality=0.2, seed=1)
    r = run(GpuConfig.desk(perfect_noc=True), k)
    assert r.avg_noc_latency == 1.0 and r.icnt_stall_rate == 0.0


def test_scale_up_not_slower_on_coherent_stride_one():
    # needs the full mesh; on a handful of SMs there are too few routers to bypass
    k = KernelSpec(name="c", cta_count=96, warps_per_cta=4, instructions_per_warp=150,
                   load_rate=0.2, access_stride_bytes=4, locality=1.0, seed=1)
    assert run(GpuConfig(scheme="scale_up"), k).ipc >= run(GpuConfig(), k).ipc


def test_empty_window_is_inconclusive():
    g = Gpu(GpuConfig.desk(), generate_kernel(
        KernelSpec(name="e", cta_count=1, warps_per_cta=1, instructions_per_warp=5)))
    with pytest.raises(SamplingInconclusive):
        sample_metrics(g.counters(), 100, 8, g.topo.live_node_count(), 8)


def test_config_round_trip_and_unknown_field():
    cfg = replace(GpuConfig(), scheme="warp_regroup", sm=SmConfig(max_ctas=2))
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"scheme": "nope"}).validate()
