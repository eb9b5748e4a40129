import json

import pytest
from hypothesis import given, strategies as st

from smfuse.workload import (FULL_MASK, WARP_SIZE, KernelSpec, KernelSpecError, Kind,
                             divergence_phased_kernel, generate_kernel, is_divergent_phase,
                             kind_fractions, load_kernel_file, write_kernel_file)


def _spec(**kw):
    base = dict(name="k", cta_count=2, warps_per_cta=2, instructions_per_warp=100, seed=1)
    base.update(kw)
    return KernelSpec(**base)


def replay_masks(stream):
    """Independent SIMT replay: yields (pc, active, instr) for every slot."""
    active = FULL_MASK
    stack = []
    pc = 0
    while pc < len(stream):
        while stack and stack[-1][0] == pc:
            active = stack.pop()[1]
        ins = stream[pc]
        yield pc, active, ins
        if ins.kind is Kind.BRANCH and ins.taken_mask == 0:
            pc = ins.reconv          # nobody takes the body
            continue
        if ins.kind is Kind.BRANCH and ins.taken_mask != active:
            stack.append((ins.reconv, active))
            active = ins.taken_mask
        pc += 1


def test_degenerate_rates_give_compute_only():
    for cta in generate_kernel(_spec()):
        for stream in cta.streams:
            kinds = {i.kind for i in stream}
            assert kinds == {Kind.COMPUTE, Kind.EXIT}
            assert stream[-1].kind is Kind.EXIT


def test_same_seed_is_bit_identical():
    spec = _spec(load_rate=0.3, branch_rate=0.2, branch_divergence_prob=0.7, locality=0.4, seed=42)
    assert generate_kernel(spec) == generate_kernel(spec)


def test_different_seed_changes_streams():
    a = _spec(load_rate=0.3, branch_rate=0.2, branch_divergence_prob=0.7, seed=1)
    b = _spec(load_rate=0.3, branch_rate=0.2, branch_divergence_prob=0.7, seed=2)
    assert generate_kernel(a) != generate_kernel(b)


def test_load_fraction_converges():
    spec = _spec(cta_count=1, warps_per_cta=1, load_rate=0.3, instructions_per_warp=10000)
    frac = kind_fractions(generate_kernel(spec))[Kind.LOAD]
    assert 0.297 <= frac <= 0.303


def test_all_kind_rates_within_one_percent():
    spec = _spec(cta_count=1, warps_per_cta=1, instructions_per_warp=20000,
                 load_rate=0.2, store_rate=0.1, branch_rate=0.15)
    fr = kind_fractions(generate_kernel(spec))
    assert abs(fr[Kind.LOAD] - 0.2) <= 0.01
    assert abs(fr[Kind.STORE] - 0.1) <= 0.01
    assert abs(fr[Kind.BRANCH] - 0.15) <= 0.01


def test_streams_share_length_and_end_with_exit(small_spec):
    for cta in generate_kernel(small_spec):
        lengths = {len(s) for s in cta.streams}
        assert lengths == {small_spec.instructions_per_warp}
        assert all(s[-1].kind is Kind.EXIT for s in cta.streams)
        assert cta.warp_count == small_spec.warps_per_cta


def test_address_vectors_have_32_entries_and_null_inactive(small_spec):
    for cta in generate_kernel(small_spec):
        for stream in cta.streams:
            for _, active, ins in replay_masks(stream):
                if ins.kind in (Kind.LOAD, Kind.STORE):
                    assert len(ins.addresses) == WARP_SIZE
                    for lane, a in enumerate(ins.addresses):
                        assert (a is None) == (not active >> lane & 1)


def test_reconvergence_point_is_later(small_spec):
    for cta in generate_kernel(small_spec):
        for stream in cta.streams:
            for pc, ins in enumerate(stream):
                if ins.kind is Kind.BRANCH:
                    assert pc < ins.reconv < len(stream)


def test_stride_and_locality_one_gives_unit_stride_lines():
    spec = _spec(load_rate=0.5, locality=1.0, access_stride_bytes=4, access_footprint_bytes=4096)
    for cta in generate_kernel(spec):
        for ins in cta.streams[0]:
            if ins.kind is Kind.LOAD:
                base = ins.addresses[0]
                assert list(ins.addresses) == [base + 4 * i for i in range(WARP_SIZE)]
                assert all(a < 4096 for a in ins.addresses)


def test_locality_zero_touches_only_fresh_lines():
    spec = _spec(load_rate=0.5, locality=0.0, access_stride_bytes=128)
    seen = set()
    for cta in generate_kernel(spec):
        for stream in cta.streams:
            for ins in stream:
                if ins.kind is Kind.LOAD:
                    lines = {a // 128 for a in ins.addresses}
                    assert not lines & seen
                    seen |= lines


def test_hot_fraction_tracks_locality():
    spec = _spec(cta_count=16, warps_per_cta=4, load_rate=0.5, locality=0.7,
                 access_footprint_bytes=8192, instructions_per_warp=40)
    hot = total = 0
    for cta in generate_kernel(spec):
        for stream in cta.streams:
            for ins in stream:
                if ins.kind is Kind.LOAD:
                    total += 32
                    hot += sum(a < 8192 for a in ins.addresses)
    assert abs(hot / total - 0.7) < 0.08


def test_phased_kernel_one_low_then_one_high():
    base = _spec(branch_rate=0.3, branch_divergence_prob=1.0, instructions_per_warp=80)
    spec = divergence_phased_kernel(base, 79)
    assert [is_divergent_phase(spec, pc) for pc in (0, 78, 79)] == [False, False, True]


def test_phased_kernel_low_phase_masks_are_full():
    base = _spec(branch_rate=0.3, branch_divergence_prob=0.0, instructions_per_warp=200)
    spec = divergence_phased_kernel(base, 50)
    for cta in generate_kernel(spec):
        for stream in cta.streams:
            for pc, active, ins in replay_masks(stream):
                if ins.kind is Kind.BRANCH and not is_divergent_phase(spec, pc):
                    assert ins.taken_mask == active == FULL_MASK


def test_phased_kernel_windows_alternate():
    base = _spec(cta_count=1, warps_per_cta=4, instructions_per_warp=2000,
                 branch_rate=0.2, branch_divergence_prob=0.9)
    spec = divergence_phased_kernel(base, 500)
    splits = [0] * 4
    for cta in generate_kernel(spec):
        for stream in cta.streams:
            for pc, active, ins in replay_masks(stream):
                if ins.kind is Kind.BRANCH and 0 < ins.taken_mask != active:
                    splits[pc // 500] += 1
    assert splits[0] == 0 and splits[2] == 0
    assert splits[1] > 20 and splits[3] > 20


def test_phase_len_must_be_below_length():
    with pytest.raises(KernelSpecError):
        divergence_phased_kernel(_spec(instructions_per_warp=50), 50)
    with pytest.raises(KernelSpecError):
        divergence_phased_kernel(_spec(), 0)


def test_kernel_file_round_trip(tmp_path, small_spec):
    p = tmp_path / "k.json"
    write_kernel_file(small_spec, p)
    assert load_kernel_file(p) == small_spec


def test_kernel_file_missing_field_names_it(tmp_path):
    p = tmp_path / "k.json"
    p.write_text(json.dumps({"name": "x", "warps_per_cta": 1, "instructions_per_warp": 10}))
    with pytest.raises(KernelSpecError, match="cta_count"):
        load_kernel_file(p)


def test_kernel_file_bad_rate(tmp_path):
    p = tmp_path / "k.json"
    p.write_text(json.dumps({"name": "x", "cta_count": 1, "warps_per_cta": 1,
                             "instructions_per_warp": 10, "load_rate": 1.5}))
    with pytest.raises(KernelSpecError, match="load_rate"):
        load_kernel_file(p)


def test_kernel_file_bad_type_and_unknown(tmp_path):
    p = tmp_path / "k.json"
    p.write_text(json.dumps({"name": "x", "cta_count": "two", "warps_per_cta": 1,
                             "instructions_per_warp": 10}))
    with pytest.raises(KernelSpecError, match="cta_count"):
        load_kernel_file(p)
    p.write_text(json.dumps({"name": "x", "cta_count": 1, "warps_per_cta": 1,
                             "instructions_per_warp": 10, "bogus": 1}))
    with pytest.raises(KernelSpecError, match="bogus"):
        load_kernel_file(p)


@pytest.mark.parametrize("kw", [dict(load_rate=0.6, store_rate=0.3, branch_rate=0.2),
                                dict(cta_count=0), dict(warps_per_cta=0)])
def test_invalid_specs_rejected(kw):
    with pytest.raises(KernelSpecError):
        _spec(**kw)


@given(load=st.floats(0, 0.4), store=st.floats(0, 0.3), branch=st.floats(0, 0.3),
       div=st.floats(0, 1), seed=st.integers(0, 2**64 - 1))
def test_taken_mask_is_subset_of_active(load, store, branch, div, seed):
    spec = _spec(cta_count=1, warps_per_cta=1, instructions_per_warp=60, load_rate=load,
                 store_rate=store, branch_rate=branch, branch_divergence_prob=div, seed=seed)
    stream = generate_kernel(spec)[0].streams[0]
    for _, active, ins in replay_masks(stream):
        if ins.kind is Kind.BRANCH:
            assert ins.taken_mask & ~active == 0
        assert active != 0
