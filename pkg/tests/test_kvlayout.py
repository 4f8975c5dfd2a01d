import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvpsim.config import ConfigError, ModelConfig, WorkloadConfig, preset_hardware, preset_model
from kvpsim.kernelsim import KernelLaunch
from kvpsim.kvlayout import (
    block_footprint,
    blocks_per_sequence,
    build_block_table,
    build_block_tables,
    capacity_report,
    distinct_iteration_footprint,
    kv_head_for_q_head,
    l2_residency_bound,
    per_iteration_footprint,
)

LLAMA2 = preset_model("llama2-7b")


def model(b=2, d=128, t=16, n=128, q=32, kv=32):
    return ModelConfig(bytes_per_param=b, head_dim=d, tokens_per_block=t, threads_per_block=n, q_heads=q,
                       kv_heads=kv)


def workload(batch, seq_len, **kw):
    return WorkloadConfig(batch=batch, seq_len=seq_len, compute_cycles_qk=1, compute_cycles_lv=1, **kw)


@pytest.mark.parametrize("args, expected", [((2, 128, 16), 4096), ((1, 1, 1), 1), ((2, 64, 16), 2048)])
def test_block_footprint(args, expected):
    b, d, t = args
    assert block_footprint(model(b, d, t)) == expected


def test_per_iteration_footprint():
    assert per_iteration_footprint(LLAMA2, 1) == 524288
    assert per_iteration_footprint(LLAMA2, 2) == 1048576
    assert per_iteration_footprint(model(n=32, q=1, kv=1), 1) == 4096
    with pytest.raises(ValueError):
        per_iteration_footprint(LLAMA2, 0)


@given(st.integers(1, 1024))
def test_footprint_linear_in_batch(b):
    assert per_iteration_footprint(LLAMA2, b) == b * per_iteration_footprint(LLAMA2, 1)


def test_residency_bounds():
    assert l2_residency_bound(LLAMA2, preset_hardware("h100")) == 120
    assert l2_residency_bound(LLAMA2, preset_hardware("custom-small")) == 0
    # independent arithmetic: 60 MiB over 4 KiB blocks * 4 warps * 32 query heads
    expected = (60 * 1024 * 1024) // ((2 * 128 * 16) * (128 // 32) * 32)
    assert expected == 120
    assert l2_residency_bound(preset_model("llama3-8b"), preset_hardware("h20")) == expected


def test_capacity_report():
    r = capacity_report(preset_model("llama3-8b"), preset_hardware("h20"), batch=3)
    assert r.m_block == 4096
    assert r.m_total == 3 * r.m_total_per_batch
    assert r.residency_bound_batches == 62914560 // r.m_total_per_batch == 120
    assert r.m_distinct_per_batch == 4096 * 4 * 8
    assert r.residency_bound_distinct == 480
    assert r.residency_bound_kv == 60
    d = r.to_dict()
    for key in ("m_block_bytes", "m_total_per_batch_bytes", "m_total_bytes", "residency_bound_batches"):
        assert key in d


@pytest.mark.parametrize("seq, t, n", [(4096, 16, 256), (17, 16, 2), (1, 16, 1)])
def test_blocks_per_sequence(seq, t, n):
    assert blocks_per_sequence(seq, t) == n


def test_kv_head_mapping_examples():
    assert kv_head_for_q_head(0, preset_model("llama3-8b")) == 0
    assert kv_head_for_q_head(31, preset_model("llama3-8b")) == 7
    assert kv_head_for_q_head(13, preset_model("qwen2.5-7b")) == 1
    with pytest.raises(ValueError):
        kv_head_for_q_head(32, preset_model("llama3-8b"))


@pytest.mark.parametrize("name", ["llama2-7b", "llama3-8b", "qwen2.5-7b", "qwen2.5-14b"])
def test_each_kv_head_serves_equal_group(name):
    m = preset_model(name)
    served = {}
    for q in range(m.q_heads):
        served.setdefault(kv_head_for_q_head(q, m), []).append(q)
    assert sorted(served) == list(range(m.kv_heads))
    assert all(len(qs) == m.q_heads // m.kv_heads for qs in served.values())
    # groups are contiguous runs of query heads
    assert all(qs == list(range(qs[0], qs[0] + len(qs))) for qs in served.values())


def test_minimal_table():
    t = build_block_table(model(kv=1, q=1), workload(1, 16))
    assert t.entries == {(0, 0, 0): 0}


def test_small_sequential_table():
    m = model(q=2, kv=2)
    t = build_block_table(m, workload(2, 32))
    assert len(t) == 8
    addrs = sorted(t.entries.values())
    assert addrs == [4096 * i for i in range(8)]
    ranges = [(a, a + t.block_bytes) for a in addrs]
    for (a0, a1), (b0, b1) in itertools.combinations(ranges, 2):
        assert a1 <= b0 or b1 <= a0
    # sequential order: addresses increase along the flat index
    assert list(t.addresses) == sorted(t.addresses)


def test_shuffled_table_is_permutation():
    m = model(q=2, kv=2)
    seq = build_block_table(m, workload(2, 32))
    shuf = build_block_table(m, workload(2, 32, allocation_policy="shuffled", seed=7))
    assert set(seq.addresses) == set(shuf.addresses)
    assert seq.addresses != shuf.addresses
    again = build_block_table(m, workload(2, 32, allocation_policy="shuffled", seed=7))
    assert again == shuf


@given(
    batch=st.integers(1, 4),
    seq_len=st.integers(1, 200),
    kv=st.integers(1, 4),
    d=st.integers(1, 100),
    shuffled=st.booleans(),
    seed=st.integers(0, 1000),
)
def test_tables_cover_disjoint_aligned_ranges(batch, seq_len, kv, d, shuffled, seed):
    m = model(d=d, q=kv, kv=kv)
    policy = "shuffled" if shuffled else "sequential"
    tables = build_block_tables(m, workload(batch, seq_len, allocation_policy=policy, seed=seed), line_size=128)
    nblocks = blocks_per_sequence(seq_len, 16)
    for table in (tables.k, tables.v):
        keys = set(table.entries)
        assert keys == set(itertools.product(range(batch), range(kv), range(nblocks)))
    starts = sorted(tables.k.addresses + tables.v.addresses)
    assert all(a % 128 == 0 for a in starts)
    assert all(b - a >= tables.k.block_bytes for a, b in zip(starts, starts[1:]))
    assert not set(tables.k.addresses) & set(tables.v.addresses)


def test_table_count_scales_with_seq_len_but_footprint_does_not():
    m = preset_model("llama2-7b")
    short = build_block_table(m, workload(1, 512))
    long = build_block_table(m, workload(1, 4096))
    assert len(long) == 8 * len(short)
    assert per_iteration_footprint(m, 1) == 524288


def test_hbm_exhaustion_is_config_error():
    with pytest.raises(ConfigError, match="hbm_capacity"):
        build_block_tables(LLAMA2, workload(4, 4096), hbm_capacity=1 << 20)


def test_lookup_out_of_range():
    t = build_block_table(model(q=1, kv=1), workload(1, 16))
    with pytest.raises(IndexError):
        t.lookup(0, 0, 1)


@pytest.mark.parametrize("name", ["llama2-7b", "llama3-8b", "qwen2.5-7b", "qwen2.5-14b"])
def test_gqa_distinct_addresses_per_iteration(name):
    m = preset_model(name)
    wl = workload(2, 4096)
    table = build_block_table(m, wl)
    launch = KernelLaunch(m.q_heads, wl.batch, m.warps_per_block, table.blocks_per_seq)
    for seq in range(wl.batch):
        for it in range(3):
            touched = set()
            for q in range(m.q_heads):
                for w in range(m.warps_per_block):
                    ordinal = launch.warp_range(w)[it]
                    touched.add(table.lookup(seq, kv_head_for_q_head(q, m), ordinal))
            assert len(touched) == m.kv_heads * m.warps_per_block
    assert distinct_iteration_footprint(m, 1) == block_footprint(m) * m.kv_heads * m.warps_per_block


def test_distinct_footprint_matches_per_iteration_for_mha():
    assert distinct_iteration_footprint(LLAMA2, 5) == per_iteration_footprint(LLAMA2, 5)
