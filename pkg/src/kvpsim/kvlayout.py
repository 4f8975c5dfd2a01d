"""Paged KV-cache layout: block footprints, L2 residency bounds, block tables."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterator

from .config import AllocationPolicy, ConfigError, HardwareConfig, ModelConfig, WorkloadConfig, WARP_SIZE


def block_footprint(model: ModelConfig) -> int:
    """Bytes held by one KV block: one head, ``tokens_per_block`` tokens."""
    return model.bytes_per_param * model.head_dim * model.tokens_per_block


def per_iteration_footprint(model: ModelConfig, batch: int) -> int:
    """Bytes of K blocks touched by all warps of the grid in one loop iteration.

    The grid is ``q_heads x batch`` thread blocks of ``threads_per_block / 32``
    warps, each warp holding one block per iteration. Does not depend on the
    sequence length.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return block_footprint(model) * (model.threads_per_block // WARP_SIZE) * model.q_heads * batch


def distinct_iteration_footprint(model: ModelConfig, batch: int) -> int:
    """Like :func:`per_iteration_footprint`, counting shared GQA blocks once."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return block_footprint(model) * (model.threads_per_block // WARP_SIZE) * model.kv_heads * batch


def l2_residency_bound(model: ModelConfig, hw: HardwareConfig) -> int:
    return hw.l2_capacity // per_iteration_footprint(model, 1)


def blocks_per_sequence(seq_len: int, tokens_per_block: int) -> int:
    if seq_len < 1 or tokens_per_block < 1:
        raise ValueError("seq_len and tokens_per_block must be >= 1")
    return -(-seq_len // tokens_per_block)


def kv_head_for_q_head(q_head: int, model: ModelConfig) -> int:
    if not 0 <= q_head < model.q_heads:
        raise ValueError(f"q_head {q_head} out of range [0, {model.q_heads})")
    return q_head // model.group_size


@dataclass(frozen=True)
class CapacityReport:
    m_block: int
    m_total_per_batch: int
    m_total: int
    residency_bound_batches: int
    # GQA view: shared blocks counted once
    m_distinct_per_batch: int
    residency_bound_distinct: int
    # K and V working sets resident together
    residency_bound_kv: int

    def to_dict(self) -> dict:
        return {
            "m_block_bytes": self.m_block,
            "m_total_per_batch_bytes": self.m_total_per_batch,
            "m_total_bytes": self.m_total,
            "residency_bound_batches": self.residency_bound_batches,
            "m_distinct_per_batch_bytes": self.m_distinct_per_batch,
            "residency_bound_distinct_batches": self.residency_bound_distinct,
            "residency_bound_kv_batches": self.residency_bound_kv,
        }


def capacity_report(model: ModelConfig, hw: HardwareConfig, batch: int = 1) -> CapacityReport:
    per_batch = per_iteration_footprint(model, 1)
    distinct = distinct_iteration_footprint(model, 1)
    return CapacityReport(
        m_block=block_footprint(model),
        m_total_per_batch=per_batch,
        m_total=per_batch * batch,
        residency_bound_batches=hw.l2_capacity // per_batch,
        m_distinct_per_batch=distinct,
        residency_bound_distinct=hw.l2_capacity // distinct,
        residency_bound_kv=hw.l2_capacity // (2 * per_batch),
    )


@dataclass(frozen=True)
class BlockTable:
    """Physical addresses of one tensor's (K or V) blocks.

    ``addresses`` is flat, indexed by ``(seq * kv_heads + kv_head) * nblocks + ordinal``.
    """

    addresses: tuple[int, ...]
    block_bytes: int
    batch: int
    kv_heads: int
    blocks_per_seq: int

    def lookup(self, seq: int, kv_head: int, ordinal: int) -> int:
        if not (0 <= seq < self.batch and 0 <= kv_head < self.kv_heads and 0 <= ordinal < self.blocks_per_seq):
            raise IndexError(f"block ({seq}, {kv_head}, {ordinal}) not in table")
        return self.addresses[(seq * self.kv_heads + kv_head) * self.blocks_per_seq + ordinal]

    def row(self, seq: int, kv_head: int) -> tuple[int, ...]:
        start = (seq * self.kv_heads + kv_head) * self.blocks_per_seq
        return self.addresses[start:start + self.blocks_per_seq]

    @property
    def entries(self) -> dict[tuple[int, int, int], int]:
        return dict(self.items())

    def items(self) -> Iterator[tuple[tuple[int, int, int], int]]:
        i = 0
        for s in range(self.batch):
            for h in range(self.kv_heads):
                for j in range(self.blocks_per_seq):
                    yield (s, h, j), self.addresses[i]
                    i += 1

    def __len__(self) -> int:
        return len(self.addresses)


@dataclass(frozen=True)
class KVTables:
    k: BlockTable
    v: BlockTable


def _block_stride(block_bytes: int, line_size: int) -> int:
    return -(-block_bytes // line_size) * line_size


def build_block_tables(
    model: ModelConfig,
    workload: WorkloadConfig,
    line_size: int = 128,
    hbm_capacity: int = 1 << 32,
) -> KVTables:
    """Allocate K blocks then V blocks in one simulated HBM address space.

    Blocks are padded to whole lines. The shuffled policy permutes the slot
    order deterministically from ``workload.seed``; the set of addresses is
    the same as under the sequential policy.
    """
    nblocks = blocks_per_sequence(workload.seq_len, model.tokens_per_block)
    m_block = block_footprint(model)
    stride = _block_stride(m_block, line_size)
    count = workload.batch * model.kv_heads * nblocks
    if 2 * count * stride > hbm_capacity:
        raise ConfigError(
            f"hardware.hbm_capacity: KV cache needs {2 * count * stride} bytes, "
            f"simulated HBM holds {hbm_capacity}"
        )
    k_slots = list(range(count))
    v_slots = list(range(count, 2 * count))
    if workload.allocation_policy is AllocationPolicy.SHUFFLED:
        rng = random.Random(workload.seed)
        rng.shuffle(k_slots)
        rng.shuffle(v_slots)

    def table(slots: list[int]) -> BlockTable:
        return BlockTable(
            addresses=tuple(s * stride for s in slots),
            block_bytes=m_block,
            batch=workload.batch,
            kv_heads=model.kv_heads,
            blocks_per_seq=nblocks,
        )

    return KVTables(k=table(k_slots), v=table(v_slots))


def build_block_table(
    model: ModelConfig,
    workload: WorkloadConfig,
    line_size: int = 128,
    hbm_capacity: int = 1 << 32,
) -> BlockTable:
    """K-block table only; see :func:`build_block_tables`."""
    return build_block_tables(model, workload, line_size, hbm_capacity).k

