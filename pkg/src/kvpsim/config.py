"""Simulation inputs: model, hardware, workload and kernel variant.

Scenario documents are JSON objects with the sections ``model``,
``hardware``, ``workload`` and ``variant``. ``model`` and ``hardware`` may be
a preset name or an object holding a ``preset`` key plus field overrides.
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, fields, replace
from enum import Enum
from typing import Any, Iterable

KIB = 1 << 10
MIB = 1 << 20
GIB = 1 << 30

WARP_SIZE = 32


class ConfigError(ValueError):
    """Invalid scenario input (syntax, unknown key, or broken invariant)."""


class VariantKind(str, Enum):
    BASELINE = "baseline"
    PREFETCH_K = "prefetch_k"
    PREFETCH_KV = "prefetch_kv"


class EvictionPriority(str, Enum):
    NORMAL = "normal"
    EVICT_FIRST = "evict_first"


class AllocationPolicy(str, Enum):
    SEQUENTIAL = "sequential"
    SHUFFLED = "shuffled"


def _require_positive(obj: Any, names: Iterable[str]) -> None:
    for name in names:
        value = getattr(obj, name)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{type(obj).__name__}.{name}: must be an integer, got {value!r}")
        if value <= 0:
            raise ConfigError(f"{type(obj).__name__}.{name}: must be > 0, got {value}")


@dataclass(frozen=True)
class ModelConfig:
    bytes_per_param: int
    head_dim: int
    tokens_per_block: int
    threads_per_block: int
    q_heads: int
    kv_heads: int

    def __post_init__(self) -> None:
        _require_positive(self, [f.name for f in fields(self)])
        if self.threads_per_block % WARP_SIZE:
            raise ConfigError(
                f"ModelConfig.threads_per_block: {self.threads_per_block} is not divisible by {WARP_SIZE}"
            )
        if self.q_heads % self.kv_heads:
            raise ConfigError(
                f"ModelConfig.q_heads: {self.q_heads} is not divisible by kv_heads={self.kv_heads}"
            )

    @property
    def warps_per_block(self) -> int:
        return self.threads_per_block // WARP_SIZE

    @property
    def group_size(self) -> int:
        """Query heads served by one KV head."""
        return self.q_heads // self.kv_heads


@dataclass(frozen=True)
class HardwareConfig:
    l1_capacity: int
    l2_capacity: int
    line_size: int
    lat_l1: int
    lat_l2: int
    lat_hbm: int
    bw_l2: int
    bw_hbm: int
    sm_count: int
    max_blocks_per_sm: int
    prefetch_queue_depth: int
    hbm_capacity: int = 4 * GIB

    def __post_init__(self) -> None:
        names = [f.name for f in fields(self) if f.name != "prefetch_queue_depth"]
        _require_positive(self, names)
        depth = self.prefetch_queue_depth
        if not isinstance(depth, int) or isinstance(depth, bool) or depth < 0:
            raise ConfigError(f"HardwareConfig.prefetch_queue_depth: must be an integer >= 0, got {depth!r}")
        if not self.lat_l1 < self.lat_l2 < self.lat_hbm:
            raise ConfigError(
                "HardwareConfig.lat_l1/lat_l2/lat_hbm: must satisfy lat_l1 < lat_l2 < lat_hbm, "
                f"got {self.lat_l1}/{self.lat_l2}/{self.lat_hbm}"
            )
        if not self.bw_hbm < self.bw_l2:
            raise ConfigError(f"HardwareConfig.bw_hbm: must be < bw_l2, got {self.bw_hbm} >= {self.bw_l2}")
        for name in ("l1_capacity", "l2_capacity"):
            if getattr(self, name) % self.line_size:
                raise ConfigError(f"HardwareConfig.{name}: not a multiple of line_size={self.line_size}")


@dataclass(frozen=True)
class WorkloadConfig:
    batch: int
    seq_len: int
    compute_cycles_qk: int
    compute_cycles_lv: int
    allocation_policy: AllocationPolicy = AllocationPolicy.SEQUENTIAL
    seed: int = 0

    def __post_init__(self) -> None:
        _require_positive(self, ["batch", "seq_len", "compute_cycles_qk", "compute_cycles_lv"])
        try:
            object.__setattr__(self, "allocation_policy", AllocationPolicy(self.allocation_policy))
        except ValueError:
            raise ConfigError(
                f"WorkloadConfig.allocation_policy: unknown policy {self.allocation_policy!r}"
            ) from None
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"WorkloadConfig.seed: must be an integer, got {self.seed!r}")


@dataclass(frozen=True)
class KernelVariant:
    kind: VariantKind = VariantKind.BASELINE
    eviction_priority: EvictionPriority = EvictionPriority.NORMAL
    # Issue the next-block prefetch together with the current load instead of
    # at compute-phase entry.
    prefetch_at_load_issue: bool = False

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", VariantKind(self.kind))
        except ValueError:
            raise ConfigError(f"KernelVariant.kind: unknown variant {self.kind!r}") from None
        try:
            object.__setattr__(self, "eviction_priority", EvictionPriority(self.eviction_priority))
        except ValueError:
            raise ConfigError(
                f"KernelVariant.eviction_priority: unknown priority {self.eviction_priority!r}"
            ) from None
        if not isinstance(self.prefetch_at_load_issue, bool):
            raise ConfigError("KernelVariant.prefetch_at_load_issue: must be a boolean")

    @property
    def prefetches(self) -> bool:
        return self.kind is not VariantKind.BASELINE


@dataclass(frozen=True)
class Scenario:
    model: ModelConfig
    hardware: HardwareConfig
    workload: WorkloadConfig
    variant: KernelVariant = KernelVariant()

    def __post_init__(self) -> None:
        if self.variant.prefetches and self.hardware.prefetch_queue_depth < 1:
            raise ConfigError(
                f"KernelVariant.kind: {self.variant.kind.value} requires hardware.prefetch_queue_depth >= 1"
            )

    def with_variant(self, kind: VariantKind | str, **kw: Any) -> "Scenario":
        return replace(self, variant=replace(self.variant, kind=VariantKind(kind), **kw))


# --- presets -----------------------------------------------------------------

_MODEL_PRESETS = {
    "llama2-7b": (32, 32),
    "llama3-8b": (32, 8),
    "qwen2.5-7b": (28, 4),
    "qwen2.5-14b": (40, 8),
}

MODEL_PRESETS = tuple(_MODEL_PRESETS)
HARDWARE_PRESETS = ("h20", "h100", "custom-small")


def preset_model(name: str) -> ModelConfig:
    """fp16, head_dim 128, 16-token blocks, 128 threads; head layout per model."""
    try:
        q_heads, kv_heads = _MODEL_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset model {name!r} (choose from {', '.join(MODEL_PRESETS)})") from None
    return ModelConfig(
        bytes_per_param=2,
        head_dim=128,
        tokens_per_block=16,
        threads_per_block=128,
        q_heads=q_heads,
        kv_heads=kv_heads,
    )


def _l2_bandwidth(bw_hbm: int) -> int:
    # keep the L2:HBM bandwidth ratio of a Hopper part (12 TB/s : 3.35 TB/s)
    return round(bw_hbm * 12 / 3.35)


def preset_hardware(name: str) -> HardwareConfig:
    common = dict(line_size=128, lat_l1=32, lat_l2=200, lat_hbm=600, max_blocks_per_sm=2)
    if name == "h20":
        bw = 8192
        return HardwareConfig(
            l1_capacity=256 * KIB, l2_capacity=60 * MIB, bw_hbm=bw, bw_l2=_l2_bandwidth(bw),
            sm_count=78, prefetch_queue_depth=2048, **common,
        )
    if name == "h100":
        bw = 6912
        return HardwareConfig(
            l1_capacity=256 * KIB, l2_capacity=60 * MIB, bw_hbm=bw, bw_l2=_l2_bandwidth(bw),
            sm_count=132, prefetch_queue_depth=2048, **common,
        )
    if name == "custom-small":
        bw = 2048
        return HardwareConfig(
            l1_capacity=16 * KIB, l2_capacity=256 * KIB, bw_hbm=bw, bw_l2=_l2_bandwidth(bw),
            sm_count=78, prefetch_queue_depth=2048, **common,
        )
    raise ConfigError(f"unknown preset hardware {name!r} (choose from {', '.join(HARDWARE_PRESETS)})")


def default_compute_cycles(model: ModelConfig, flops_per_cycle: int = 128) -> int:
    """Cycles for one block's dot products at a nominal per-warp FLOP rate."""
    return math.ceil(2 * model.head_dim * model.tokens_per_block / flops_per_cycle)


def make_workload(model: ModelConfig, batch: int = 1, seq_len: int = 4096, **kw: Any) -> WorkloadConfig:
    cycles = default_compute_cycles(model)
    kw.setdefault("compute_cycles_qk", cycles)
    kw.setdefault("compute_cycles_lv", cycles)
    return WorkloadConfig(batch=batch, seq_len=seq_len, **kw)


def make_scenario(
    model: str | ModelConfig = "llama2-7b",
    hardware: str | HardwareConfig = "h20",
    batch: int = 1,
    seq_len: int = 4096,
    variant: VariantKind | str = VariantKind.BASELINE,
    eviction_priority: EvictionPriority | str = EvictionPriority.NORMAL,
    **workload_kw: Any,
) -> Scenario:
    """Convenience constructor from preset names."""
    m = preset_model(model) if isinstance(model, str) else model
    hw = preset_hardware(hardware) if isinstance(hardware, str) else hardware
    return Scenario(
        model=m,
        hardware=hw,
        workload=make_workload(m, batch=batch, seq_len=seq_len, **workload_kw),
        variant=KernelVariant(kind=variant, eviction_priority=eviction_priority),
    )


# --- documents -----------------------------------------------------------------

SECTIONS = ("model", "hardware", "workload", "variant")
_FIELDS = {
    "model": {f.name for f in fields(ModelConfig)},
    "hardware": {f.name for f in fields(HardwareConfig)},
    "workload": {f.name for f in fields(WorkloadConfig)},
    "variant": {f.name for f in fields(KernelVariant)},
}


def _section_dict(section: str, raw: Any) -> dict:
    if isinstance(raw, str):
        raw = {"preset": raw} if section in ("model", "hardware") else {"kind": raw}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r}: expected an object or a name, got {type(raw).__name__}")
    allowed = _FIELDS[section] | ({"preset"} if section in ("model", "hardware") else set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"section {section!r}: unknown key {unknown[0]!r}")
    return dict(raw)


def _build(cls: type, section: str, values: dict) -> Any:
    missing = sorted(f.name for f in fields(cls) if f.name not in values and f.default is MISSING)
    if missing:
        raise ConfigError(f"section {section!r}: missing required key {missing[0]!r}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def scenario_from_dict(doc: Any) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} (expected sections {', '.join(SECTIONS)})")
    if "model" not in doc:
        raise ConfigError('missing required section "model"')

    m = _section_dict("model", doc["model"])
    base = asdict(preset_model(m.pop("preset"))) if "preset" in m else {}
    model = _build(ModelConfig, "model", {**base, **m})

    h = _section_dict("hardware", doc.get("hardware", "h20"))
    base = asdict(preset_hardware(h.pop("preset"))) if "preset" in h else {}
    hardware = _build(HardwareConfig, "hardware", {**base, **h})

    w = _section_dict("workload", doc.get("workload", {}))
    cycles = default_compute_cycles(model)
    w.setdefault("batch", 1)
    w.setdefault("seq_len", 4096)
    w.setdefault("compute_cycles_qk", cycles)
    w.setdefault("compute_cycles_lv", cycles)
    workload = _build(WorkloadConfig, "workload", w)

    v = _section_dict("variant", doc.get("variant", {}))
    variant = _build(KernelVariant, "variant", v)
    return Scenario(model=model, hardware=hardware, workload=workload, variant=variant)


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are read as JSON when possible."""
    doc = dict(doc)
    for item in overrides:
        path, sep, value = item.partition("=")
        section, dot, key = path.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        current = doc.get(section, {})
        if isinstance(current, str):
            current = {"preset": current} if section in ("model", "hardware") else {"kind": current}
        doc[section] = {**current, key: _coerce(value.strip())}
    return doc


def load_document(text: str) -> dict:
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def parse_scenario(text: str, overrides: Iterable[str] = ()) -> Scenario:
    """Parse a JSON scenario document, then apply ``--set`` style overrides."""
    return scenario_from_dict(apply_overrides(load_document(text), overrides))


def scenario_to_dict(s: Scenario) -> dict:
    def plain(obj: Any) -> dict:
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(obj).items()}

    return {name: plain(getattr(s, name)) for name in SECTIONS}


def render_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2, sort_keys=True) + "\n"
