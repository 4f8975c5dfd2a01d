"""Trace-driven simulator of paged-attention KV-cache access with L2 prefetching."""

from .config import (
    ConfigError, EvictionPriority, HardwareConfig, KernelVariant, ModelConfig, Scenario,
    VariantKind, WorkloadConfig, make_scenario, parse_scenario, preset_hardware, preset_model,
    render_scenario,
)

__version__ = "0.1.0"
