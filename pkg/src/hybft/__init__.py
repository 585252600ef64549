"""Replicated state machine testbed built on trusted monotonic counters.

A 2f+1 replication core with two equivocation defenses (detection via
per-view counters, prevention via context certification), commit-proof
forwarding for client responsiveness, a deterministic adversarial network
simulator, scripted faults, an analytic cost model, and small-model
exhaustive checks.
"""

from .config import ADVERSARY_SCRIPTS, ConfigError, SimConfig, load
from .resource_model import (
    COST_TABLE,
    CostVector,
    Linear,
    SizeModel,
    decision_byte_overhead,
    decision_msg_overhead,
    fault_free_message_counts,
    leader_bandwidth_ratio,
    table1_costs,
    verification_ratio,
)
from .sim import RunResult, Simulator, measure_overhead, run
from .tc import (
    Directory,
    TcMode,
    TrustedComponent,
    VerifyStatus,
    verify_certificate,
)

__all__ = [
    "ADVERSARY_SCRIPTS",
    "COST_TABLE",
    "ConfigError",
    "CostVector",
    "Directory",
    "Linear",
    "RunResult",
    "SimConfig",
    "Simulator",
    "SizeModel",
    "TcMode",
    "TrustedComponent",
    "VerifyStatus",
    "decision_byte_overhead",
    "decision_msg_overhead",
    "fault_free_message_counts",
    "leader_bandwidth_ratio",
    "load",
    "measure_overhead",
    "run",
    "table1_costs",
    "verification_ratio",
    "verify_certificate",
]
