"""Record, replay, and mutation-fuzz VM exits on a simulated vCPU.

The simulator models the VMCS-and-exit half of hardware virtualization on a
virtual clock: a scripted guest raises exits, a reference hypervisor handles
them under block coverage, a recorder serializes each exit's inputs, and a
replayer feeds them back into a dummy VM so the handlers rerun bit-for-bit.
"""

from .fuzzer import CampaignResult, Mutation, apply_mutation, run_config, run_test_case
from .recorder import Trace, load_snapshot, load_trace, record, save_snapshot, save_trace
from .replayer import (
    Replayer,
    compute_accuracy,
    ideal_throughput,
    measure_speedup,
    measure_throughput,
)
from .session import Session, prepare_session
from .vmx import CpuMode, ExitReason, Vmcs, classify_cr0_mode

__version__ = "0.1.0"

__all__ = [
    "CampaignResult",
    "CpuMode",
    "ExitReason",
    "Mutation",
    "Replayer",
    "Session",
    "Trace",
    "Vmcs",
    "apply_mutation",
    "classify_cr0_mode",
    "compute_accuracy",
    "ideal_throughput",
    "load_snapshot",
    "load_trace",
    "measure_speedup",
    "measure_throughput",
    "prepare_session",
    "record",
    "run_config",
    "run_test_case",
    "save_snapshot",
    "save_trace",
    "__version__",
]
