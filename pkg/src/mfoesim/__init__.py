"""Deterministic simulator and trace replay model for hardware-offloaded
minor page fault handling."""

from .engine import FaultOutcome, MfoeEngine, OutcomeKind, PteFaultSm, Tlb
from .kernel import (
    BookkeepingLedger,
    KernelModel,
    MfoeSeStatus,
    ProcessModel,
    VMA,
)
from .params import LatencySampler, ModelParameters
from .prealloc import Cr9Register, HarvestRecord, PreallocTable, ProduceStatus
from .sim import SimConfig, SimReport, Simulation, WorkloadSpec, replay_seeded, run
from .trace import (
    FaultTrace,
    ModelReport,
    SweepGrid,
    TraceModelConfig,
    WORKLOAD_PROFILES,
    apply_model,
    ingest,
    sweep,
    synthesize,
    synthesize_profile,
    write_trace,
)
from .vm import FrameAllocator, PageTable, PageTableEntry

__version__ = "0.1.0"

__all__ = [
    "BookkeepingLedger",
    "Cr9Register",
    "FaultOutcome",
    "FaultTrace",
    "FrameAllocator",
    "HarvestRecord",
    "KernelModel",
    "LatencySampler",
    "MfoeEngine",
    "MfoeSeStatus",
    "ModelParameters",
    "ModelReport",
    "OutcomeKind",
    "PageTable",
    "PageTableEntry",
    "PreallocTable",
    "ProcessModel",
    "ProduceStatus",
    "PteFaultSm",
    "SimConfig",
    "SimReport",
    "Simulation",
    "SweepGrid",
    "Tlb",
    "TraceModelConfig",
    "VMA",
    "WORKLOAD_PROFILES",
    "WorkloadSpec",
    "apply_model",
    "ingest",
    "replay_seeded",
    "run",
    "sweep",
    "synthesize",
    "synthesize_profile",
    "write_trace",
]
