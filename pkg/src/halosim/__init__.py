"""Deterministic halo-swapping simulator: one-sided and two-sided backends
over an in-process multi-rank transport, with an exact correctness oracle."""

from .netsim import (
    ANY_SOURCE,
    DeadlockError,
    EventLog,
    LatencyModel,
    Rank,
    RankPanic,
    RequestHandle,
    Schedule,
    TransportConfig,
    World,
    WorldResult,
    spawn_world,
)
from .onesided import (
    Assertions,
    MemoryModel,
    Region,
    Rma,
    RmaBoundsError,
    RmaConfig,
    RmaError,
    RmaStateError,
    Violation,
    Window,
    consistency_report,
    export_violations,
)
from .halo import (
    Backend,
    DecompositionPlan,
    FieldDescriptor,
    HaloConfigError,
    HaloError,
    HaloOptions,
    HaloStateError,
    HaloSwapContext,
    Neighbor,
    ReceiveView,
    complete_nonblocking_halo_swap,
    finalise_halo_communication,
    halo_region_sizes,
    init_halo_communication,
    initiate_nonblocking_halo_swap,
    neighbor_table,
    plan_decomposition,
    subbuffer_views,
)
from .grid import (
    Field,
    HaloVerificationError,
    encode,
    make_field,
    pack_halo,
    run_timesteps,
    unpack_halo,
    verify_halos,
)
from .bench import (
    BenchConfig,
    BenchReport,
    CellResult,
    compare_backends,
    run_benchmark,
    write_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
