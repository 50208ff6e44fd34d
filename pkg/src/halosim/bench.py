"""Weak/strong sweeps across the four backends, with CSV reports.

Every benchmark cell spawns one simulated world per seed, runs the halo
oracle every timestep, and aggregates simulated communication times,
synchronization-message counts, bytes moved, and ledger violations.
Timing without correctness is never reported: an oracle failure aborts
the whole report.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from math import isqrt
from typing import Optional

from .grid import run_timesteps
from .halo import Backend, HaloOptions, plan_decomposition
from .netsim import LatencyModel, Schedule, TransportConfig, spawn_world
from .onesided import MemoryModel, RmaConfig, consistency_report


@dataclass(frozen=True)
class BenchConfig:
    mode: str = "weak"
    backends: tuple[str, ...] = ("p2p", "fence", "pscw", "passive")
    rank_counts: tuple[int, ...] = (4,)
    local_grid: Optional[tuple[int, int, int]] = (16, 16, 256)
    global_grid: Optional[tuple[int, int, int]] = None
    fields: int = 28
    timesteps: int = 50
    rounds_per_step: int = 1
    seed: int = 7
    seeds: int = 3
    memory_model: str = "separate"
    honor_assertions: bool = False
    schedule: str = "fifo"
    passive_variant: str = "adopted"
    imbalance: Optional[str] = None
    periodic: bool = True
    depth: int = 2
    jitter: float = 0.0
    get_driven: bool = False  # validator mode: drive RMA by remote reads

    def validate(self) -> None:
        if self.mode not in ("weak", "strong"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "weak" and self.local_grid is None:
            raise ValueError("weak scaling fixes the local grid; --local-grid required")
        if self.mode == "strong" and self.global_grid is None:
            raise ValueError("strong scaling fixes the global grid; --global-grid required")
        for b in self.backends:
            Backend(b)
        if self.seeds < 1:
            raise ValueError("need at least one seed per cell")


@dataclass
class CellResult:
    mode: str
    backend: str
    ranks: int
    fields: int
    mean_comm_us: float
    init_block_us: float
    sync_msgs_per_step: float
    bytes_per_step: float
    violations: int

    def csv_line(self) -> str:
        return (f"{self.mode},{self.backend},{self.ranks},{self.fields},"
                f"{self.mean_comm_us:.3f},{self.init_block_us:.3f},"
                f"{self.sync_msgs_per_step:.2f},{self.bytes_per_step:.0f},"
                f"{self.violations}")


CSV_HEADER = "mode,backend,ranks,fields,mean_comm_time,init_block_time,sync_msgs,bytes,violations"


@dataclass
class BenchReport:
    config: BenchConfig
    cells: list[CellResult] = field(default_factory=list)

    @property
    def total_violations(self) -> int:
        return sum(c.violations for c in self.cells)

    @property
    def failed(self) -> bool:
        return self.total_violations > 0


_UNIT_NS = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": 1_000_000_000}


def parse_imbalance(spec: str) -> tuple[str, int, int]:
    """Parse e.g. 'uniform:0:10ms' into (kind, lo_ns, hi_ns)."""
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] != "uniform":
        raise ValueError(f"imbalance spec {spec!r}; expected uniform:LO:HI")

    def to_ns(token: str) -> int:
        m = re.fullmatch(r"(\d+(?:\.\d+)?)(ns|us|ms|s)?", token)
        if not m:
            raise ValueError(f"bad duration {token!r} in imbalance spec")
        return int(float(m.group(1)) * _UNIT_NS[m.group(2) or "ms"])

    lo, hi = to_ns(parts[1]), to_ns(parts[2])
    if hi < lo:
        raise ValueError("imbalance upper bound below lower bound")
    return "uniform", lo, hi


def imbalance_delay_fn(spec: Optional[str], seed: int):
    if spec is None:
        return None
    _, lo, hi = parse_imbalance(spec)

    def delay(rank: int, step: int) -> int:
        rng = random.Random(seed * 2_654_435_761 + rank * 97_561 + step)
        return rng.randint(lo, hi)

    return delay


def _grid_for(config: BenchConfig, n_ranks: int) -> tuple[int, int, int]:
    if config.mode == "strong":
        return config.global_grid  # type: ignore[return-value]
    lx, ly, lz = config.local_grid  # type: ignore[misc]
    px = 1
    for cand in range(isqrt(n_ranks), 0, -1):
        if n_ranks % cand == 0:
            px = cand
            break
    py = n_ranks // px
    return lx * px, ly * py, lz


def run_cell(config: BenchConfig, backend: str, n_ranks: int, seed: int) -> CellResult:
    """One (backend, ranks) cell for one seed."""
    plan = plan_decomposition(_grid_for(config, n_ranks), n_ranks,
                              periodic=config.periodic, depth=config.depth)
    options = HaloOptions(passive_variant=config.passive_variant,
                          get_driven=config.get_driven)
    rma_config = RmaConfig(memory_model=MemoryModel(config.memory_model),
                           honor_assertions=config.honor_assertions)
    delay = imbalance_delay_fn(config.imbalance, seed)
    backend_val = Backend(backend)

    def program(rank):
        return run_timesteps(
            rank, plan, backend_val, n_fields=config.fields,
            timesteps=config.timesteps, rounds_per_step=config.rounds_per_step,
            compute_delay=delay, options=options,
            rma_config=rma_config if backend_val is not Backend.P2P else None,
            verify=not config.get_driven)

    world_cfg = TransportConfig(
        n_ranks=n_ranks, seed=seed,
        latency=LatencyModel(jitter_fraction=config.jitter),
        schedule=Schedule(config.schedule))
    res = spawn_world(world_cfg, program)
    steps = max(1, config.timesteps)
    comm = [s for stats in res.results for s in stats["comm_ns"]]
    init_block = [s for stats in res.results for s in stats["init_block_ns"]]
    after_init = max(stats["sync_after_init"] for stats in res.results)
    after_init_bytes = max(stats["bytes_after_init"] for stats in res.results)
    violations = len(consistency_report(res))
    return CellResult(
        mode=config.mode, backend=backend, ranks=n_ranks, fields=config.fields,
        mean_comm_us=(sum(comm) / len(comm) / 1000.0) if comm else 0.0,
        init_block_us=(sum(init_block) / len(init_block) / 1000.0) if init_block else 0.0,
        sync_msgs_per_step=(res.world.sync_msgs - after_init) / steps,
        bytes_per_step=(res.world.data_bytes - after_init_bytes) / steps,
        violations=violations)


def run_benchmark(config: BenchConfig) -> BenchReport:
    """Sweep (backend, ranks) cells, averaging each over the configured seeds."""
    config.validate()
    report = BenchReport(config)
    for backend in config.backends:
        for n_ranks in config.rank_counts:
            per_seed = [run_cell(config, backend, n_ranks, config.seed + k)
                        for k in range(config.seeds)]
            n = len(per_seed)
            report.cells.append(CellResult(
                mode=config.mode, backend=backend, ranks=n_ranks,
                fields=config.fields,
                mean_comm_us=sum(c.mean_comm_us for c in per_seed) / n,
                init_block_us=sum(c.init_block_us for c in per_seed) / n,
                sync_msgs_per_step=sum(c.sync_msgs_per_step for c in per_seed) / n,
                bytes_per_step=sum(c.bytes_per_step for c in per_seed) / n,
                violations=sum(c.violations for c in per_seed)))
    return report


def render_csv(report: BenchReport) -> str:
    lines = [CSV_HEADER]
    lines.extend(c.csv_line() for c in report.cells)
    return "\n".join(lines) + "\n"


def write_csv(report: BenchReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_csv(report))


def compare_backends(report: BenchReport) -> str:
    """Per rank count, rank backends by mean communication time, with
    percentage deltas relative to the p2p baseline."""
    backends = {c.backend for c in report.cells}
    if len(backends) < 2:
        raise ValueError("backend comparison needs at least two backends")
    lines = []
    for ranks in sorted({c.ranks for c in report.cells}):
        cells = sorted((c for c in report.cells if c.ranks == ranks),
                       key=lambda c: c.mean_comm_us)
        baseline = next((c for c in cells if c.backend == "p2p"), None)
        lines.append(f"{ranks} ranks:")
        for c in cells:
            note = ""
            if baseline is not None and c.backend != "p2p" and baseline.mean_comm_us > 0:
                delta = (baseline.mean_comm_us - c.mean_comm_us) / baseline.mean_comm_us * 100.0
                word = "faster" if delta >= 0 else "slower"
                note = f"  ({c.backend} {abs(delta):.1f}% {word} than p2p)"
            flag = "  FAILED" if c.violations else ""
            lines.append(f"  {c.backend:>8}: {c.mean_comm_us:10.3f} us/step{note}{flag}")
    if report.failed:
        lines.append(f"FAILED: {report.total_violations} consistency violations recorded")
    return "\n".join(lines)
