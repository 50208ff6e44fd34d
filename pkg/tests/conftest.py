from __future__ import annotations

from halosim.netsim import LatencyModel, Schedule, TransportConfig, spawn_world


def world_cfg(n, seed=0, schedule=Schedule.FIFO, jitter=0.0):
    return TransportConfig(n_ranks=n, seed=seed, schedule=schedule,
                           latency=LatencyModel(jitter_fraction=jitter))


def run_world(n, program, seed=0, schedule=Schedule.FIFO, jitter=0.0):
    return spawn_world(world_cfg(n, seed, schedule, jitter), program)
