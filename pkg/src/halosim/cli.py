"""Command-line benchmark harness.

Examples:
    halosim-bench --mode weak --backend p2p,fence,pscw,passive \
        --ranks 4,9 --local-grid 8x8x16 --fields 4 --timesteps 10 --csv out.csv
    halosim-bench --config bench.cfg --seed 11

A config file holds one key=value pair per line with the same keys as the
long CLI flags (dashes or underscores); explicit CLI flags override it.
Exit status is 0 only when every cell ran with zero halo mismatches and
zero consistency violations.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .bench import BenchConfig, compare_backends, run_benchmark, write_csv
from .grid import HaloVerificationError
from .netsim import DeadlockError, RankPanic


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace("x", " ").split()
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"grid {text!r}; expected NXxNYxNZ")
    nx, ny, nz = (int(p) for p in parts)
    return nx, ny, nz


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p)


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halosim-bench",
        description="Benchmark halo-swapping backends over the simulated transport.")
    parser.add_argument("--config", help="key=value config file; CLI flags override it")
    parser.add_argument("--mode", choices=["weak", "strong"])
    parser.add_argument("--backend", type=_parse_str_list, dest="backends",
                        help="comma-separated subset of p2p,fence,pscw,passive")
    parser.add_argument("--ranks", type=_parse_int_list, dest="rank_counts",
                        help="comma-separated rank counts, e.g. 4,9,16")
    parser.add_argument("--local-grid", type=_parse_dims, dest="local_grid",
                        help="local grid for weak scaling, e.g. 16x16x256")
    parser.add_argument("--global-grid", type=_parse_dims, dest="global_grid",
                        help="global grid for strong scaling, e.g. 2048x2048x128")
    parser.add_argument("--fields", type=int)
    parser.add_argument("--timesteps", type=int)
    parser.add_argument("--rounds", type=int, dest="rounds_per_step")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--seeds", type=int, help="runs averaged per cell")
    parser.add_argument("--memory-model", choices=["separate", "unified"],
                        dest="memory_model")
    parser.add_argument("--honor-assertions", action="store_const", const=True,
                        dest="honor_assertions")
    parser.add_argument("--schedule", choices=["fifo", "random", "adversarial"])
    parser.add_argument("--passive-variant", choices=["adopted", "simple"],
                        dest="passive_variant")
    parser.add_argument("--imbalance", help="injected compute delay, e.g. uniform:0:10ms")
    parser.add_argument("--no-periodic", action="store_const", const=False,
                        dest="periodic")
    parser.add_argument("--jitter", type=float, help="latency jitter fraction [0,1)")
    parser.add_argument("--get-driven", action="store_const", const=True,
                        dest="get_driven",
                        help="validator mode: drive RMA backends by remote reads")
    parser.add_argument("--csv", dest="csv_path", help="write the report here")
    return parser


_FILE_PARSERS = {
    "backends": _parse_str_list,
    "rank_counts": _parse_int_list,
    "local_grid": _parse_dims,
    "global_grid": _parse_dims,
    "fields": int,
    "timesteps": int,
    "rounds_per_step": int,
    "seed": int,
    "seeds": int,
    "jitter": float,
    "honor_assertions": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "get_driven": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "periodic": lambda s: s.lower() in ("1", "true", "yes", "on"),
}

_FILE_ALIASES = {
    "backend": "backends",
    "ranks": "rank_counts",
    "rounds": "rounds_per_step",
    "csv": "csv_path",
}


def load_config_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            key = _FILE_ALIASES.get(key, key)
            out[key] = _FILE_PARSERS.get(key, str)(value)
    return out


def config_from_args(argv: Optional[Sequence[str]] = None) -> tuple[BenchConfig, Optional[str]]:
    args = vars(build_parser().parse_args(argv))
    csv_path = args.pop("csv_path", None)
    file_path = args.pop("config", None)
    merged: dict = {}
    if file_path:
        file_values = load_config_file(file_path)
        csv_path = csv_path or file_values.pop("csv_path", None)
        merged.update(file_values)
    merged.update({k: v for k, v in args.items() if v is not None})
    return BenchConfig(**merged), csv_path


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        config, csv_path = config_from_args(argv)
        report = run_benchmark(config)
    except (HaloVerificationError, DeadlockError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RankPanic as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if csv_path:
        write_csv(report, csv_path)
    try:
        print(compare_backends(report))
    except ValueError:
        if len(report.config.backends) < 2:
            print("error: backend comparison needs at least two backends", file=sys.stderr)
            return 2
        raise
    return 1 if report.failed else 0


if __name__ == "__main__":
    sys.exit(main())
