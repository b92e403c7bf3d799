"""Efficiency scoring: run a command while sampling memory through a
pluggable probe, then integrate the memory-time curve above a floor.

The probe is any command printing one integer (bytes) to stdout; the
placeholder ``{pid}`` expands to the monitored process id. The builtin
probe ``self-rss`` reads the child's RSS from /proc without spawning."""
from __future__ import annotations

import json
import logging
import shlex
import subprocess
import time
from dataclasses import dataclass

from .errors import VoxsegError

log = logging.getLogger(__name__)

RUNTIME_TOLERANCE_S = 15.0
MEM_FLOOR_GB = 4.0
BYTES_PER_GB = 1024**3
DEFAULT_PERIOD_S = 0.1
SELF_RSS_PROBE = "self-rss"


@dataclass(frozen=True)
class ResourceTrace:
    """Memory samples (seconds since start, bytes), strictly increasing in t."""

    samples: tuple[tuple[float, int], ...]
    period_s: float

    def __post_init__(self):
        ts = [t for t, _ in self.samples]
        if any(t1 <= t0 for t0, t1 in zip(ts, ts[1:])):
            raise VoxsegError("trace times must be strictly increasing")
        if any(m < 0 for _, m in self.samples):
            raise VoxsegError("memory samples must be nonnegative")

    @property
    def peak_bytes(self) -> int:
        return max((m for _, m in self.samples), default=0)


@dataclass(frozen=True)
class EfficiencyReport:
    runtime_s: float
    runtime_over_tolerance_s: float
    mem_auc_gb_s: float
    peak_mem_gb: float

    def to_dict(self) -> dict:
        return {
            "runtime_s": self.runtime_s,
            "runtime_over_tolerance_s": self.runtime_over_tolerance_s,
            "mem_auc_gb_s": self.mem_auc_gb_s,
            "peak_mem_gb": self.peak_mem_gb,
        }


def _read_self_rss(pid: int) -> int:
    with open(f"/proc/{pid}/statm") as fh:
        pages = int(fh.read().split()[1])
    return pages * 4096


def _run_probe(probe: str, pid: int) -> int | None:
    if probe == SELF_RSS_PROBE:
        try:
            return _read_self_rss(pid)
        except (OSError, ValueError, IndexError):
            return None
    cmd = shlex.split(probe.replace("{pid}", str(pid)))
    try:
        out = subprocess.run(cmd, capture_output=True, timeout=10).stdout
        return int(out.strip())
    except (ValueError, OSError, subprocess.SubprocessError) as exc:
        log.warning("probe %r failed (%s); sample skipped", probe, exc)
        return None


def sample_run(
    cmd: list[str] | str,
    probe: str = SELF_RSS_PROBE,
    period_s: float = DEFAULT_PERIOD_S,
) -> tuple[int, ResourceTrace]:
    """Run ``cmd`` to completion, sampling memory every ``period_s``.

    Returns the exit status and the trace, which always includes a final
    sample taken after exit.
    """
    if period_s <= 0:
        raise VoxsegError(f"period must be positive, got {period_s}")
    argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
    start = time.perf_counter()
    proc = subprocess.Popen(argv)
    samples: list[tuple[float, int]] = []
    last_t = -1.0

    def take_sample():
        nonlocal last_t
        mem = _run_probe(probe, proc.pid)
        if mem is None:
            return
        t = time.perf_counter() - start
        if t <= last_t:
            return
        samples.append((t, mem))
        last_t = t

    take_sample()
    while proc.poll() is None:
        time.sleep(period_s)
        if proc.poll() is None:
            take_sample()
    # Final sample at exit time. A per-process probe can no longer answer
    # for a dead pid, so carry the last observed memory forward; a
    # system-wide probe still gets consulted.
    end_t = time.perf_counter() - start
    mem = _run_probe(probe, proc.pid)
    if mem is None:
        mem = samples[-1][1] if samples else 0
    if not samples or end_t > samples[-1][0]:
        samples.append((end_t, mem))
    return proc.returncode, ResourceTrace(tuple(samples), period_s)


def auc_above_floor(trace: ResourceTrace, floor_gb: float = MEM_FLOOR_GB) -> float:
    """Trapezoidal integral of max(0, mem_gb - floor_gb) over time, with
    segments split exactly at floor crossings."""
    if len(trace.samples) < 2:
        raise VoxsegError(f"trace needs >= 2 samples, got {len(trace.samples)}")
    total = 0.0
    pts = [(t, m / BYTES_PER_GB - floor_gb) for t, m in trace.samples]
    for (t0, a0), (t1, a1) in zip(pts, pts[1:]):
        if a0 <= 0 and a1 <= 0:
            continue
        if a0 >= 0 and a1 >= 0:
            total += 0.5 * (a0 + a1) * (t1 - t0)
        else:
            tc = t0 + (0.0 - a0) / (a1 - a0) * (t1 - t0)
            if a0 > 0:
                total += 0.5 * a0 * (tc - t0)
            else:
                total += 0.5 * a1 * (t1 - tc)
    return total


def efficiency_report(trace: ResourceTrace, runtime_s: float) -> EfficiencyReport:
    return EfficiencyReport(
        runtime_s=runtime_s,
        runtime_over_tolerance_s=max(0.0, runtime_s - RUNTIME_TOLERANCE_S),
        mem_auc_gb_s=auc_above_floor(trace),
        peak_mem_gb=trace.peak_bytes / BYTES_PER_GB,
    )


def write_report(report: EfficiencyReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
